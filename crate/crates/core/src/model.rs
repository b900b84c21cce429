//! The attention-MIL models: instance projection, attention-weighted bag
//! aggregation, classification into the probability simplex, and a
//! deterministic gated-attention baseline.
//!
//! Both models expose a flat parameter vector organized in named blocks, a
//! loss (with exact gradient) under externally supplied sampling noise, and
//! a prediction routine. The forward pass is written once, generic over the
//! autodiff scope, so the plain evaluation path and the differentiated path
//! cannot drift apart.

use crate::attention::{
    kl_in, marginal_in, normalize_in, AttentionPosterior, LiftedSgp, Normalization,
    SgpAttentionState,
};
use crate::autodiff::{Scope, Tape, Value};
use crate::data::{Dataset, InstanceBag};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::linalg::{sample_variance, Mat};
use crate::metrics::PredictionRecord;
use crate::rng::StreamRng;
use std::cell::RefCell;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

thread_local! {
    // Reused per-thread tape and adjoint buffer; a gradient step allocates
    // millions of nodes and reallocating them every bag dominates runtime.
    static TAPE_BUF: RefCell<(Tape, Vec<f64>)> = RefCell::new((Tape::new(), Vec::new()));
}

const MODEL_MAGIC: &[u8; 4] = b"GPMM";
const MODEL_VERSION: u32 = 1;

/// One contiguous group of trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    ProjW1,
    ProjB1,
    ProjW2,
    ProjB2,
    ClfW,
    ClfB,
    LmWeights,
    LmBias,
    VarMean,
    VarCovFactor,
    InducingZ,
    KernLengthscales,
    KernOutputscale,
    KernOffset,
    GateV,
    GateU,
    GateW,
}

impl ParamBlock {
    pub fn name(self) -> &'static str {
        match self {
            ParamBlock::ProjW1 => "proj_w1",
            ParamBlock::ProjB1 => "proj_b1",
            ParamBlock::ProjW2 => "proj_w2",
            ParamBlock::ProjB2 => "proj_b2",
            ParamBlock::ClfW => "clf_w",
            ParamBlock::ClfB => "clf_b",
            ParamBlock::LmWeights => "lm_weights",
            ParamBlock::LmBias => "lm_bias",
            ParamBlock::VarMean => "var_mean",
            ParamBlock::VarCovFactor => "var_cov_factor",
            ParamBlock::InducingZ => "inducing_z",
            ParamBlock::KernLengthscales => "kern_lengthscales",
            ParamBlock::KernOutputscale => "kern_outputscale",
            ParamBlock::KernOffset => "kern_offset",
            ParamBlock::GateV => "gate_v",
            ParamBlock::GateU => "gate_u",
            ParamBlock::GateW => "gate_w",
        }
    }

    /// Decoupled weight decay applies to affine weights only; biases,
    /// variational and kernel parameters are left to the KL regularizer.
    pub fn weight_decayed(self) -> bool {
        matches!(
            self,
            ParamBlock::ProjW1
                | ParamBlock::ProjW2
                | ParamBlock::ClfW
                | ParamBlock::LmWeights
                | ParamBlock::GateV
                | ParamBlock::GateU
                | ParamBlock::GateW
        )
    }
}

/// Loss decomposition of one bag step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    /// Marginal variance entries clamped from negative round-off.
    pub clamped: usize,
}

/// Common surface the trainer drives: flat parameter access with a block
/// layout, loss and gradient under fixed sampling noise, and prediction.
pub trait BagClassifier {
    fn feat_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    /// Blocks in canonical flat order with their lengths.
    fn layout(&self) -> Vec<(ParamBlock, usize)>;
    fn params_flat(&self) -> Vec<f64>;
    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()>;
    /// Whether the model consumes sampling noise (rows x instances).
    fn stochastic(&self) -> bool;
    fn loss_with_noise(&self, bag: &InstanceBag, noise: &Mat, kl_scale: f64) -> Result<LossParts>;
    fn loss_grad_with_noise(
        &self,
        bag: &InstanceBag,
        noise: &Mat,
        kl_scale: f64,
    ) -> Result<(LossParts, Vec<f64>)>;
    fn predict(
        &self,
        bag: &InstanceBag,
        n_samples: usize,
        rng: &mut StreamRng,
    ) -> Result<PredictionRecord>;

    fn n_params(&self) -> usize {
        self.layout().iter().map(|(_, l)| l).sum()
    }

    /// Block containing flat index `i`.
    fn block_of(&self, i: usize) -> ParamBlock {
        let mut cursor = 0;
        for (block, len) in self.layout() {
            cursor += len;
            if i < cursor {
                return block;
            }
        }
        panic!("flat index {i} out of range");
    }
}

/// Architecture sizes of the SGP attention model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub proj_dim: usize,
    pub n_inducing: usize,
    pub n_classes: usize,
}

/// Projector + sparse-GP attention head + linear classifier.
#[derive(Debug, Clone)]
pub struct MilModel {
    pub dims: ModelDims,
    pub proj_w1: Mat,
    pub proj_b1: Vec<f64>,
    pub proj_w2: Mat,
    pub proj_b2: Vec<f64>,
    pub clf_w: Mat,
    pub clf_b: Vec<f64>,
    pub sgp: SgpAttentionState,
    pub normalization: Normalization,
}

fn uniform_mat(rows: usize, cols: usize, fan_in: usize, rng: &mut StreamRng) -> Mat {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.range_f64(-bound, bound))
}

impl MilModel {
    /// Initialize with fan-in uniform affine weights, zero biases, and
    /// inducing locations drawn from the projected instances of the first
    /// bags (falling back to N(0, 0.5^2) entries when the dataset is too
    /// small to cover all m rows).
    pub fn init(
        dims: ModelDims,
        normalization: Normalization,
        use_lm: bool,
        diag_only: bool,
        dataset: &Dataset,
        rng: &mut StreamRng,
    ) -> Result<MilModel> {
        let proj_w1 = uniform_mat(dims.hidden, dims.feat_dim, dims.feat_dim, rng);
        let proj_b1 = vec![0.0; dims.hidden];
        let proj_w2 = uniform_mat(dims.proj_dim, dims.hidden, dims.hidden, rng);
        let proj_b2 = vec![0.0; dims.proj_dim];
        let clf_w = uniform_mat(dims.n_classes, dims.proj_dim, dims.proj_dim, rng);
        let clf_b = vec![0.0; dims.n_classes];

        let mut partial = MilModel {
            dims,
            proj_w1,
            proj_b1,
            proj_w2,
            proj_b2,
            clf_w,
            clf_b,
            sgp: SgpAttentionState::init(
                Mat::zeros(dims.n_inducing, dims.proj_dim),
                use_lm,
                diag_only,
                &mut StreamRng::new(0),
            ),
            normalization,
        };

        // Collect projected instances from the leading bags until the
        // inducing set can be sampled.
        let target = dims.n_inducing.max(4 * dims.n_inducing.min(64));
        let mut pool: Vec<Vec<f64>> = Vec::new();
        'outer: for bag in &dataset.bags {
            let projected = project_instances(&bag.features, &partial)?;
            for k in 0..projected.rows() {
                pool.push(projected.row(k).to_vec());
                if pool.len() >= target {
                    break 'outer;
                }
            }
        }
        let mut z = Mat::zeros(dims.n_inducing, dims.proj_dim);
        if pool.len() >= dims.n_inducing {
            for (row, pick) in rng
                .sample_indices(pool.len(), dims.n_inducing)
                .into_iter()
                .enumerate()
            {
                for d in 0..dims.proj_dim {
                    z.set(row, d, pool[pick][d]);
                }
            }
        } else {
            for row in 0..dims.n_inducing {
                if row < pool.len() {
                    for d in 0..dims.proj_dim {
                        z.set(row, d, pool[row][d]);
                    }
                } else {
                    for d in 0..dims.proj_dim {
                        z.set(row, d, 0.5 * rng.next_normal());
                    }
                }
            }
        }
        partial.sgp = SgpAttentionState::init(z, use_lm, diag_only, rng);
        Ok(partial)
    }

    fn lift<S: Scope>(&self, scope: &mut S, reg: &mut impl FnMut(&mut S, f64) -> S::V) -> LiftedMil<S::V> {
        let d = self.dims;
        let w1 = Mat::from_fn(d.hidden, d.feat_dim, |i, j| reg(scope, self.proj_w1.get(i, j)));
        let b1 = self.proj_b1.iter().map(|v| reg(scope, *v)).collect();
        let w2 = Mat::from_fn(d.proj_dim, d.hidden, |i, j| reg(scope, self.proj_w2.get(i, j)));
        let b2 = self.proj_b2.iter().map(|v| reg(scope, *v)).collect();
        let clf_w = Mat::from_fn(d.n_classes, d.proj_dim, |i, j| reg(scope, self.clf_w.get(i, j)));
        let clf_b = self.clf_b.iter().map(|v| reg(scope, *v)).collect();
        let lm_weights: Vec<S::V> = self.sgp.lm_weights.iter().map(|v| reg(scope, *v)).collect();
        let lm_bias = reg(scope, self.sgp.lm_bias);
        let var_mean: Vec<S::V> = self.sgp.var_mean.iter().map(|v| reg(scope, *v)).collect();
        let packed: Vec<S::V> = self
            .sgp
            .cov_factor_packed
            .iter()
            .map(|v| reg(scope, *v))
            .collect();
        let inducing = Mat::from_fn(d.n_inducing, d.proj_dim, |i, j| {
            reg(scope, self.sgp.inducing.get(i, j))
        });
        let raw_ls: Vec<S::V> = self
            .sgp
            .kernel
            .raw_lengthscales
            .iter()
            .map(|v| reg(scope, *v))
            .collect();
        let raw_out = reg(scope, self.sgp.kernel.raw_outputscale);
        let raw_off = reg(scope, self.sgp.kernel.raw_offset);
        let sgp = LiftedSgp::assemble(
            scope, inducing, var_mean, &packed, lm_weights, lm_bias, raw_out, &raw_ls, raw_off,
            &self.sgp,
        );
        LiftedMil {
            w1,
            b1,
            w2,
            b2,
            clf_w,
            clf_b,
            sgp,
        }
    }

    /// Loss of one bag with fixed noise, plus all forward intermediates, in
    /// an arbitrary scope.
    fn loss_in<S: Scope>(
        &self,
        scope: &mut S,
        lifted: &LiftedMil<S::V>,
        bag: &InstanceBag,
        noise: &Mat,
        kl_scale: f64,
    ) -> Result<(S::V, S::V, S::V, ForwardParts<S::V>)> {
        if bag.bag_label >= self.dims.n_classes {
            return Err(Error::LabelOutOfRange {
                label: bag.bag_label,
                n_classes: self.dims.n_classes,
            });
        }
        let parts = forward_in(scope, lifted, &bag.features, noise, self.normalization)?;
        let n_samples = parts.probs.rows();
        let mut ce_sum = scope.konst(0.0);
        for s in 0..n_samples {
            let p = parts.probs.get(s, bag.bag_label);
            let lp = scope.ln_clamped(p);
            ce_sum = scope.add(ce_sum, lp);
        }
        let scale = scope.konst(-1.0 / n_samples as f64);
        let ce = scope.mul(scale, ce_sum);
        let kl = kl_in(scope, &lifted.sgp, &parts.marginal.prior)?;
        let loss = scope.add_scaled(ce, kl, kl_scale);
        Ok((loss, ce, kl, parts))
    }
}

struct LiftedMil<V> {
    w1: Mat<V>,
    b1: Vec<V>,
    w2: Mat<V>,
    b2: Vec<V>,
    clf_w: Mat<V>,
    clf_b: Vec<V>,
    sgp: LiftedSgp<V>,
}

/// Forward intermediates of one bag in scope values.
struct ForwardParts<V> {
    projected: Mat<V>,
    marginal: crate::attention::MarginalParts<V>,
    attn: Mat<V>,
    bag_reps: Mat<V>,
    probs: Mat<V>,
}

fn affine_row<S: Scope>(scope: &mut S, w: &Mat<S::V>, b: &[S::V], x: &[S::V]) -> Vec<S::V> {
    (0..w.rows())
        .map(|i| {
            let lin = scope.dot(w.row(i), x);
            scope.add(lin, b[i])
        })
        .collect()
}

fn project_in<S: Scope>(
    scope: &mut S,
    w1: &Mat<S::V>,
    b1: &[S::V],
    w2: &Mat<S::V>,
    b2: &[S::V],
    features: &Mat<f64>,
) -> Result<Mat<S::V>> {
    if features.cols() != w1.cols() {
        return Err(Error::DimensionMismatch {
            context: "project_instances: feature width",
            expected: w1.cols(),
            actual: features.cols(),
        });
    }
    let k = features.rows();
    let d_out = w2.rows();
    let mut data = Vec::with_capacity(k * d_out);
    for inst in 0..k {
        let x: Vec<S::V> = features.row(inst).iter().map(|v| scope.konst(*v)).collect();
        let mut h = affine_row(scope, w1, b1, &x);
        for v in h.iter_mut() {
            *v = scope.relu(*v);
        }
        let mut out = affine_row(scope, w2, b2, &h);
        for v in out.iter_mut() {
            *v = scope.tanh(*v);
        }
        data.extend(out);
    }
    Ok(Mat::from_vec(k, d_out, data))
}

fn forward_in<S: Scope>(
    scope: &mut S,
    lifted: &LiftedMil<S::V>,
    features: &Mat<f64>,
    noise: &Mat,
    normalization: Normalization,
) -> Result<ForwardParts<S::V>> {
    if features.rows() == 0 {
        return Err(Error::invalid("bag has no instances"));
    }
    if noise.rows() == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    if noise.cols() != features.rows() {
        return Err(Error::DimensionMismatch {
            context: "forward: noise width",
            expected: features.rows(),
            actual: noise.cols(),
        });
    }
    let projected = project_in(scope, &lifted.w1, &lifted.b1, &lifted.w2, &lifted.b2, features)?;
    let marginal = marginal_in(scope, &projected, &lifted.sgp)?;
    let k = projected.rows();
    let n_samples = noise.rows();

    let sd: Vec<S::V> = marginal.var.iter().map(|v| scope.sqrt(*v)).collect();
    let raw = Mat::from_fn(n_samples, k, |s, i| {
        let e = scope.konst(noise.get(s, i));
        let spread = scope.mul(sd[i], e);
        scope.add(marginal.mean[i], spread)
    });
    let attn = normalize_in(scope, &raw, normalization);

    let d_out = projected.cols();
    let zero = scope.konst(0.0);
    let mut reps = Mat::fill(n_samples, d_out, zero);
    for s in 0..n_samples {
        for d in 0..d_out {
            let mut acc = zero;
            for i in 0..k {
                let prod = scope.mul(attn.get(s, i), projected.get(i, d));
                acc = scope.add(acc, prod);
            }
            reps.set(s, d, acc);
        }
    }

    let mut probs_data = Vec::with_capacity(n_samples * lifted.clf_w.rows());
    for s in 0..n_samples {
        let logits = affine_row(scope, &lifted.clf_w, &lifted.clf_b, reps.row(s));
        probs_data.extend(scope.softmax(&logits));
    }
    let probs = Mat::from_vec(n_samples, lifted.clf_w.rows(), probs_data);

    Ok(ForwardParts {
        projected,
        marginal,
        attn,
        bag_reps: reps,
        probs,
    })
}

/// All intermediates of one stochastic bag forward pass.
#[derive(Debug, Clone)]
pub struct BagForward {
    pub projected: Mat,
    pub posterior: AttentionPosterior,
    /// Post-activation attention samples, N_s x K.
    pub attention_samples: Mat,
    pub bag_reps: Mat,
    pub prob_samples: Mat,
}

/// Rowwise tanh(W2 relu(W1 x + b1) + b2).
pub fn project_instances(features: &Mat, model: &MilModel) -> Result<Mat> {
    let mut scope = Value;
    let mut reg = |_: &mut Value, v: f64| v;
    let lifted = model.lift(&mut scope, &mut reg);
    project_in(&mut scope, &lifted.w1, &lifted.b1, &lifted.w2, &lifted.b2, features)
}

/// Row s of the result is sum_k attention[s, k] * projected[k, :].
pub fn aggregate_bag(projected: &Mat, attention_samples: &Mat) -> Result<Mat> {
    if attention_samples.cols() != projected.rows() {
        return Err(Error::DimensionMismatch {
            context: "aggregate_bag: instance count",
            expected: projected.rows(),
            actual: attention_samples.cols(),
        });
    }
    Ok(attention_samples.matmul(projected))
}

/// Rowwise max-subtracted softmax of the classifier logits.
pub fn classify(bag_reps: &Mat, model: &MilModel) -> Result<Mat> {
    if bag_reps.cols() != model.dims.proj_dim {
        return Err(Error::DimensionMismatch {
            context: "classify: representation width",
            expected: model.dims.proj_dim,
            actual: bag_reps.cols(),
        });
    }
    let mut scope = Value;
    let mut out = Vec::with_capacity(bag_reps.rows() * model.dims.n_classes);
    for s in 0..bag_reps.rows() {
        let logits: Vec<f64> = (0..model.dims.n_classes)
            .map(|c| crate::linalg::dot(model.clf_w.row(c), bag_reps.row(s)) + model.clf_b[c])
            .collect();
        out.extend(scope.softmax(&logits));
    }
    Ok(Mat::from_vec(bag_reps.rows(), model.dims.n_classes, out))
}

/// Full stochastic forward pass with explicit noise (one row per sample).
pub fn forward_bag_with_noise(bag: &InstanceBag, model: &MilModel, noise: &Mat) -> Result<BagForward> {
    let mut scope = Value;
    let mut reg = |_: &mut Value, v: f64| v;
    let lifted = model.lift(&mut scope, &mut reg);
    let parts = forward_in(&mut scope, &lifted, &bag.features, noise, model.normalization)?;
    Ok(BagForward {
        projected: parts.projected,
        posterior: AttentionPosterior {
            mean: parts.marginal.mean,
            variance: parts.marginal.var,
            cov: parts.marginal.cov,
            clamped: parts.marginal.clamped,
        },
        attention_samples: parts.attn,
        bag_reps: parts.bag_reps,
        prob_samples: parts.probs,
    })
}

/// Full stochastic forward pass drawing `n_samples` noise rows from `rng`.
pub fn forward_bag(
    bag: &InstanceBag,
    model: &MilModel,
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<BagForward> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    let noise = Mat::from_fn(n_samples, bag.n_instances(), |_, _| rng.next_normal());
    forward_bag_with_noise(bag, model, &noise)
}

fn record_from_probs(
    bag: &InstanceBag,
    prob_samples: &Mat,
    attention_mean: Vec<f64>,
) -> PredictionRecord {
    let n_samples = prob_samples.rows();
    let n_classes = prob_samples.cols();
    let mut mean_probs = vec![0.0; n_classes];
    for s in 0..n_samples {
        for c in 0..n_classes {
            mean_probs[c] += prob_samples.get(s, c);
        }
    }
    for m in mean_probs.iter_mut() {
        *m /= n_samples as f64;
    }
    let std_probs: Vec<f64> = (0..n_classes)
        .map(|c| {
            let col: Vec<f64> = (0..n_samples).map(|s| prob_samples.get(s, c)).collect();
            sample_variance(&col).sqrt()
        })
        .collect();
    let mut predicted = 0;
    for c in 1..n_classes {
        if mean_probs[c] > mean_probs[predicted] {
            predicted = c;
        }
    }
    PredictionRecord {
        bag_id: bag.id.clone(),
        prob_samples: prob_samples.clone(),
        mean_probs,
        std_probs,
        predicted,
        true_label: bag.bag_label,
        attention_mean,
    }
}

impl BagClassifier for MilModel {
    fn feat_dim(&self) -> usize {
        self.dims.feat_dim
    }

    fn n_classes(&self) -> usize {
        self.dims.n_classes
    }

    fn layout(&self) -> Vec<(ParamBlock, usize)> {
        let d = self.dims;
        vec![
            (ParamBlock::ProjW1, d.hidden * d.feat_dim),
            (ParamBlock::ProjB1, d.hidden),
            (ParamBlock::ProjW2, d.proj_dim * d.hidden),
            (ParamBlock::ProjB2, d.proj_dim),
            (ParamBlock::ClfW, d.n_classes * d.proj_dim),
            (ParamBlock::ClfB, d.n_classes),
            (ParamBlock::LmWeights, d.proj_dim),
            (ParamBlock::LmBias, 1),
            (ParamBlock::VarMean, d.n_inducing),
            (
                ParamBlock::VarCovFactor,
                d.n_inducing * (d.n_inducing + 1) / 2,
            ),
            (ParamBlock::InducingZ, d.n_inducing * d.proj_dim),
            (ParamBlock::KernLengthscales, d.proj_dim),
            (ParamBlock::KernOutputscale, 1),
            (ParamBlock::KernOffset, 1),
        ]
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(self.proj_w1.data());
        out.extend_from_slice(&self.proj_b1);
        out.extend_from_slice(self.proj_w2.data());
        out.extend_from_slice(&self.proj_b2);
        out.extend_from_slice(self.clf_w.data());
        out.extend_from_slice(&self.clf_b);
        out.extend_from_slice(&self.sgp.lm_weights);
        out.push(self.sgp.lm_bias);
        out.extend_from_slice(&self.sgp.var_mean);
        out.extend_from_slice(&self.sgp.cov_factor_packed);
        out.extend_from_slice(self.sgp.inducing.data());
        out.extend_from_slice(&self.sgp.kernel.raw_lengthscales);
        out.push(self.sgp.kernel.raw_outputscale);
        out.push(self.sgp.kernel.raw_offset);
        out
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "set_params_flat",
                expected: self.n_params(),
                actual: flat.len(),
            });
        }
        let mut cursor = 0usize;
        let take = |n: usize, cursor: &mut usize| {
            let s = &flat[*cursor..*cursor + n];
            *cursor += n;
            s.to_vec()
        };
        let d = self.dims;
        self.proj_w1 = Mat::from_vec(d.hidden, d.feat_dim, take(d.hidden * d.feat_dim, &mut cursor));
        self.proj_b1 = take(d.hidden, &mut cursor);
        self.proj_w2 = Mat::from_vec(d.proj_dim, d.hidden, take(d.proj_dim * d.hidden, &mut cursor));
        self.proj_b2 = take(d.proj_dim, &mut cursor);
        self.clf_w = Mat::from_vec(d.n_classes, d.proj_dim, take(d.n_classes * d.proj_dim, &mut cursor));
        self.clf_b = take(d.n_classes, &mut cursor);
        self.sgp.lm_weights = take(d.proj_dim, &mut cursor);
        self.sgp.lm_bias = take(1, &mut cursor)[0];
        self.sgp.var_mean = take(d.n_inducing, &mut cursor);
        self.sgp.cov_factor_packed = take(d.n_inducing * (d.n_inducing + 1) / 2, &mut cursor);
        self.sgp.inducing = Mat::from_vec(
            d.n_inducing,
            d.proj_dim,
            take(d.n_inducing * d.proj_dim, &mut cursor),
        );
        self.sgp.kernel.raw_lengthscales = take(d.proj_dim, &mut cursor);
        self.sgp.kernel.raw_outputscale = take(1, &mut cursor)[0];
        self.sgp.kernel.raw_offset = take(1, &mut cursor)[0];
        Ok(())
    }

    fn stochastic(&self) -> bool {
        true
    }

    fn loss_with_noise(&self, bag: &InstanceBag, noise: &Mat, kl_scale: f64) -> Result<LossParts> {
        let mut scope = Value;
        let mut reg = |_: &mut Value, v: f64| v;
        let lifted = self.lift(&mut scope, &mut reg);
        let (loss, ce, kl, parts) = self.loss_in(&mut scope, &lifted, bag, noise, kl_scale)?;
        Ok(LossParts {
            loss,
            ce,
            kl,
            clamped: parts.marginal.clamped,
        })
    }

    fn loss_grad_with_noise(
        &self,
        bag: &InstanceBag,
        noise: &Mat,
        kl_scale: f64,
    ) -> Result<(LossParts, Vec<f64>)> {
        TAPE_BUF.with(|cell| {
            let (tape, adj) = &mut *cell.borrow_mut();
            tape.clear();
            let mut reg = |t: &mut Tape, v: f64| t.leaf(v);
            let lifted = self.lift(tape, &mut reg);
            let n_params = self.n_params();
            let (loss, ce, kl, parts) = self.loss_in(tape, &lifted, bag, noise, kl_scale)?;
            tape.backward_into(loss, adj);
            let grads: Vec<f64> = adj[..n_params].to_vec();
            Ok((
                LossParts {
                    loss: tape.val(loss),
                    ce: tape.val(ce),
                    kl: tape.val(kl),
                    clamped: parts.marginal.clamped,
                },
                grads,
            ))
        })
    }

    fn predict(
        &self,
        bag: &InstanceBag,
        n_samples: usize,
        rng: &mut StreamRng,
    ) -> Result<PredictionRecord> {
        let fwd = forward_bag(bag, self, n_samples, rng)?;
        let k = bag.n_instances();
        let mut attention_mean = vec![0.0; k];
        for s in 0..n_samples {
            for i in 0..k {
                attention_mean[i] += fwd.attention_samples.get(s, i);
            }
        }
        for a in attention_mean.iter_mut() {
            *a /= n_samples as f64;
        }
        Ok(record_from_probs(bag, &fwd.prob_samples, attention_mean))
    }
}

/// Serialize a model (dims, flags, flat parameters as little-endian f64).
pub fn save_model(model: &MilModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let d = model.dims;
    for v in [
        d.feat_dim,
        d.hidden,
        d.proj_dim,
        d.n_inducing,
        d.n_classes,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let flags = [
        u8::from(model.sgp.use_lm),
        u8::from(model.sgp.diag_only),
        match model.normalization {
            Normalization::Softmax => 0u8,
            Normalization::Sigmoid => 1u8,
        },
    ];
    w.write_all(&flags)?;
    w.write_all(&model.sgp.kernel.jitter_base.to_le_bytes())?;
    let flat = model.params_flat();
    w.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in &flat {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read a model file written by [`save_model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<MilModel> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Parse {
        record: 0,
        message: format!("missing model header: {e}"),
    })?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Parse {
            record: 0,
            message: "bad magic; not a model file".into(),
        });
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != MODEL_VERSION {
        return Err(Error::Parse {
            record: 0,
            message: format!("unsupported model version {version}"),
        });
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        r.read_exact(&mut buf4)?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let mut flags = [0u8; 3];
    r.read_exact(&mut flags)?;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let jitter_base = f64::from_le_bytes(buf8);
    r.read_exact(&mut buf8)?;
    let n_params = u64::from_le_bytes(buf8) as usize;
    let mut flat = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        r.read_exact(&mut buf8).map_err(|e| Error::Parse {
            record: 0,
            message: format!("truncated parameters: {e}"),
        })?;
        flat.push(f64::from_le_bytes(buf8));
    }
    let dims = ModelDims {
        feat_dim: dims[0],
        hidden: dims[1],
        proj_dim: dims[2],
        n_inducing: dims[3],
        n_classes: dims[4],
    };
    let normalization = match flags[2] {
        0 => Normalization::Softmax,
        1 => Normalization::Sigmoid,
        other => {
            return Err(Error::Parse {
                record: 0,
                message: format!("invalid normalization flag {other}"),
            })
        }
    };
    let mut sgp = SgpAttentionState::init(
        Mat::zeros(dims.n_inducing, dims.proj_dim),
        flags[0] == 1,
        flags[1] == 1,
        &mut StreamRng::new(0),
    );
    sgp.kernel = KernelParams {
        raw_outputscale: 0.0,
        raw_lengthscales: vec![0.0; dims.proj_dim],
        raw_offset: 0.0,
        jitter_base,
    };
    let mut model = MilModel {
        dims,
        proj_w1: Mat::zeros(dims.hidden, dims.feat_dim),
        proj_b1: vec![0.0; dims.hidden],
        proj_w2: Mat::zeros(dims.proj_dim, dims.hidden),
        proj_b2: vec![0.0; dims.proj_dim],
        clf_w: Mat::zeros(dims.n_classes, dims.proj_dim),
        clf_b: vec![0.0; dims.n_classes],
        sgp,
        normalization,
    };
    model.set_params_flat(&flat)?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// Deterministic gated-attention baseline
// ---------------------------------------------------------------------------

/// Gate parameters: score_k = w . (tanh(V h_k) * sigmoid(U h_k)).
#[derive(Debug, Clone)]
pub struct GatedAttentionParams {
    pub v: Mat,
    pub u: Mat,
    pub w: Vec<f64>,
}

/// Softmax-normalized gated attention weights over the rows of `features`.
pub fn gated_attention_baseline(features: &Mat, params: &GatedAttentionParams) -> Result<Vec<f64>> {
    if features.cols() != params.v.cols() {
        return Err(Error::DimensionMismatch {
            context: "gated_attention: feature width",
            expected: params.v.cols(),
            actual: features.cols(),
        });
    }
    let mut scope = Value;
    let gate = lift_gate(&mut scope, params, &mut |_: &mut Value, v| v);
    let h = lift_const_mat(&mut scope, features);
    let scores = gated_scores_in(&mut scope, &gate, &h);
    Ok(scope.softmax(&scores))
}

fn lift_const_mat<S: Scope>(scope: &mut S, m: &Mat) -> Mat<S::V> {
    Mat::from_fn(m.rows(), m.cols(), |i, j| scope.konst(m.get(i, j)))
}

struct LiftedGate<V> {
    v: Mat<V>,
    u: Mat<V>,
    w: Vec<V>,
}

fn lift_gate<S: Scope>(
    scope: &mut S,
    params: &GatedAttentionParams,
    reg: &mut impl FnMut(&mut S, f64) -> S::V,
) -> LiftedGate<S::V> {
    LiftedGate {
        v: Mat::from_fn(params.v.rows(), params.v.cols(), |i, j| {
            reg(scope, params.v.get(i, j))
        }),
        u: Mat::from_fn(params.u.rows(), params.u.cols(), |i, j| {
            reg(scope, params.u.get(i, j))
        }),
        w: params.w.iter().map(|v| reg(scope, *v)).collect(),
    }
}

fn gated_scores_in<S: Scope>(scope: &mut S, gate: &LiftedGate<S::V>, h: &Mat<S::V>) -> Vec<S::V> {
    let g = gate.v.rows();
    (0..h.rows())
        .map(|k| {
            let mut score = scope.konst(0.0);
            for i in 0..g {
                let a = scope.dot(gate.v.row(i), h.row(k));
                let t = scope.tanh(a);
                let b = scope.dot(gate.u.row(i), h.row(k));
                let s = scope.sigmoid(b);
                let gated = scope.mul(t, s);
                let contrib = scope.mul(gate.w[i], gated);
                score = scope.add(score, contrib);
            }
            score
        })
        .collect()
}

/// Architecture sizes of the gated baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatedDims {
    pub feat_dim: usize,
    pub hidden: usize,
    pub proj_dim: usize,
    pub gate_dim: usize,
    pub n_classes: usize,
}

/// Deterministic attention-MIL baseline: shared projector architecture,
/// gated attention pooling, linear classifier.
#[derive(Debug, Clone)]
pub struct GatedMilModel {
    pub dims: GatedDims,
    pub proj_w1: Mat,
    pub proj_b1: Vec<f64>,
    pub proj_w2: Mat,
    pub proj_b2: Vec<f64>,
    pub gate: GatedAttentionParams,
    pub clf_w: Mat,
    pub clf_b: Vec<f64>,
}

impl GatedMilModel {
    pub fn init(dims: GatedDims, rng: &mut StreamRng) -> GatedMilModel {
        GatedMilModel {
            dims,
            proj_w1: uniform_mat(dims.hidden, dims.feat_dim, dims.feat_dim, rng),
            proj_b1: vec![0.0; dims.hidden],
            proj_w2: uniform_mat(dims.proj_dim, dims.hidden, dims.hidden, rng),
            proj_b2: vec![0.0; dims.proj_dim],
            gate: GatedAttentionParams {
                v: uniform_mat(dims.gate_dim, dims.proj_dim, dims.proj_dim, rng),
                u: uniform_mat(dims.gate_dim, dims.proj_dim, dims.proj_dim, rng),
                w: {
                    let bound = 1.0 / (dims.gate_dim as f64).sqrt();
                    (0..dims.gate_dim).map(|_| rng.range_f64(-bound, bound)).collect()
                },
            },
            clf_w: uniform_mat(dims.n_classes, dims.proj_dim, dims.proj_dim, rng),
            clf_b: vec![0.0; dims.n_classes],
        }
    }

    /// Deterministic forward pass: attention weights, bag representation,
    /// class probabilities.
    pub fn forward(&self, bag: &InstanceBag) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut scope = Value;
        let mut reg = |_: &mut Value, v: f64| v;
        self.forward_in(&mut scope, &mut reg, bag)
    }

    fn forward_in<S: Scope>(
        &self,
        scope: &mut S,
        reg: &mut impl FnMut(&mut S, f64) -> S::V,
        bag: &InstanceBag,
    ) -> Result<(Vec<S::V>, Vec<S::V>, Vec<S::V>)> {
        let w1 = Mat::from_fn(self.dims.hidden, self.dims.feat_dim, |i, j| {
            reg(scope, self.proj_w1.get(i, j))
        });
        let b1: Vec<S::V> = self.proj_b1.iter().map(|v| reg(scope, *v)).collect();
        let w2 = Mat::from_fn(self.dims.proj_dim, self.dims.hidden, |i, j| {
            reg(scope, self.proj_w2.get(i, j))
        });
        let b2: Vec<S::V> = self.proj_b2.iter().map(|v| reg(scope, *v)).collect();
        let gate = lift_gate(scope, &self.gate, reg);
        let clf_w = Mat::from_fn(self.dims.n_classes, self.dims.proj_dim, |i, j| {
            reg(scope, self.clf_w.get(i, j))
        });
        let clf_b: Vec<S::V> = self.clf_b.iter().map(|v| reg(scope, *v)).collect();

        let projected = project_in(scope, &w1, &b1, &w2, &b2, &bag.features)?;
        let scores = gated_scores_in(scope, &gate, &projected);
        let attn = scope.softmax(&scores);
        let rep: Vec<S::V> = (0..self.dims.proj_dim)
            .map(|d| {
                let mut acc = scope.konst(0.0);
                for k in 0..projected.rows() {
                    let prod = scope.mul(attn[k], projected.get(k, d));
                    acc = scope.add(acc, prod);
                }
                acc
            })
            .collect();
        let logits = affine_row(scope, &clf_w, &clf_b, &rep);
        let probs = scope.softmax(&logits);
        Ok((attn, rep, probs))
    }

    fn loss_in<S: Scope>(
        &self,
        scope: &mut S,
        reg: &mut impl FnMut(&mut S, f64) -> S::V,
        bag: &InstanceBag,
    ) -> Result<S::V> {
        if bag.bag_label >= self.dims.n_classes {
            return Err(Error::LabelOutOfRange {
                label: bag.bag_label,
                n_classes: self.dims.n_classes,
            });
        }
        let (_, _, probs) = self.forward_in(scope, reg, bag)?;
        let lp = scope.ln_clamped(probs[bag.bag_label]);
        Ok(scope.neg(lp))
    }
}

impl BagClassifier for GatedMilModel {
    fn feat_dim(&self) -> usize {
        self.dims.feat_dim
    }

    fn n_classes(&self) -> usize {
        self.dims.n_classes
    }

    fn layout(&self) -> Vec<(ParamBlock, usize)> {
        let d = self.dims;
        vec![
            (ParamBlock::ProjW1, d.hidden * d.feat_dim),
            (ParamBlock::ProjB1, d.hidden),
            (ParamBlock::ProjW2, d.proj_dim * d.hidden),
            (ParamBlock::ProjB2, d.proj_dim),
            (ParamBlock::GateV, d.gate_dim * d.proj_dim),
            (ParamBlock::GateU, d.gate_dim * d.proj_dim),
            (ParamBlock::GateW, d.gate_dim),
            (ParamBlock::ClfW, d.n_classes * d.proj_dim),
            (ParamBlock::ClfB, d.n_classes),
        ]
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend_from_slice(self.proj_w1.data());
        out.extend_from_slice(&self.proj_b1);
        out.extend_from_slice(self.proj_w2.data());
        out.extend_from_slice(&self.proj_b2);
        out.extend_from_slice(self.gate.v.data());
        out.extend_from_slice(self.gate.u.data());
        out.extend_from_slice(&self.gate.w);
        out.extend_from_slice(self.clf_w.data());
        out.extend_from_slice(&self.clf_b);
        out
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "set_params_flat",
                expected: self.n_params(),
                actual: flat.len(),
            });
        }
        let d = self.dims;
        let mut cursor = 0usize;
        let take = |n: usize, cursor: &mut usize| {
            let s = &flat[*cursor..*cursor + n];
            *cursor += n;
            s.to_vec()
        };
        self.proj_w1 = Mat::from_vec(d.hidden, d.feat_dim, take(d.hidden * d.feat_dim, &mut cursor));
        self.proj_b1 = take(d.hidden, &mut cursor);
        self.proj_w2 = Mat::from_vec(d.proj_dim, d.hidden, take(d.proj_dim * d.hidden, &mut cursor));
        self.proj_b2 = take(d.proj_dim, &mut cursor);
        self.gate.v = Mat::from_vec(d.gate_dim, d.proj_dim, take(d.gate_dim * d.proj_dim, &mut cursor));
        self.gate.u = Mat::from_vec(d.gate_dim, d.proj_dim, take(d.gate_dim * d.proj_dim, &mut cursor));
        self.gate.w = take(d.gate_dim, &mut cursor);
        self.clf_w = Mat::from_vec(d.n_classes, d.proj_dim, take(d.n_classes * d.proj_dim, &mut cursor));
        self.clf_b = take(d.n_classes, &mut cursor);
        Ok(())
    }

    fn stochastic(&self) -> bool {
        false
    }

    fn loss_with_noise(&self, bag: &InstanceBag, _noise: &Mat, _kl_scale: f64) -> Result<LossParts> {
        let mut scope = Value;
        let mut reg = |_: &mut Value, v: f64| v;
        let loss = self.loss_in(&mut scope, &mut reg, bag)?;
        Ok(LossParts {
            loss,
            ce: loss,
            kl: 0.0,
            clamped: 0,
        })
    }

    fn loss_grad_with_noise(
        &self,
        bag: &InstanceBag,
        _noise: &Mat,
        _kl_scale: f64,
    ) -> Result<(LossParts, Vec<f64>)> {
        TAPE_BUF.with(|cell| {
            let (tape, adj) = &mut *cell.borrow_mut();
            tape.clear();
            let mut reg = |t: &mut Tape, v: f64| t.leaf(v);
            let loss = self.loss_in(tape, &mut reg, bag)?;
            tape.backward_into(loss, adj);
            let grads = adj[..self.n_params()].to_vec();
            let value = tape.val(loss);
            Ok((
                LossParts {
                    loss: value,
                    ce: value,
                    kl: 0.0,
                    clamped: 0,
                },
                grads,
            ))
        })
    }

    fn predict(
        &self,
        bag: &InstanceBag,
        _n_samples: usize,
        _rng: &mut StreamRng,
    ) -> Result<PredictionRecord> {
        let (attn, _, probs) = self.forward(bag)?;
        let prob_samples = Mat::from_vec(1, self.dims.n_classes, probs);
        Ok(record_from_probs(bag, &prob_samples, attn))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{packed_index, sample_attention_with, variational_marginal};

    fn tiny_dataset(seed: u64) -> Dataset {
        let spec = crate::data::SyntheticSpec::axis_separated(
            8,
            (4, 9),
            6,
            2,
            3.0,
            1.0,
            (0.2, 0.5),
            seed,
        );
        crate::data::generate_synthetic(&spec).unwrap()
    }

    fn tiny_model(seed: u64, normalization: Normalization) -> MilModel {
        let ds = tiny_dataset(seed);
        let dims = ModelDims {
            feat_dim: 6,
            hidden: 5,
            proj_dim: 3,
            n_inducing: 4,
            n_classes: 2,
        };
        let mut rng = StreamRng::new(seed);
        MilModel::init(dims, normalization, true, true, &ds, &mut rng).unwrap()
    }

    #[test]
    fn projection_zero_weights_gives_zeros() {
        let mut model = tiny_model(1, Normalization::Sigmoid);
        model.proj_w1 = Mat::zeros(5, 6);
        model.proj_w2 = Mat::zeros(3, 5);
        let f = Mat::from_fn(4, 6, |i, j| (i + j) as f64);
        let p = project_instances(&f, &model).unwrap();
        assert!(p.data().iter().all(|v| *v == 0.0));
    }

    fn dataset_with_dim(feat_dim: usize, seed: u64) -> Dataset {
        let spec = crate::data::SyntheticSpec::axis_separated(
            8,
            (4, 9),
            feat_dim,
            2,
            3.0,
            1.0,
            (0.2, 0.5),
            seed,
        );
        crate::data::generate_synthetic(&spec).unwrap()
    }

    #[test]
    fn projection_identity_scalar() {
        // 1x1 layers with unit weight and zero bias: tanh(relu(x)).
        let ds = dataset_with_dim(1, 2);
        let dims = ModelDims {
            feat_dim: 1,
            hidden: 1,
            proj_dim: 1,
            n_inducing: 1,
            n_classes: 2,
        };
        let mut rng = StreamRng::new(2);
        let mut model =
            MilModel::init(dims, Normalization::Sigmoid, true, true, &ds, &mut rng).unwrap();
        model.proj_w1 = Mat::from_vec(1, 1, vec![1.0]);
        model.proj_w2 = Mat::from_vec(1, 1, vec![1.0]);
        for x in [-1.3, -0.2, 0.0, 0.4, 2.0] {
            let p = project_instances(&Mat::from_vec(1, 1, vec![x]), &model).unwrap();
            assert_eq!(p.get(0, 0), x.max(0.0).tanh());
        }
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let model = {
            let ds = dataset_with_dim(8, 3);
            let dims = ModelDims {
                feat_dim: 8,
                hidden: 6,
                proj_dim: 3,
                n_inducing: 4,
                n_classes: 2,
            };
            let mut rng = StreamRng::new(3);
            let mut m =
                MilModel::init(dims, Normalization::Sigmoid, true, true, &ds, &mut rng).unwrap();
            // exercise nonzero biases too
            let mut r = StreamRng::new(33);
            m.proj_b1 = (0..6).map(|_| r.range_f64(-0.3, 0.3)).collect();
            m.proj_b2 = (0..3).map(|_| r.range_f64(-0.3, 0.3)).collect();
            m
        };
        let mut rng = StreamRng::new(4);
        let f = Mat::from_fn(5, 8, |_, _| rng.range_f64(-1.5, 1.5));
        let p = project_instances(&f, &model).unwrap();
        for k in 0..5 {
            for d in 0..3 {
                let mut expect = model.proj_b2[d];
                for h in 0..6 {
                    let mut pre = model.proj_b1[h];
                    for j in 0..8 {
                        pre += model.proj_w1.get(h, j) * f.get(k, j);
                    }
                    expect += model.proj_w2.get(d, h) * pre.max(0.0);
                }
                expect = expect.tanh();
                assert!((p.get(k, d) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_output_bounded() {
        let model = tiny_model(5, Normalization::Sigmoid);
        let mut rng = StreamRng::new(6);
        let f = Mat::from_fn(20, 6, |_, _| rng.range_f64(-50.0, 50.0));
        let p = project_instances(&f, &model).unwrap();
        for v in p.data() {
            assert!(*v > -1.0 && *v < 1.0);
        }
    }

    #[test]
    fn aggregate_one_hot_selects_instance() {
        let projected = Mat::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let attn = Mat::from_vec(1, 4, vec![0.0, 0.0, 1.0, 0.0]);
        let reps = aggregate_bag(&projected, &attn).unwrap();
        assert_eq!(reps.row(0), projected.row(2));
    }

    #[test]
    fn aggregate_uniform_is_column_mean() {
        let projected = Mat::from_fn(4, 3, |i, j| (i as f64) * 0.5 + j as f64);
        let attn = Mat::from_vec(1, 4, vec![0.25; 4]);
        let reps = aggregate_bag(&projected, &attn).unwrap();
        for d in 0..3 {
            let mean = (0..4).map(|k| projected.get(k, d)).sum::<f64>() / 4.0;
            assert!((reps.get(0, d) - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn aggregate_matches_double_loop() {
        let mut rng = StreamRng::new(7);
        let projected = Mat::from_fn(4, 2, |_, _| rng.next_normal());
        let attn = Mat::from_fn(3, 4, |_, _| rng.range_f64(0.0, 1.0));
        let reps = aggregate_bag(&projected, &attn).unwrap();
        for s in 0..3 {
            for d in 0..2 {
                let mut expect = 0.0;
                for k in 0..4 {
                    expect += attn.get(s, k) * projected.get(k, d);
                }
                assert!((reps.get(s, d) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn aggregate_rejects_mismatched_k() {
        let projected = Mat::zeros(4, 2);
        let attn = Mat::zeros(1, 5);
        assert!(aggregate_bag(&projected, &attn).is_err());
    }

    #[test]
    fn classify_zero_weights_uniform() {
        let mut model = tiny_model(8, Normalization::Sigmoid);
        model.clf_w = Mat::zeros(2, 3);
        model.clf_b = vec![0.0; 2];
        let reps = Mat::from_fn(3, 3, |_, j| j as f64);
        let probs = classify(&reps, &model).unwrap();
        for v in probs.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_saturates_with_large_margin() {
        let mut model = tiny_model(9, Normalization::Sigmoid);
        model.clf_w = Mat::from_vec(2, 3, vec![10.0, 0.0, 0.0, -10.0, 0.0, 0.0]);
        model.clf_b = vec![0.0; 2];
        let reps = Mat::from_vec(1, 3, vec![1.0, 0.0, 0.0]);
        let probs = classify(&reps, &model).unwrap();
        assert!(probs.get(0, 0) > 0.9999);
        let total: f64 = probs.row(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classify_matches_softmax_oracle() {
        let model = tiny_model(10, Normalization::Sigmoid);
        let mut rng = StreamRng::new(11);
        let reps = Mat::from_fn(4, 3, |_, _| rng.next_normal());
        let probs = classify(&reps, &model).unwrap();
        for s in 0..4 {
            let logits: Vec<f64> = (0..2)
                .map(|c| {
                    model.clf_b[c]
                        + (0..3)
                            .map(|d| model.clf_w.get(c, d) * reps.get(s, d))
                            .sum::<f64>()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for c in 0..2 {
                assert!((probs.get(s, c) - exps[c] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_instance_softmax_attention_is_one() {
        let model = tiny_model(12, Normalization::Softmax);
        let bag = InstanceBag {
            id: "one".into(),
            features: Mat::from_fn(1, 6, |_, j| 0.1 * j as f64),
            bag_label: 0,
            instance_labels: None,
        };
        let mut rng = StreamRng::new(13);
        let fwd = forward_bag(&bag, &model, 5, &mut rng).unwrap();
        for s in 0..5 {
            assert_eq!(fwd.attention_samples.get(s, 0), 1.0);
        }
    }

    #[test]
    fn zero_variance_makes_samples_identical() {
        // One instance exactly at the single inducing point, A = 4, C = 0,
        // collapsed posterior: the marginal variance is exactly zero, so all
        // sample rows coincide bitwise.
        let ds = tiny_dataset(14);
        let dims = ModelDims {
            feat_dim: 6,
            hidden: 5,
            proj_dim: 3,
            n_inducing: 1,
            n_classes: 2,
        };
        let mut rng = StreamRng::new(14);
        let mut model =
            MilModel::init(dims, Normalization::Sigmoid, true, true, &ds, &mut rng).unwrap();
        model.sgp.kernel =
            KernelParams::from_natural(4.0, &[1.0, 1.0, 1.0], 0.0, 1e-6).unwrap();
        model
            .sgp
            .set_cov_factor(&Mat::from_vec(1, 1, vec![1e-300]))
            .unwrap();
        let bag = InstanceBag {
            id: "b".into(),
            features: Mat::from_fn(1, 6, |_, j| 0.3 - 0.1 * j as f64),
            bag_label: 1,
            instance_labels: None,
        };
        let projected = project_instances(&bag.features, &model).unwrap();
        model.sgp.inducing = projected.clone();
        let fwd = forward_bag(&bag, &model, 4, &mut rng).unwrap();
        assert_eq!(fwd.posterior.variance[0], 0.0);
        for s in 1..4 {
            for c in 0..2 {
                assert_eq!(
                    fwd.prob_samples.get(s, c).to_bits(),
                    fwd.prob_samples.get(0, c).to_bits()
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let model = tiny_model(15, Normalization::Sigmoid);
        let bag = tiny_dataset(15).bags[1].clone();
        let a = forward_bag(&bag, &model, 3, &mut StreamRng::new(77)).unwrap();
        let b = forward_bag(&bag, &model, 3, &mut StreamRng::new(77)).unwrap();
        for (x, y) in a.prob_samples.data().iter().zip(b.prob_samples.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_composes_the_pipeline_ops() {
        // forward_bag must equal the composition of the public per-op
        // functions when fed the same noise.
        let model = tiny_model(16, Normalization::Softmax);
        let bag = tiny_dataset(16).bags[3].clone();
        let k = bag.n_instances();
        let mut noise_rng = StreamRng::new(5);
        let noise = Mat::from_fn(2, k, |_, _| noise_rng.next_normal());

        let fwd = forward_bag_with_noise(&bag, &model, &noise).unwrap();

        let projected = project_instances(&bag.features, &model).unwrap();
        let post = variational_marginal(&projected, &model.sgp).unwrap();
        let raw = sample_attention_with(&post, &noise).unwrap();
        let attn = crate::attention::normalize_attention(&raw, Normalization::Softmax).unwrap();
        let reps = aggregate_bag(&projected, &attn).unwrap();
        let probs = classify(&reps, &model).unwrap();

        for (a, b) in fwd.prob_samples.data().iter().zip(probs.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in fwd.attention_samples.data().iter().zip(attn.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_sigmoid_means_in_unit_interval() {
        for (seed, norm) in [(21u64, Normalization::Softmax), (22, Normalization::Sigmoid)] {
            let model = tiny_model(seed, norm);
            for bag in &tiny_dataset(seed).bags {
                let fwd = forward_bag(bag, &model, 6, &mut StreamRng::new(seed)).unwrap();
                match norm {
                    Normalization::Softmax => {
                        for s in 0..6 {
                            let total: f64 = fwd.attention_samples.row(s).iter().sum();
                            assert!((total - 1.0).abs() < 1e-12);
                        }
                    }
                    Normalization::Sigmoid => {
                        for k in 0..bag.n_instances() {
                            let mean: f64 = (0..6)
                                .map(|s| fwd.attention_samples.get(s, k))
                                .sum::<f64>()
                                / 6.0;
                            assert!((0.0..=1.0).contains(&mean));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let model = tiny_model(23, Normalization::Softmax);
        let bag = tiny_dataset(23).bags[1].clone();
        let k = bag.n_instances();
        let mut noise_rng = StreamRng::new(9);
        let noise = Mat::from_fn(3, k, |_, _| noise_rng.next_normal());
        let fwd = forward_bag_with_noise(&bag, &model, &noise).unwrap();

        // rotate instances by 1
        let perm: Vec<usize> = (0..k).map(|i| (i + 1) % k).collect();
        let features_p = Mat::from_fn(k, bag.feat_dim(), |i, j| bag.features.get(perm[i], j));
        let noise_p = Mat::from_fn(3, k, |s, i| noise.get(s, perm[i]));
        let bag_p = InstanceBag {
            id: bag.id.clone(),
            features: features_p,
            bag_label: bag.bag_label,
            instance_labels: None,
        };
        let fwd_p = forward_bag_with_noise(&bag_p, &model, &noise_p).unwrap();

        for s in 0..3 {
            for i in 0..k {
                assert!(
                    (fwd_p.attention_samples.get(s, i) - fwd.attention_samples.get(s, perm[i]))
                        .abs()
                        < 1e-10
                );
            }
            for c in 0..2 {
                assert!((fwd_p.prob_samples.get(s, c) - fwd.prob_samples.get(s, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn duplicated_instance_shares_attention_statistics() {
        let model = tiny_model(24, Normalization::Sigmoid);
        let base = tiny_dataset(24).bags[0].clone();
        let k = base.n_instances();
        // duplicate instance 0 at the end
        let features = Mat::from_fn(k + 1, base.feat_dim(), |i, j| {
            base.features.get(if i == k { 0 } else { i }, j)
        });
        let bag = InstanceBag {
            id: "dup".into(),
            features,
            bag_label: base.bag_label,
            instance_labels: None,
        };
        let projected = project_instances(&bag.features, &model).unwrap();
        let post = variational_marginal(&projected, &model.sgp).unwrap();
        assert!((post.mean[0] - post.mean[k]).abs() < 1e-9);
        assert!((post.variance[0] - post.variance[k]).abs() < 1e-9);

        // with equal noise columns for the two copies, post-activation
        // means match exactly
        let mut rng = StreamRng::new(25);
        let mut noise = Mat::zeros(8, k + 1);
        for s in 0..8 {
            for i in 0..k {
                noise.set(s, i, rng.next_normal());
            }
            noise.set(s, k, noise.get(s, 0));
        }
        let fwd = forward_bag_with_noise(&bag, &model, &noise).unwrap();
        let mean_of = |col: usize| -> f64 {
            (0..8).map(|s| fwd.attention_samples.get(s, col)).sum::<f64>() / 8.0
        };
        assert!((mean_of(0) - mean_of(k)).abs() < 1e-9);
    }

    #[test]
    fn empty_bag_rejected() {
        let model = tiny_model(26, Normalization::Sigmoid);
        let bag = InstanceBag {
            id: "empty".into(),
            features: Mat::zeros(0, 6),
            bag_label: 0,
            instance_labels: None,
        };
        assert!(forward_bag(&bag, &model, 2, &mut StreamRng::new(1)).is_err());
    }

    #[test]
    fn label_out_of_range_rejected() {
        let model = tiny_model(27, Normalization::Sigmoid);
        let mut bag = tiny_dataset(27).bags[0].clone();
        bag.bag_label = 7;
        let noise = Mat::zeros(2, bag.n_instances());
        assert!(matches!(
            model.loss_with_noise(&bag, &noise, 1.0),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn params_flat_roundtrip() {
        let model = tiny_model(28, Normalization::Sigmoid);
        let flat = model.params_flat();
        assert_eq!(flat.len(), model.n_params());
        let mut other = tiny_model(29, Normalization::Sigmoid);
        other.set_params_flat(&flat).unwrap();
        assert_eq!(other.params_flat(), flat);
        // block lookup covers the whole vector
        assert_eq!(model.block_of(0), ParamBlock::ProjW1);
        assert_eq!(model.block_of(flat.len() - 1), ParamBlock::KernOffset);
    }

    #[test]
    fn model_file_roundtrip_preserves_forward() {
        let dir = std::env::temp_dir().join("gpmil-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.gpm");
        let model = tiny_model(30, Normalization::Sigmoid);
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.params_flat(), model.params_flat());
        let bag = tiny_dataset(30).bags[2].clone();
        let a = forward_bag(&bag, &model, 3, &mut StreamRng::new(50)).unwrap();
        let b = forward_bag(&bag, &loaded, 3, &mut StreamRng::new(50)).unwrap();
        for (x, y) in a.prob_samples.data().iter().zip(b.prob_samples.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn gated_single_instance_weight_is_one() {
        let mut rng = StreamRng::new(31);
        let params = GatedAttentionParams {
            v: uniform_mat(4, 3, 3, &mut rng),
            u: uniform_mat(4, 3, 3, &mut rng),
            w: (0..4).map(|_| rng.next_normal()).collect(),
        };
        let f = Mat::from_vec(1, 3, vec![0.2, -0.4, 1.0]);
        let a = gated_attention_baseline(&f, &params).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn gated_identical_instances_uniform() {
        let mut rng = StreamRng::new(32);
        let params = GatedAttentionParams {
            v: uniform_mat(4, 3, 3, &mut rng),
            u: uniform_mat(4, 3, 3, &mut rng),
            w: (0..4).map(|_| rng.next_normal()).collect(),
        };
        let f = Mat::from_fn(5, 3, |_, j| 0.3 * j as f64);
        let a = gated_attention_baseline(&f, &params).unwrap();
        for v in &a {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_matches_formula_oracle() {
        let mut rng = StreamRng::new(34);
        let params = GatedAttentionParams {
            v: uniform_mat(3, 2, 2, &mut rng),
            u: uniform_mat(3, 2, 2, &mut rng),
            w: (0..3).map(|_| rng.next_normal()).collect(),
        };
        let f = Mat::from_fn(4, 2, |_, _| rng.next_normal());
        let a = gated_attention_baseline(&f, &params).unwrap();
        let mut scores = Vec::new();
        for k in 0..4 {
            let mut s = 0.0;
            for g in 0..3 {
                let t: f64 = (0..2).map(|d| params.v.get(g, d) * f.get(k, d)).sum();
                let b: f64 = (0..2).map(|d| params.u.get(g, d) * f.get(k, d)).sum();
                s += params.w[g] * t.tanh() * (1.0 / (1.0 + (-b).exp()));
            }
            scores.push(s);
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        for k in 0..4 {
            assert!((a[k] - exps[k] / total).abs() < 1e-12);
            assert!(a[k] > 0.0);
        }
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gated_model_predicts_deterministically() {
        let dims = GatedDims {
            feat_dim: 6,
            hidden: 5,
            proj_dim: 3,
            gate_dim: 4,
            n_classes: 2,
        };
        let model = GatedMilModel::init(dims, &mut StreamRng::new(35));
        let bag = tiny_dataset(35).bags[0].clone();
        let a = model.predict(&bag, 8, &mut StreamRng::new(1)).unwrap();
        let b = model.predict(&bag, 8, &mut StreamRng::new(2)).unwrap();
        assert_eq!(a.mean_probs, b.mean_probs);
        assert_eq!(a.std_probs, vec![0.0, 0.0]);
        assert_eq!(a.attention_mean.len(), bag.n_instances());
    }

    #[test]
    fn prediction_record_consistency() {
        let model = tiny_model(36, Normalization::Sigmoid);
        let bag = tiny_dataset(36).bags[4].clone();
        let rec = model.predict(&bag, 16, &mut StreamRng::new(3)).unwrap();
        let total: f64 = rec.mean_probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for s in &rec.std_probs {
            assert!(*s >= 0.0);
        }
        let argmax = rec
            .mean_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(rec.predicted, argmax);
    }

    #[test]
    fn cov_factor_packing_is_lower_triangular() {
        let model = tiny_model(37, Normalization::Sigmoid);
        let f = model.sgp.cov_factor();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert_eq!(f.get(i, j), 0.0);
            }
            assert!(f.get(i, i) > 0.0);
        }
        assert_eq!(packed_index(2, 1), 4);
    }
}
