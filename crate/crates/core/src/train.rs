//! ELBO training: per-bag objective, exact gradients with a
//! finite-difference verification harness, AdamW with linear warmup and
//! cosine annealing, and the sequential minibatch loop (one optimizer step
//! per bag).

use crate::data::{Dataset, InstanceBag};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::metrics::{balanced_accuracy, multiclass_auroc, PredictionRecord};
use crate::model::{BagClassifier, LossParts, MilModel, ModelDims};
use crate::attention::Normalization;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

fn default_peak_lr() -> f64 {
    6e-4
}
fn default_epochs() -> usize {
    20
}
fn default_weight_decay() -> f64 {
    1e-2
}
fn default_n_samples() -> usize {
    4
}
fn default_eval_samples() -> usize {
    32
}
fn default_hidden() -> usize {
    256
}
fn default_proj_dim() -> usize {
    64
}
fn default_n_inducing() -> usize {
    16
}
fn default_normalization() -> Normalization {
    Normalization::Sigmoid
}
fn default_true() -> bool {
    true
}
fn default_clip_norm() -> Option<f64> {
    Some(10.0)
}

/// Training hyperparameters plus the model-structure switches that the
/// ablation grid varies (inducing count, normalization, linear mean,
/// diagonal covariance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_peak_lr")]
    pub peak_lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Monte Carlo attention samples per training step.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Monte Carlo samples for validation/test prediction.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_proj_dim")]
    pub proj_dim: usize,
    #[serde(default = "default_n_inducing")]
    pub n_inducing: usize,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    #[serde(default = "default_true")]
    pub use_lm: bool,
    #[serde(default = "default_true")]
    pub diag_only: bool,
    #[serde(default)]
    pub seed: u64,
    /// Per-bag KL multiplier; None resolves to 1 / n_train_bags so the
    /// summed per-step objective over one epoch matches the dataset ELBO.
    #[serde(default)]
    pub kl_scale: Option<f64>,
    /// Global-norm gradient clip; disabled in gradient-check mode.
    #[serde(default = "default_clip_norm")]
    pub clip_norm: Option<f64>,
    /// Diagnostic switch: skip sampling noise so attention collapses to the
    /// posterior mean (deterministic attention-MIL).
    #[serde(default)]
    pub force_zero_variance: bool,
}

impl TrainConfig {
    pub fn quick(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            peak_lr: default_peak_lr(),
            warmup_steps: 0,
            weight_decay: default_weight_decay(),
            n_samples: default_n_samples(),
            eval_samples: default_eval_samples(),
            hidden: default_hidden(),
            proj_dim: default_proj_dim(),
            n_inducing: default_n_inducing(),
            normalization: default_normalization(),
            use_lm: true,
            diag_only: true,
            seed,
            kl_scale: None,
            clip_norm: default_clip_norm(),
            force_zero_variance: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.n_samples == 0 || self.eval_samples == 0 {
            return Err(Error::invalid("sample counts must be positive"));
        }
        if let Some(ks) = self.kl_scale {
            if !(ks > 0.0) {
                return Err(Error::invalid("kl_scale must be positive"));
            }
        }
        if self.hidden == 0 || self.proj_dim == 0 || self.n_inducing == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub bag: String,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub lr: f64,
}

/// Per-epoch summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_kl: f64,
    /// Fraction of marginal variance entries clamped from negative
    /// round-off this epoch.
    pub clamped_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_balanced_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
}

/// Line-oriented history event, tagged for JSONL emission.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HistoryEvent {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Learning rate at a given step: linear ramp to the peak over
/// `warmup_steps`, then cosine annealing to zero at the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let decay_span = total_steps.saturating_sub(cfg.warmup_steps + 1);
    if decay_span == 0 {
        return cfg.peak_lr;
    }
    let t = ((step - cfg.warmup_steps) as f64 / decay_span as f64).clamp(0.0, 1.0);
    (cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

fn draw_noise(bag: &InstanceBag, cfg: &TrainConfig, rng: &mut StreamRng) -> Mat {
    if cfg.force_zero_variance {
        Mat::zeros(cfg.n_samples, bag.n_instances())
    } else {
        Mat::from_fn(cfg.n_samples, bag.n_instances(), |_, _| rng.next_normal())
    }
}

/// Monte Carlo ELBO loss of one bag: the negated average log probability of
/// the true class over the attention samples, plus kl_scale times the
/// inducing-value KL. Noise is drawn from `rng` (N_s rows).
pub fn elbo_loss(
    bag: &InstanceBag,
    model: &MilModel,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<LossParts> {
    let noise = draw_noise(bag, cfg, rng);
    model.loss_with_noise(bag, &noise, cfg.kl_scale.unwrap_or(1.0))
}

/// Exact gradient of [`elbo_loss`] with respect to every trainable
/// parameter, with the sampling noise held fixed. Non-finite entries are
/// reported with their parameter block.
pub fn compute_gradients(
    bag: &InstanceBag,
    model: &MilModel,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<(LossParts, Vec<f64>)> {
    let noise = draw_noise(bag, cfg, rng);
    let (parts, grads) = model.loss_grad_with_noise(bag, &noise, cfg.kl_scale.unwrap_or(1.0))?;
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                block: model.block_of(i).name(),
            });
        }
    }
    Ok((parts, grads))
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(n: usize) -> AdamW {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One decoupled-weight-decay step; `decay_mask[i]` selects the
    /// parameters that receive decay.
    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, wd: f64, decay_mask: &[bool]) {
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / b1c;
            let v_hat = self.v[i] / b2c;
            let mut update = m_hat / (v_hat.sqrt() + self.eps);
            if decay_mask[i] {
                update += wd * params[i];
            }
            params[i] -= lr * update;
        }
    }
}

fn decay_mask<M: BagClassifier>(model: &M) -> Vec<bool> {
    let mut mask = Vec::with_capacity(model.n_params());
    for (block, len) in model.layout() {
        mask.extend(std::iter::repeat_n(block.weight_decayed(), len));
    }
    mask
}

fn clip_global_norm(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
}

/// Predict every bag of a dataset with an independent noise stream per bag
/// (derived from the bag id, so results do not depend on iteration order).
pub fn predict_dataset<M: BagClassifier>(
    model: &M,
    ds: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    ds.bags
        .iter()
        .map(|bag| {
            let mut rng = StreamRng::from_stream(seed, &bag.id);
            model.predict(bag, n_samples, &mut rng)
        })
        .collect()
}

/// Train any [`BagClassifier`] with AdamW, one step per bag, shuffled bag
/// order per epoch. `sink` receives every history event as it happens, so a
/// partial history survives an abort.
pub fn train_model<M: BagClassifier>(
    model: &mut M,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&HistoryEvent),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for bag in &train_set.bags {
        if bag.feat_dim() != model.feat_dim() {
            return Err(Error::DimensionMismatch {
                context: "train: bag feature width",
                expected: model.feat_dim(),
                actual: bag.feat_dim(),
            });
        }
    }
    let n_bags = train_set.len();
    let kl_scale = cfg.kl_scale.unwrap_or(1.0 / n_bags as f64);
    let total_steps = cfg.epochs * n_bags;
    let mut shuffle_rng = StreamRng::from_stream(cfg.seed, "shuffle");
    let mut sample_rng = StreamRng::from_stream(cfg.seed, "sampling");
    let mut opt = AdamW::new(model.n_params());
    let mask = decay_mask(model);
    let mut params = model.params_flat();

    let mut history = TrainHistory::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_bags).collect();
        shuffle_rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut clamped = 0usize;
        let mut entries = 0usize;
        for &bag_idx in &order {
            let bag = &train_set.bags[bag_idx];
            let noise = if model.stochastic() {
                draw_noise(bag, cfg, &mut sample_rng)
            } else {
                Mat::zeros(0, bag.n_instances())
            };
            let (parts, mut grads) = model.loss_grad_with_noise(bag, &noise, kl_scale)?;
            if !parts.loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            for (i, g) in grads.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient {
                        block: model.block_of(i).name(),
                    });
                }
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            let lr = lr_at(step, total_steps, cfg);
            opt.step(&mut params, &grads, lr, cfg.weight_decay, &mask);
            model.set_params_flat(&params)?;

            let rec = StepRecord {
                step,
                epoch,
                bag: bag.id.clone(),
                loss: parts.loss,
                ce: parts.ce,
                kl: parts.kl,
                lr,
            };
            sink(&HistoryEvent::Step(rec.clone()));
            history.steps.push(rec);
            sums.0 += parts.loss;
            sums.1 += parts.ce;
            sums.2 += parts.kl;
            clamped += parts.clamped;
            entries += bag.n_instances();
            step += 1;
        }

        let clamped_fraction = clamped as f64 / entries.max(1) as f64;
        if clamped_fraction > 0.01 {
            eprintln!(
                "warning: epoch {epoch}: {:.2}% of marginal variances clamped at zero",
                100.0 * clamped_fraction
            );
        }
        let (val_balanced_acc, val_auc) = match val_set {
            Some(vs) if !vs.is_empty() => {
                let val_seed = crate::rng::stream_seed(cfg.seed, &format!("val-{epoch}"));
                let records = predict_dataset(model, vs, cfg.eval_samples, val_seed)?;
                let preds: Vec<usize> = records.iter().map(|r| r.predicted).collect();
                let labels: Vec<usize> = records.iter().map(|r| r.true_label).collect();
                let acc = balanced_accuracy(&preds, &labels, vs.n_classes).ok();
                let refs: Vec<&PredictionRecord> = records.iter().collect();
                let auc = multiclass_auroc(&refs, vs.n_classes).ok();
                (acc, auc)
            }
            _ => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            mean_loss: sums.0 / n_bags as f64,
            mean_ce: sums.1 / n_bags as f64,
            mean_kl: sums.2 / n_bags as f64,
            clamped_fraction,
            val_balanced_acc,
            val_auc,
        };
        sink(&HistoryEvent::Epoch(rec.clone()));
        history.epochs.push(rec);
    }
    Ok(history)
}

/// Initialize and train the SGP attention model on a dataset.
pub fn train(
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&HistoryEvent),
) -> Result<(MilModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let dims = ModelDims {
        feat_dim: train_set.feat_dim,
        hidden: cfg.hidden,
        proj_dim: cfg.proj_dim,
        n_inducing: cfg.n_inducing,
        n_classes: train_set.n_classes,
    };
    let mut init_rng = StreamRng::from_stream(cfg.seed, "init");
    let mut model = MilModel::init(
        dims,
        cfg.normalization,
        cfg.use_lm,
        cfg.diag_only,
        train_set,
        &mut init_rng,
    )?;
    let history = train_model(&mut model, train_set, val_set, cfg, sink)?;
    Ok((model, history))
}

/// Finite-difference verification of one parameter block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub n_params: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

/// Full gradient-check report over all parameter blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
    pub passed: bool,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl GradCheckReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&format!(
                "{:<18} n={:<4} max_rel={:<12.3e} max_abs={:<12.3e} {}\n",
                b.block,
                b.n_params,
                b.max_rel_err,
                b.max_abs_err,
                if b.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(if self.passed { "PASS\n" } else { "FAIL\n" });
        out
    }
}

/// Standard gradient-check fixture: a K=6 bag of D=8 features and a small
/// model (h=6, d'=3, m=4, C=3) at a generic, well-conditioned parameter
/// point. Inducing locations are scattered over the projection cube and the
/// variational state is randomized so every term of the objective carries
/// signal; clustered inducing points would push the inducing Gram matrix
/// toward singularity and drown central differences in rounding noise.
pub fn gradcheck_fixture(seed: u64) -> (MilModel, InstanceBag) {
    let mut rng = StreamRng::from_stream(seed, "gradcheck");
    let bag = InstanceBag {
        id: format!("gradcheck-{seed}"),
        features: Mat::from_fn(6, 8, |_, _| rng.next_normal()),
        bag_label: (seed % 3) as usize,
        instance_labels: None,
    };
    let ds = Dataset {
        bags: vec![bag.clone()],
        feat_dim: 8,
        n_classes: 3,
    };
    let dims = ModelDims {
        feat_dim: 8,
        hidden: 6,
        proj_dim: 3,
        n_inducing: 4,
        n_classes: 3,
    };
    let mut model = MilModel::init(
        dims,
        Normalization::Sigmoid,
        true,
        true,
        &ds,
        &mut rng,
    )
    .expect("fixture init");
    for i in 0..dims.n_inducing {
        for j in 0..dims.proj_dim {
            model.sgp.inducing.set(i, j, rng.range_f64(-1.0, 1.0));
        }
    }
    model.sgp.kernel = crate::kernel::KernelParams::from_natural(
        rng.range_f64(0.8, 1.5),
        &[
            rng.range_f64(0.7, 1.4),
            rng.range_f64(0.7, 1.4),
            rng.range_f64(0.7, 1.4),
        ],
        0.05,
        1e-6,
    )
    .expect("fixture kernel");
    for v in model.sgp.var_mean.iter_mut() {
        *v = rng.range_f64(-0.5, 0.5);
    }
    for i in 0..dims.n_inducing {
        for j in 0..i {
            model.sgp.cov_factor_packed[crate::attention::packed_index(i, j)] =
                rng.range_f64(-0.15, 0.15);
        }
    }
    model.sgp.lm_bias = rng.range_f64(-0.3, 0.3);
    (model, bag)
}

/// Compare the reverse-mode gradient of the bag loss against central finite
/// differences (step 1e-5) for every parameter. A coordinate passes when
/// the relative error is below `rel_tol` or the absolute error below
/// `abs_tol`. `tamper` scales the analytic gradient of one block and serves
/// as the negative control for the harness itself.
pub fn gradient_check(
    model: &MilModel,
    bag: &InstanceBag,
    n_samples: usize,
    kl_scale: f64,
    noise_seed: u64,
    rel_tol: f64,
    abs_tol: f64,
    tamper: Option<(crate::model::ParamBlock, f64)>,
) -> Result<GradCheckReport> {
    let mut rng = StreamRng::new(noise_seed);
    let noise = Mat::from_fn(n_samples, bag.n_instances(), |_, _| rng.next_normal());
    let (_, mut grads) = model.loss_grad_with_noise(bag, &noise, kl_scale)?;
    if let Some((block, scale)) = tamper {
        let mut cursor = 0usize;
        for (b, len) in model.layout() {
            if b == block {
                for g in &mut grads[cursor..cursor + len] {
                    *g *= scale;
                }
            }
            cursor += len;
        }
    }

    let base = model.params_flat();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut blocks = Vec::new();
    let mut cursor = 0usize;
    let mut all_passed = true;
    for (block, len) in model.layout() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut passed = true;
        for i in cursor..cursor + len {
            let mut theta = base.clone();
            theta[i] = base[i] + h;
            probe.set_params_flat(&theta)?;
            let hi = probe.loss_with_noise(bag, &noise, kl_scale)?.loss;
            theta[i] = base[i] - h;
            probe.set_params_flat(&theta)?;
            let lo = probe.loss_with_noise(bag, &noise, kl_scale)?.loss;
            let fd = (hi - lo) / (2.0 * h);
            let g = grads[i];
            let abs_err = (g - fd).abs();
            let rel_err = abs_err / g.abs().max(fd.abs()).max(1e-300);
            max_rel = max_rel.max(rel_err);
            max_abs = max_abs.max(abs_err);
            if !(rel_err < rel_tol || abs_err < abs_tol) {
                passed = false;
            }
        }
        all_passed &= passed;
        blocks.push(BlockCheck {
            block: block.name().to_string(),
            n_params: len,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed,
        });
        cursor += len;
    }
    Ok(GradCheckReport {
        blocks,
        passed: all_passed,
        rel_tol,
        abs_tol,
    })
}
