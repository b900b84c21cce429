//! Variational posterior over per-instance attention scores.
//!
//! A GP prior on attention values is summarized by m inducing locations Z
//! with a Gaussian variational distribution q(U) = N(m_U, S) over the
//! function values at Z, where S is kept positive definite through a
//! lower-triangular factor with softplus-positive diagonal. Marginalizing
//! q(U) through the GP conditional gives a closed-form Gaussian over the
//! attention scores of one bag:
//!
//!   mean = mu_X + K_xz Kzz^-1 (m_U - mu_U)
//!   cov  = K_xx - K_xz Kzz^-1 (K_zz - S) Kzz^-1 K_zx
//!
//! with mu_X either a learned linear map of the projected instances or a
//! constant bias. Attention is sampled with the local reparameterization
//! trick (diagonal variance only), then squashed by softmax or sigmoid.

use crate::autodiff::{softplus_inv, Scope, Value};
use crate::error::{Error, Result};
use crate::kernel::{
    cholesky_psd, cholesky_shifted_in, kernel_cross_in, kernel_matrix, kernel_sym_in,
    tri_solve_in, KernelParams, LiftedKernel,
};
use crate::linalg::Mat;
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

/// Post-sampling activation applied across the instances of a bag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Rows sum to one across instances.
    Softmax,
    /// Elementwise logistic; per-instance sample means land in [0, 1].
    Sigmoid,
}

/// Learnable state of the sparse-GP attention head.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgpAttentionState {
    /// Inducing locations, m x d'.
    pub inducing: Mat,
    /// Variational mean m_U.
    pub var_mean: Vec<f64>,
    /// Packed lower triangle (row-major, i >= j) of the covariance factor in
    /// raw form; diagonal entries pass through softplus.
    pub cov_factor_packed: Vec<f64>,
    /// Fixed prior mean mu_U (not trained).
    pub prior_mean: Vec<f64>,
    /// Linear-mean weights W_A (d').
    pub lm_weights: Vec<f64>,
    /// Linear-mean bias b.
    pub lm_bias: f64,
    pub kernel: KernelParams,
    /// When false the marginal mean is the constant bias.
    pub use_lm: bool,
    /// When true only the marginal variance vector is computed.
    pub diag_only: bool,
}

#[inline]
pub(crate) fn packed_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

pub(crate) fn packed_len(m: usize) -> usize {
    m * (m + 1) / 2
}

impl SgpAttentionState {
    /// Fresh state: m_U = 0, covariance factor 0.1 * I, zero prior mean,
    /// fan-in uniform linear-mean weights, default kernel for d'.
    pub fn init(
        inducing: Mat,
        use_lm: bool,
        diag_only: bool,
        rng: &mut StreamRng,
    ) -> SgpAttentionState {
        let m = inducing.rows();
        let d = inducing.cols();
        let mut packed = vec![0.0; packed_len(m)];
        for i in 0..m {
            packed[packed_index(i, i)] = softplus_inv(0.1);
        }
        let bound = 1.0 / (d as f64).sqrt();
        let lm_weights = (0..d).map(|_| rng.range_f64(-bound, bound)).collect();
        SgpAttentionState {
            inducing,
            var_mean: vec![0.0; m],
            cov_factor_packed: packed,
            prior_mean: vec![0.0; m],
            lm_weights,
            lm_bias: 0.0,
            kernel: KernelParams::default_for_dim(d),
            use_lm,
            diag_only,
        }
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn proj_dim(&self) -> usize {
        self.inducing.cols()
    }

    /// Covariance factor F (lower triangular, softplus diagonal) on the
    /// natural scale.
    pub fn cov_factor(&self) -> Mat {
        let m = self.n_inducing();
        let mut f = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..=i {
                let raw = self.cov_factor_packed[packed_index(i, j)];
                f.set(i, j, if i == j { Value.softplus(raw) } else { raw });
            }
        }
        f
    }

    /// Write a natural-scale lower-triangular factor into the raw packing.
    pub fn set_cov_factor(&mut self, f: &Mat) -> Result<()> {
        let m = self.n_inducing();
        if f.rows() != m || f.cols() != m {
            return Err(Error::DimensionMismatch {
                context: "set_cov_factor",
                expected: m,
                actual: f.rows(),
            });
        }
        for i in 0..m {
            for j in 0..=i {
                let v = f.get(i, j);
                if i == j && v <= 0.0 {
                    return Err(Error::invalid("covariance factor diagonal must be positive"));
                }
                self.cov_factor_packed[packed_index(i, j)] = if i == j { softplus_inv(v) } else { v };
            }
        }
        Ok(())
    }

    /// Configure q(U) to equal the prior: m_U = mu_U and S = K_zz (with the
    /// jitter the ladder selects). Used by tests and sanity checks.
    pub fn set_posterior_to_prior(&mut self) -> Result<f64> {
        let kzz = kernel_matrix(&self.inducing, &self.inducing, &self.kernel)?;
        let f = cholesky_psd(&kzz, self.kernel.jitter_base)?;
        self.var_mean = self.prior_mean.clone();
        self.set_cov_factor(&f.l)?;
        Ok(f.lambda)
    }

    pub(crate) fn lift<S: Scope>(&self, scope: &mut S) -> LiftedSgp<S::V> {
        let inducing = Mat::from_fn(self.inducing.rows(), self.inducing.cols(), |i, j| {
            scope.konst(self.inducing.get(i, j))
        });
        let var_mean = self.var_mean.iter().map(|v| scope.konst(*v)).collect();
        let packed_raw: Vec<S::V> = self
            .cov_factor_packed
            .iter()
            .map(|v| scope.konst(*v))
            .collect();
        let lm_weights = self.lm_weights.iter().map(|v| scope.konst(*v)).collect();
        let lm_bias = scope.konst(self.lm_bias);
        let out = scope.konst(self.kernel.raw_outputscale);
        let ls: Vec<S::V> = self
            .kernel
            .raw_lengthscales
            .iter()
            .map(|v| scope.konst(*v))
            .collect();
        let off = scope.konst(self.kernel.raw_offset);
        LiftedSgp::assemble(
            scope,
            inducing,
            var_mean,
            &packed_raw,
            lm_weights,
            lm_bias,
            out,
            &ls,
            off,
            self,
        )
    }
}

/// Scope-typed view of the attention state with constraints applied.
pub(crate) struct LiftedSgp<V> {
    pub inducing: Mat<V>,
    pub var_mean: Vec<V>,
    /// Dense lower-triangular factor with softplus applied to the diagonal.
    pub cov_factor: Mat<V>,
    pub prior_mean: Vec<f64>,
    pub lm_weights: Vec<V>,
    pub lm_bias: V,
    pub kernel: LiftedKernel<V>,
    pub use_lm: bool,
    pub diag_only: bool,
    pub jitter_base: f64,
}

impl<V: Copy + std::fmt::Debug> LiftedSgp<V> {
    /// Build from already-registered scope values for the raw parameters.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble<S: Scope<V = V>>(
        scope: &mut S,
        inducing: Mat<V>,
        var_mean: Vec<V>,
        cov_factor_packed_raw: &[V],
        lm_weights: Vec<V>,
        lm_bias: V,
        raw_outputscale: V,
        raw_lengthscales: &[V],
        raw_offset: V,
        state: &SgpAttentionState,
    ) -> LiftedSgp<V> {
        let m = inducing.rows();
        let zero = scope.konst(0.0);
        let mut factor = Mat::fill(m, m, zero);
        for i in 0..m {
            for j in 0..=i {
                let raw = cov_factor_packed_raw[packed_index(i, j)];
                let v = if i == j { scope.softplus(raw) } else { raw };
                factor.set(i, j, v);
            }
        }
        let kernel =
            KernelParams::lift_from_raw(scope, raw_outputscale, raw_lengthscales, raw_offset);
        LiftedSgp {
            inducing,
            var_mean,
            cov_factor: factor,
            prior_mean: state.prior_mean.clone(),
            lm_weights,
            lm_bias,
            kernel,
            use_lm: state.use_lm,
            diag_only: state.diag_only,
            jitter_base: state.kernel.jitter_base,
        }
    }
}

/// Quantities shared between the marginal and the KL term for one parameter
/// configuration: the factored prior covariance, the variational factor and
/// the solved mean offset.
pub(crate) struct PriorSolve<V> {
    pub chol_zz: Mat<V>,
    pub delta: Vec<V>,
    pub delta_solve: Vec<V>,
}

pub(crate) fn prior_solve_in<S: Scope>(
    scope: &mut S,
    sgp: &LiftedSgp<S::V>,
) -> Result<PriorSolve<S::V>> {
    let m = sgp.inducing.rows();
    let kzz = kernel_sym_in(scope, &sgp.inducing, &sgp.kernel);
    // Pick the jitter on plain values, then factor once in-scope.
    let values = Mat::from_fn(m, m, |i, j| scope.val(kzz.get(i, j)));
    let lambda = cholesky_psd(&values, sgp.jitter_base)?.lambda;
    let chol_zz = cholesky_shifted_in(scope, &kzz, lambda)?;

    let delta: Vec<S::V> = (0..m)
        .map(|i| {
            let mu = scope.konst(sgp.prior_mean[i]);
            scope.sub(sgp.var_mean[i], mu)
        })
        .collect();
    let rhs = Mat::from_vec(m, 1, delta.clone());
    let y = tri_solve_in(scope, &chol_zz, &rhs, false)?;
    let w = tri_solve_in(scope, &chol_zz, &y, true)?;
    let delta_solve = (0..m).map(|i| w.get(i, 0)).collect();
    Ok(PriorSolve {
        chol_zz,
        delta,
        delta_solve,
    })
}

/// Marginal q(A) of one bag plus the intermediates the KL term reuses.
pub(crate) struct MarginalParts<V> {
    pub mean: Vec<V>,
    /// Clamped-at-zero variance vector.
    pub var: Vec<V>,
    pub cov: Option<Mat<V>>,
    pub prior: PriorSolve<V>,
    /// Count of variance entries clamped from negative round-off.
    pub clamped: usize,
}

pub(crate) fn marginal_in<S: Scope>(
    scope: &mut S,
    h_proj: &Mat<S::V>,
    sgp: &LiftedSgp<S::V>,
) -> Result<MarginalParts<S::V>> {
    let d = sgp.inducing.cols();
    if h_proj.cols() != d {
        return Err(Error::DimensionMismatch {
            context: "variational_marginal: projected dim",
            expected: d,
            actual: h_proj.cols(),
        });
    }
    let k_inst = h_proj.rows();
    let m = sgp.inducing.rows();
    let prior = prior_solve_in(scope, sgp)?;

    // mu_X
    let mu_x: Vec<S::V> = (0..k_inst)
        .map(|k| {
            if sgp.use_lm {
                let lin = scope.dot(&sgp.lm_weights, h_proj.row(k));
                scope.add(lin, sgp.lm_bias)
            } else {
                sgp.lm_bias
            }
        })
        .collect();

    let kxz = kernel_cross_in(scope, h_proj, &sgp.inducing, &sgp.kernel);
    let mean: Vec<S::V> = (0..k_inst)
        .map(|k| {
            let shift = scope.dot(kxz.row(k), &prior.delta_solve);
            scope.add(mu_x[k], shift)
        })
        .collect();

    // A_sol = L^-1 K_zx, C_sol = L^-T A_sol, P = F^T C_sol
    let kzx = kxz.transpose();
    let a_sol = tri_solve_in(scope, &prior.chol_zz, &kzx, false)?;
    let c_sol = tri_solve_in(scope, &prior.chol_zz, &a_sol, true)?;
    let zero = scope.konst(0.0);
    let mut p = Mat::fill(m, k_inst, zero);
    for i in 0..m {
        for k in 0..k_inst {
            // F^T row i = column i of the lower-triangular F: rows j >= i.
            let mut acc = zero;
            for j in i..m {
                let prod = scope.mul(sgp.cov_factor.get(j, i), c_sol.get(j, k));
                acc = scope.add(acc, prod);
            }
            p.set(i, k, acc);
        }
    }

    let prior_diag = scope.add(sgp.kernel.outputscale, sgp.kernel.offset);
    let mut clamped = 0usize;
    let mut var = Vec::with_capacity(k_inst);
    let mut cov = None;

    if sgp.diag_only {
        for k in 0..k_inst {
            let mut v = prior_diag;
            for j in 0..m {
                let a = a_sol.get(j, k);
                let a2 = scope.square(a);
                v = scope.sub(v, a2);
                let q = p.get(j, k);
                let q2 = scope.square(q);
                v = scope.add(v, q2);
            }
            if scope.val(v) < 0.0 {
                clamped += 1;
            }
            var.push(scope.clamp_min_zero(v));
        }
    } else {
        let kxx = kernel_sym_in(scope, h_proj, &sgp.kernel);
        let mut full = Mat::fill(k_inst, k_inst, zero);
        for r in 0..k_inst {
            for c in r..k_inst {
                let mut v = kxx.get(r, c);
                for j in 0..m {
                    let aa = scope.mul(a_sol.get(j, r), a_sol.get(j, c));
                    v = scope.sub(v, aa);
                    let pp = scope.mul(p.get(j, r), p.get(j, c));
                    v = scope.add(v, pp);
                }
                full.set(r, c, v);
                full.set(c, r, v);
            }
        }
        for k in 0..k_inst {
            let v = full.get(k, k);
            if scope.val(v) < 0.0 {
                clamped += 1;
            }
            var.push(scope.clamp_min_zero(v));
        }
        cov = Some(full);
    }

    Ok(MarginalParts {
        mean,
        var,
        cov,
        prior,
        clamped,
    })
}

/// KL( q(U) || p(U) ) from the shared factorizations:
/// 1/2 [ tr(Kzz^-1 S) + delta^T Kzz^-1 delta - m + ln det Kzz - ln det S ].
pub(crate) fn kl_in<S: Scope>(
    scope: &mut S,
    sgp: &LiftedSgp<S::V>,
    prior: &PriorSolve<S::V>,
) -> Result<S::V> {
    let m = sgp.inducing.rows();
    let l = &prior.chol_zz;
    let mut acc = scope.konst(-(m as f64));
    // tr(Kzz^-1 S) = ||L^-1 F||_F^2; both factors are lower triangular, so
    // column j of the solution is supported on rows j.. only. Entries of
    // `col` are always written before they are read within a column pass.
    let zero = scope.konst(0.0);
    let mut col = vec![zero; m];
    for j in 0..m {
        for i in j..m {
            let mut v = sgp.cov_factor.get(i, j);
            for t in j..i {
                let prod = scope.mul(l.get(i, t), col[t]);
                v = scope.sub(v, prod);
            }
            v = scope.div(v, l.get(i, i));
            col[i] = v;
            let sq = scope.square(v);
            acc = scope.add(acc, sq);
        }
    }
    let quad = scope.dot(&prior.delta, &prior.delta_solve);
    acc = scope.add(acc, quad);
    for i in 0..m {
        let ld_p = scope.ln(prior.chol_zz.get(i, i));
        let ld_q = scope.ln(sgp.cov_factor.get(i, i));
        let diff = scope.sub(ld_p, ld_q);
        let two = scope.konst(2.0);
        let contrib = scope.mul(two, diff);
        acc = scope.add(acc, contrib);
    }
    let half = scope.konst(0.5);
    Ok(scope.mul(half, acc))
}

/// Closed-form Gaussian over one bag's attention scores.
#[derive(Debug, Clone)]
pub struct AttentionPosterior {
    pub mean: Vec<f64>,
    /// Marginal variances, clamped at zero.
    pub variance: Vec<f64>,
    /// Full covariance when the state was not diagonal-only.
    pub cov: Option<Mat>,
    /// Entries clamped from negative round-off.
    pub clamped: usize,
}

impl AttentionPosterior {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn diag_only(&self) -> bool {
        self.cov.is_none()
    }
}

/// Exact marginal q(A) for the projected instances of one bag.
pub fn variational_marginal(h_proj: &Mat, state: &SgpAttentionState) -> Result<AttentionPosterior> {
    let mut scope = Value;
    let lifted = state.lift(&mut scope);
    let parts = marginal_in(&mut scope, h_proj, &lifted)?;
    Ok(AttentionPosterior {
        mean: parts.mean,
        variance: parts.var,
        cov: parts.cov,
        clamped: parts.clamped,
    })
}

/// KL between the inducing-value posterior and its GP prior.
pub fn kl_inducing(state: &SgpAttentionState) -> Result<f64> {
    let mut scope = Value;
    let lifted = state.lift(&mut scope);
    let prior = prior_solve_in(&mut scope, &lifted)?;
    kl_in(&mut scope, &lifted, &prior)
}

/// Draw attention samples A[s] = mean + sqrt(var) .* eps[s] for explicit
/// standard-normal noise (one row per sample). Only the diagonal variance
/// enters, also when a full covariance is available.
pub fn sample_attention_with(post: &AttentionPosterior, noise: &Mat) -> Result<Mat> {
    if noise.cols() != post.len() {
        return Err(Error::DimensionMismatch {
            context: "sample_attention: noise width",
            expected: post.len(),
            actual: noise.cols(),
        });
    }
    let sd: Vec<f64> = post.variance.iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(Mat::from_fn(noise.rows(), post.len(), |s, k| {
        post.mean[k] + sd[k] * noise.get(s, k)
    }))
}

/// Draw `n_samples` attention samples using the local reparameterization
/// trick with noise from `rng`.
pub fn sample_attention(
    post: &AttentionPosterior,
    n_samples: usize,
    rng: &mut StreamRng,
) -> Result<Mat> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    let noise = Mat::from_fn(n_samples, post.len(), |_, _| rng.next_normal());
    sample_attention_with(post, &noise)
}

pub(crate) fn normalize_in<S: Scope>(
    scope: &mut S,
    raw: &Mat<S::V>,
    mode: Normalization,
) -> Mat<S::V> {
    match mode {
        Normalization::Softmax => {
            let mut out = Vec::with_capacity(raw.rows() * raw.cols());
            for s in 0..raw.rows() {
                out.extend(scope.softmax(raw.row(s)));
            }
            Mat::from_vec(raw.rows(), raw.cols(), out)
        }
        Normalization::Sigmoid => Mat::from_fn(raw.rows(), raw.cols(), |s, k| {
            scope.sigmoid(raw.get(s, k))
        }),
    }
}

/// Activate raw attention samples: per-row max-subtracted softmax, or
/// elementwise logistic.
pub fn normalize_attention(raw: &Mat, mode: Normalization) -> Result<Mat> {
    if !raw.is_finite() {
        return Err(Error::invalid("normalize_attention: non-finite input"));
    }
    Ok(normalize_in(&mut Value, raw, mode))
}
