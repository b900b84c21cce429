//! Scaled RBF kernel and the positive-definite linear algebra under it.
//!
//! The kernel is k(x, y) = A * exp(-sum_l (x_l - y_l)^2 / theta_l) + C with
//! one lengthscale per dimension. A, theta and C are stored as unconstrained
//! raw values mapped through softplus, so optimizer steps cannot leave the
//! feasible region. Factorizations go through a jitter ladder: the smallest
//! shift in {0, base, 10*base, .., 1e5*base} that makes the Cholesky succeed
//! is used and reported.

use crate::autodiff::{softplus_inv, Scope, Value};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use serde::{Deserialize, Serialize};

/// Number of powers of ten the jitter ladder climbs past the base.
const JITTER_STEPS: u32 = 5;

/// RBF kernel hyperparameters in raw (unconstrained) form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelParams {
    pub raw_outputscale: f64,
    pub raw_lengthscales: Vec<f64>,
    pub raw_offset: f64,
    pub jitter_base: f64,
}

impl KernelParams {
    /// Build from natural-scale values. outputscale and lengthscales must be
    /// positive; offset may be zero.
    pub fn from_natural(
        outputscale: f64,
        lengthscales: &[f64],
        offset: f64,
        jitter_base: f64,
    ) -> Result<Self> {
        if outputscale <= 0.0 || !outputscale.is_finite() {
            return Err(Error::invalid("outputscale must be positive"));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| *l <= 0.0 || !l.is_finite()) {
            return Err(Error::invalid("lengthscales must be positive"));
        }
        if offset < 0.0 || !offset.is_finite() {
            return Err(Error::invalid("offset must be non-negative"));
        }
        if jitter_base <= 0.0 {
            return Err(Error::invalid("jitter_base must be positive"));
        }
        Ok(KernelParams {
            raw_outputscale: softplus_inv(outputscale),
            raw_lengthscales: lengthscales.iter().map(|l| softplus_inv(*l)).collect(),
            raw_offset: softplus_inv(offset),
            jitter_base,
        })
    }

    /// Default initialization for a given input dimension: A = 1,
    /// theta_l = sqrt(dim), C = 0.01.
    pub fn default_for_dim(dim: usize) -> Self {
        KernelParams::from_natural(1.0, &vec![(dim as f64).sqrt(); dim], 0.01, 1e-6)
            .expect("default kernel parameters are valid")
    }

    pub fn dim(&self) -> usize {
        self.raw_lengthscales.len()
    }

    pub fn outputscale(&self) -> f64 {
        Value.softplus(self.raw_outputscale)
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.raw_lengthscales
            .iter()
            .map(|r| Value.softplus(*r))
            .collect()
    }

    pub fn offset(&self) -> f64 {
        Value.softplus(self.raw_offset)
    }

    pub(crate) fn lift_from_raw<S: Scope>(
        scope: &mut S,
        raw_outputscale: S::V,
        raw_lengthscales: &[S::V],
        raw_offset: S::V,
    ) -> LiftedKernel<S::V> {
        LiftedKernel {
            outputscale: scope.softplus(raw_outputscale),
            lengthscales: raw_lengthscales.iter().map(|r| scope.softplus(*r)).collect(),
            offset: scope.softplus(raw_offset),
        }
    }

    pub(crate) fn lift<S: Scope>(&self, scope: &mut S) -> LiftedKernel<S::V>
    where
        S: Scope,
    {
        let out = scope.konst(self.raw_outputscale);
        let ls: Vec<S::V> = self
            .raw_lengthscales
            .iter()
            .map(|r| scope.konst(*r))
            .collect();
        let off = scope.konst(self.raw_offset);
        Self::lift_from_raw(scope, out, &ls, off)
    }
}

/// Kernel hyperparameters after the softplus map, in scope values.
#[derive(Debug, Clone)]
pub struct LiftedKernel<V> {
    pub outputscale: V,
    pub lengthscales: Vec<V>,
    pub offset: V,
}

pub(crate) fn kernel_eval_in<S: Scope>(
    scope: &mut S,
    x: &[S::V],
    y: &[S::V],
    k: &LiftedKernel<S::V>,
) -> S::V {
    debug_assert_eq!(x.len(), k.lengthscales.len());
    debug_assert_eq!(y.len(), k.lengthscales.len());
    let mut q = scope.konst(0.0);
    for l in 0..x.len() {
        let d = scope.sub(x[l], y[l]);
        let d2 = scope.square(d);
        let term = scope.div(d2, k.lengthscales[l]);
        q = scope.add(q, term);
    }
    let nq = scope.neg(q);
    let e = scope.exp(nq);
    let scaled = scope.mul(k.outputscale, e);
    scope.add(scaled, k.offset)
}

pub(crate) fn kernel_cross_in<S: Scope>(
    scope: &mut S,
    xa: &Mat<S::V>,
    xb: &Mat<S::V>,
    k: &LiftedKernel<S::V>,
) -> Mat<S::V> {
    let mut data = Vec::with_capacity(xa.rows() * xb.rows());
    for i in 0..xa.rows() {
        for j in 0..xb.rows() {
            data.push(kernel_eval_in(scope, xa.row(i), xb.row(j), k));
        }
    }
    Mat::from_vec(xa.rows(), xb.rows(), data)
}

/// Symmetric Gram matrix of one point set. Off-diagonal entries are computed
/// once and mirrored; the diagonal is A + C directly.
pub(crate) fn kernel_sym_in<S: Scope>(
    scope: &mut S,
    x: &Mat<S::V>,
    k: &LiftedKernel<S::V>,
) -> Mat<S::V> {
    let n = x.rows();
    let diag = scope.add(k.outputscale, k.offset);
    let mut out = Mat::fill(n, n, diag);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = kernel_eval_in(scope, x.row(i), x.row(j), k);
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Cholesky of m + shift*I. Fails if any pivot is non-positive or non-finite.
pub(crate) fn cholesky_shifted_in<S: Scope>(
    scope: &mut S,
    m: &Mat<S::V>,
    shift: f64,
) -> Result<Mat<S::V>> {
    let n = m.rows();
    let zero = scope.konst(0.0);
    let shift_v = scope.konst(shift);
    let mut l = Mat::fill(n, n, zero);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = m.get(i, j);
            if i == j && shift != 0.0 {
                acc = scope.add(acc, shift_v);
            }
            for p in 0..j {
                let prod = scope.mul(l.get(i, p), l.get(j, p));
                acc = scope.sub(acc, prod);
            }
            if i == j {
                let pivot = scope.val(acc);
                if !(pivot.is_finite() && pivot > 0.0) {
                    return Err(Error::NotPositiveDefinite { attempted: vec![shift] });
                }
                let r = scope.sqrt(acc);
                l.set(i, j, r);
            } else {
                let r = scope.div(acc, l.get(j, j));
                l.set(i, j, r);
            }
        }
    }
    Ok(l)
}

/// Triangular solve L X = B, or L^T X = B when `transpose` is set.
pub(crate) fn tri_solve_in<S: Scope>(
    scope: &mut S,
    l: &Mat<S::V>,
    b: &Mat<S::V>,
    transpose: bool,
) -> Result<Mat<S::V>> {
    let n = l.rows();
    if l.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "tri_solve: L must be square",
            expected: n,
            actual: l.cols(),
        });
    }
    if b.rows() != n {
        return Err(Error::DimensionMismatch {
            context: "tri_solve: rhs rows",
            expected: n,
            actual: b.rows(),
        });
    }
    for i in 0..n {
        if scope.val(l.get(i, i)) == 0.0 {
            return Err(Error::SingularMatrix { index: i });
        }
    }
    let k = b.cols();
    let zero = scope.konst(0.0);
    let mut x = Mat::fill(n, k, zero);
    if !transpose {
        for i in 0..n {
            for c in 0..k {
                let mut acc = b.get(i, c);
                for j in 0..i {
                    let prod = scope.mul(l.get(i, j), x.get(j, c));
                    acc = scope.sub(acc, prod);
                }
                let v = scope.div(acc, l.get(i, i));
                x.set(i, c, v);
            }
        }
    } else {
        for i in (0..n).rev() {
            for c in 0..k {
                let mut acc = b.get(i, c);
                for j in (i + 1)..n {
                    let prod = scope.mul(l.get(j, i), x.get(j, c));
                    acc = scope.sub(acc, prod);
                }
                let v = scope.div(acc, l.get(i, i));
                x.set(i, c, v);
            }
        }
    }
    Ok(x)
}

/// Single kernel evaluation on natural-scale inputs.
pub fn kernel_eval(x: &[f64], y: &[f64], params: &KernelParams) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            context: "kernel_eval: x",
            expected: params.dim(),
            actual: x.len(),
        });
    }
    if y.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            context: "kernel_eval: y",
            expected: params.dim(),
            actual: y.len(),
        });
    }
    let mut scope = Value;
    let k = params.lift(&mut scope);
    Ok(kernel_eval_in(&mut scope, x, y, &k))
}

/// Cross-kernel matrix; entry (i, j) = k(xa_i, xb_j).
pub fn kernel_matrix(xa: &Mat, xb: &Mat, params: &KernelParams) -> Result<Mat> {
    if xa.cols() != params.dim() {
        return Err(Error::DimensionMismatch {
            context: "kernel_matrix: xa cols",
            expected: params.dim(),
            actual: xa.cols(),
        });
    }
    if xb.cols() != params.dim() {
        return Err(Error::DimensionMismatch {
            context: "kernel_matrix: xb cols",
            expected: params.dim(),
            actual: xb.cols(),
        });
    }
    let mut scope = Value;
    let k = params.lift(&mut scope);
    Ok(kernel_cross_in(&mut scope, xa, xb, &k))
}

/// Cholesky factor of a PSD matrix plus the jitter that made it factor.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub l: Mat,
    pub lambda: f64,
}

/// The jitter ladder tried for a given base: {0, base, 10*base, ...}.
pub(crate) fn jitter_ladder(jitter_base: f64) -> Vec<f64> {
    let mut shifts = vec![0.0];
    for p in 0..=JITTER_STEPS {
        shifts.push(jitter_base * 10f64.powi(p as i32));
    }
    shifts
}

/// Factor M + lambda*I with the smallest ladder shift that succeeds.
pub fn cholesky_psd(m: &Mat, jitter_base: f64) -> Result<CholeskyFactor> {
    if m.rows() != m.cols() {
        return Err(Error::DimensionMismatch {
            context: "cholesky_psd: square matrix",
            expected: m.rows(),
            actual: m.cols(),
        });
    }
    let scale = m.max_abs().max(1.0);
    for i in 0..m.rows() {
        for j in 0..i {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-8 * scale {
                return Err(Error::invalid(format!(
                    "cholesky_psd: matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut attempted = Vec::new();
    for shift in jitter_ladder(jitter_base) {
        attempted.push(shift);
        if let Ok(l) = cholesky_shifted_in(&mut Value, m, shift) {
            return Ok(CholeskyFactor { l, lambda: shift });
        }
    }
    Err(Error::NotPositiveDefinite { attempted })
}

/// Solve L X = B (or L^T X = B) for a nonsingular lower-triangular L.
pub fn tri_solve(l: &Mat, b: &Mat, transpose: bool) -> Result<Mat> {
    tri_solve_in(&mut Value, l, b, transpose)
}
