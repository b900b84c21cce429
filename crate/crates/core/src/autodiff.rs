//! Minimal reverse-mode automatic differentiation.
//!
//! Every numeric routine in the training path is written once, generic over
//! a [`Scope`]. Instantiated with [`Value`] it evaluates in plain f64;
//! instantiated with [`Tape`] it records a computation graph whose exact
//! gradient is recovered by a single reverse sweep. Local partials are
//! computed eagerly at forward time, so a node is just a value, two parent
//! indices and two cached partial derivatives.

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

#[derive(Debug, Clone, Copy)]
struct Node {
    value: f64,
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Numeric context the forward passes are written against.
pub trait Scope {
    type V: Copy + std::fmt::Debug;

    fn konst(&mut self, x: f64) -> Self::V;
    /// Read the numeric value behind a handle (used for data-dependent
    /// control flow: pivot checks, max selection, clamp counting).
    fn val(&self, v: Self::V) -> f64;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn neg(&mut self, a: Self::V) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;
    /// Natural log; caller guarantees a positive argument.
    fn ln(&mut self, a: Self::V) -> Self::V;
    /// Natural log clamped below at -30; the partial is zero on the clamped
    /// branch so degenerate probabilities cannot poison the gradient.
    fn ln_clamped(&mut self, a: Self::V) -> Self::V;
    /// Square root with a zero partial at zero (round-off clamped variances).
    fn sqrt(&mut self, a: Self::V) -> Self::V;
    fn tanh(&mut self, a: Self::V) -> Self::V;
    fn relu(&mut self, a: Self::V) -> Self::V;
    fn sigmoid(&mut self, a: Self::V) -> Self::V;
    /// Numerically stable ln(1 + e^x); derivative is the logistic function.
    fn softplus(&mut self, a: Self::V) -> Self::V;
    /// max(x, 0) with zero partial on the clamped branch.
    fn clamp_min_zero(&mut self, a: Self::V) -> Self::V;

    fn add_scaled(&mut self, a: Self::V, b: Self::V, c: f64) -> Self::V {
        let s = self.konst(c);
        let sb = self.mul(s, b);
        self.add(a, sb)
    }

    fn dot(&mut self, a: &[Self::V], b: &[Self::V]) -> Self::V {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = self.konst(0.0);
        for (x, y) in a.iter().zip(b) {
            let p = self.mul(*x, *y);
            acc = self.add(acc, p);
        }
        acc
    }

    fn sum(&mut self, xs: &[Self::V]) -> Self::V {
        let mut acc = self.konst(0.0);
        for x in xs {
            acc = self.add(acc, *x);
        }
        acc
    }

    fn square(&mut self, a: Self::V) -> Self::V {
        self.mul(a, a)
    }

    /// Max-subtracted softmax over a slice.
    fn softmax(&mut self, xs: &[Self::V]) -> Vec<Self::V> {
        // Shift by the max entry; softmax is invariant to the shift and the
        // exponentials stay bounded.
        let mut arg = 0;
        for (i, x) in xs.iter().enumerate() {
            if self.val(*x) > self.val(xs[arg]) {
                arg = i;
            }
        }
        let m = xs[arg];
        let exps: Vec<Self::V> = xs
            .iter()
            .map(|x| {
                let d = self.sub(*x, m);
                self.exp(d)
            })
            .collect();
        let total = self.sum(&exps);
        exps.into_iter().map(|e| self.div(e, total)).collect()
    }
}

/// Plain f64 evaluation scope.
#[derive(Debug, Default, Clone, Copy)]
pub struct Value;

const LN_FLOOR: f64 = -30.0;

#[inline]
fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus on the positive axis: softplus(softplus_inv(y)) == y
/// up to round-off. Values at or below zero map to a raw value deep enough
/// that softplus underflows to exactly 0.0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else if y <= 0.0 {
        -760.0
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Scope for Value {
    type V = f64;

    #[inline]
    fn konst(&mut self, x: f64) -> f64 {
        x
    }
    #[inline]
    fn val(&self, v: f64) -> f64 {
        v
    }
    #[inline]
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    #[inline]
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    #[inline]
    fn neg(&mut self, a: f64) -> f64 {
        -a
    }
    #[inline]
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    #[inline]
    fn ln(&mut self, a: f64) -> f64 {
        a.ln()
    }
    #[inline]
    fn ln_clamped(&mut self, a: f64) -> f64 {
        a.ln().max(LN_FLOOR)
    }
    #[inline]
    fn sqrt(&mut self, a: f64) -> f64 {
        a.max(0.0).sqrt()
    }
    #[inline]
    fn tanh(&mut self, a: f64) -> f64 {
        a.tanh()
    }
    #[inline]
    fn relu(&mut self, a: f64) -> f64 {
        a.max(0.0)
    }
    #[inline]
    fn sigmoid(&mut self, a: f64) -> f64 {
        sigmoid_f64(a)
    }
    #[inline]
    fn softplus(&mut self, a: f64) -> f64 {
        softplus_f64(a)
    }
    #[inline]
    fn clamp_min_zero(&mut self, a: f64) -> f64 {
        a.max(0.0)
    }
}

/// Recording tape. Leaves (parameters, constants, inputs) have zero
/// partials; the backward sweep skips zero partials, which also guards
/// clamped branches against inf * 0 contamination.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable leaf. Leaves pushed first (parameters)
    /// occupy ids 0..P, which is how gradients are read out.
    pub fn leaf(&mut self, value: f64) -> NodeId {
        self.push(value, [0, 0], [0.0, 0.0])
    }

    #[inline]
    fn push(&mut self, value: f64, parents: [u32; 2], partials: [f64; 2]) -> NodeId {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            parents,
            partials,
        });
        NodeId(id)
    }

    #[inline]
    fn unary(&mut self, p: NodeId, value: f64, d: f64) -> NodeId {
        self.push(value, [p.0, 0], [d, 0.0])
    }

    #[inline]
    fn binary(&mut self, a: NodeId, b: NodeId, value: f64, da: f64, db: f64) -> NodeId {
        self.push(value, [a.0, b.0], [da, db])
    }

    /// Reverse sweep from `root`; returns the adjoint of every node.
    pub fn backward(&self, root: NodeId) -> Vec<f64> {
        let mut adj = Vec::new();
        self.backward_into(root, &mut adj);
        adj
    }

    /// Reverse sweep reusing the caller's adjoint buffer.
    pub fn backward_into(&self, root: NodeId, adj: &mut Vec<f64>) {
        adj.clear();
        adj.resize(self.nodes.len(), 0.0);
        adj[root.0 as usize] = 1.0;
        for i in (0..=root.0 as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            let n = &self.nodes[i];
            if n.partials[0] != 0.0 {
                adj[n.parents[0] as usize] += n.partials[0] * g;
            }
            if n.partials[1] != 0.0 {
                adj[n.parents[1] as usize] += n.partials[1] * g;
            }
        }
    }
}

impl Scope for Tape {
    type V = NodeId;

    fn konst(&mut self, x: f64) -> NodeId {
        self.push(x, [0, 0], [0.0, 0.0])
    }

    #[inline]
    fn val(&self, v: NodeId) -> f64 {
        self.nodes[v.0 as usize].value
    }

    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) + self.val(b);
        self.binary(a, b, v, 1.0, 1.0)
    }

    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.val(a) - self.val(b);
        self.binary(a, b, v, 1.0, -1.0)
    }

    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.val(a), self.val(b));
        self.binary(a, b, x * y, y, x)
    }

    fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.val(a), self.val(b));
        let v = x / y;
        self.binary(a, b, v, 1.0 / y, -v / y)
    }

    fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.val(a);
        self.unary(a, v, -1.0)
    }

    fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).exp();
        self.unary(a, v, v)
    }

    fn ln(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        self.unary(a, x.ln(), 1.0 / x)
    }

    fn ln_clamped(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        let l = x.ln();
        if l <= LN_FLOOR {
            self.unary(a, LN_FLOOR, 0.0)
        } else {
            self.unary(a, l, 1.0 / x)
        }
    }

    fn sqrt(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        if x > 0.0 {
            let v = x.sqrt();
            self.unary(a, v, 0.5 / v)
        } else {
            self.unary(a, 0.0, 0.0)
        }
    }

    fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).tanh();
        self.unary(a, v, 1.0 - v * v)
    }

    fn relu(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        if x > 0.0 {
            self.unary(a, x, 1.0)
        } else {
            self.unary(a, 0.0, 0.0)
        }
    }

    fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = sigmoid_f64(self.val(a));
        self.unary(a, v, v * (1.0 - v))
    }

    fn softplus(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        self.unary(a, softplus_f64(x), sigmoid_f64(x))
    }

    fn clamp_min_zero(&mut self, a: NodeId) -> NodeId {
        let x = self.val(a);
        if x > 0.0 {
            self.unary(a, x, 1.0)
        } else {
            self.unary(a, 0.0, 0.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&mut Value, &[f64]) -> f64, builder: impl Fn(&mut Tape, &[NodeId]) -> NodeId, x0: &[f64]) {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = x0.iter().map(|v| tape.leaf(*v)).collect();
        let root = builder(&mut tape, &leaves);
        let adj = tape.backward(root);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut hi = x0.to_vec();
            let mut lo = x0.to_vec();
            hi[i] += h;
            lo[i] -= h;
            let mut s = Value;
            let fd = (f(&mut s, &hi) - f(&mut s, &lo)) / (2.0 * h);
            let g = adj[leaves[i].0 as usize];
            assert!(
                (g - fd).abs() < 1e-6 * (1.0 + fd.abs()),
                "param {i}: tape {g} vs fd {fd}"
            );
        }
    }

    fn poly<S: Scope>(s: &mut S, x: &[S::V]) -> S::V {
        // f = exp(a*b) + tanh(a) / softplus(b) + sigmoid(a - b) * sqrt(b^2)
        let ab = s.mul(x[0], x[1]);
        let e = s.exp(ab);
        let t = s.tanh(x[0]);
        let sp = s.softplus(x[1]);
        let frac = s.div(t, sp);
        let d = s.sub(x[0], x[1]);
        let sg = s.sigmoid(d);
        let b2 = s.square(x[1]);
        let rb = s.sqrt(b2);
        let prod = s.mul(sg, rb);
        let sum = s.add(e, frac);
        s.add(sum, prod)
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(
            |s, v| {
                let xs: Vec<f64> = v.to_vec();
                poly(s, &xs)
            },
            |t, leaves| poly(t, leaves),
            &[0.37, 1.21],
        );
    }

    #[test]
    fn softmax_rows_sum_to_one_and_differentiate() {
        let mut tape = Tape::new();
        let xs: Vec<NodeId> = [0.3, -1.2, 2.0].iter().map(|v| tape.leaf(*v)).collect();
        let sm = tape.softmax(&xs);
        let total: f64 = sm.iter().map(|v| tape.val(*v)).sum();
        assert!((total - 1.0).abs() < 1e-12);

        // d softmax_0 / d x matches finite differences
        let adj = tape.backward(sm[0]);
        let h = 1e-6;
        for i in 0..3 {
            let f = |x: &[f64]| {
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
                e[0] / e.iter().sum::<f64>()
            };
            let mut hi = [0.3, -1.2, 2.0];
            let mut lo = hi;
            hi[i] += h;
            lo[i] -= h;
            let fd = (f(&hi) - f(&lo)) / (2.0 * h);
            let g = adj[xs[i].0 as usize];
            assert!((g - fd).abs() < 1e-6, "i={i} {g} vs {fd}");
        }
    }

    #[test]
    fn value_and_tape_agree() {
        let x0 = [0.9, -0.4];
        let mut s = Value;
        let expect = poly(&mut s, &x0);
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = x0.iter().map(|v| tape.leaf(*v)).collect();
        let root = poly(&mut tape, &leaves);
        assert_eq!(tape.val(root).to_bits(), expect.to_bits());
    }

    #[test]
    fn sqrt_at_zero_has_zero_partial() {
        let mut tape = Tape::new();
        let x = tape.leaf(0.0);
        let r = tape.sqrt(x);
        let adj = tape.backward(r);
        assert_eq!(adj[x.0 as usize], 0.0);
        assert_eq!(tape.val(r), 0.0);
    }

    #[test]
    fn ln_clamped_floors_at_minus_thirty() {
        let mut s = Value;
        assert_eq!(s.ln_clamped(0.0), -30.0);
        assert_eq!(s.ln_clamped(1e-300), -30.0);
        assert!((s.ln_clamped(1.0) - 0.0).abs() < 1e-15);
    }
}
