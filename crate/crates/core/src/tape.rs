//! Reverse-mode differentiation over dense matrices.
//!
//! Every node holds a `DMatrix<f64>`; scalars are 1x1 and vectors are single
//! columns. Nodes whose inputs are all constants are marked as not requiring a
//! gradient and are skipped by the backward sweep.

use nalgebra::DMatrix;
use thiserror::Error;

pub type Mat = DMatrix<f64>;

/// Relative pivot magnitude below which a linear system counts as singular.
pub const SINGULAR_PIVOT: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("linear system of order {order} is numerically singular (pivot ratio {ratio:.3e})")]
pub struct SolveFailure {
    pub order: usize,
    pub ratio: f64,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    /// x = a^-1 b
    Solve(Var, Var),
    FrobSq(Var),
    Kron(Var, Var),
    /// Column-major flattening into a column vector.
    Vec(Var),
    /// Inverse of `Vec` for a matrix with the given row count.
    Unvec(Var),
    AddIdentity(Var),
    WeightedSum(Vec<(Var, f64)>),
    /// Stacks 1x1 nodes into a column vector.
    Concat(Vec<Var>),
    Entry(Var, usize, usize),
    /// Scalar node times matrix node.
    ScaleBy(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    /// Base-2 Jensen-Shannon divergence against a constant distribution.
    Jsd(Var, Vec<f64>),
    Sum(Var),
    /// Column of squared Frobenius distances from one matrix to many.
    SqDists(Var, Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of matrix operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by `Tape::backward`, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, or zeros shaped like `like` when nothing flowed back.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.nrows(), like.ncols()))
    }
}

/// Solves `a x = b` by column-pivoted QR, refusing numerically singular `a`.
pub fn solve_checked(a: &Mat, b: &Mat) -> Result<Mat, SolveFailure> {
    let order = a.nrows();
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..order).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio > SINGULAR_PIVOT) {
        return Err(SolveFailure { order, ratio });
    }
    qr.solve(b).ok_or(SolveFailure { order, ratio })
}

fn log2_clamped(x: f64) -> f64 {
    x.max(1e-300).log2()
}

/// Base-2 Jensen-Shannon divergence of two distributions on one support.
pub fn jsd_value(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).log2();
        }
    }
    total.max(0.0)
}

fn softmax(x: &Mat) -> Mat {
    let max = x.max();
    let mut e = x.map(|v| (v - max).exp());
    let z = e.sum();
    e /= z;
    e
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::from_element(1, 1, x))
    }

    pub fn constant_vector(&mut self, xs: &[f64]) -> Var {
        self.constant(Mat::from_column_slice(xs.len(), 1, xs))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var, SolveFailure> {
        let x = solve_checked(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(x, Op::Solve(a, b), rg))
    }

    pub fn frob_sq(&mut self, a: Var) -> Var {
        let v = self.value(a).norm_squared();
        let rg = self.rg(&[a]);
        self.push(Mat::from_element(1, 1, v), Op::FrobSq(a), rg)
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).kronecker(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Kron(a, b), rg)
    }

    pub fn vec(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::from_column_slice(m.len(), 1, m.as_slice());
        let rg = self.rg(&[a]);
        self.push(v, Op::Vec(a), rg)
    }

    pub fn unvec(&mut self, a: Var, rows: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.len() % rows, 0, "unvec size mismatch");
        let v = Mat::from_column_slice(rows, m.len() / rows, m.as_slice());
        let rg = self.rg(&[a]);
        self.push(v, Op::Unvec(a), rg)
    }

    /// `a + lambda * I`.
    pub fn add_identity(&mut self, a: Var, lambda: f64) -> Var {
        let m = self.value(a);
        let v = m + Mat::identity(m.nrows(), m.ncols()) * lambda;
        let rg = self.rg(&[a]);
        self.push(v, Op::AddIdentity(a), rg)
    }

    /// Linear combination with constant weights; terms share one shape.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "weighted sum of nothing");
        let first = self.value(terms[0].0);
        let mut v = Mat::zeros(first.nrows(), first.ncols());
        for &(t, w) in terms {
            if w != 0.0 {
                v += self.value(t) * w;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(v, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Unweighted sum of same-shaped nodes.
    pub fn sum_all(&mut self, terms: &[Var]) -> Var {
        let w: Vec<(Var, f64)> = terms.iter().map(|&t| (t, 1.0)).collect();
        self.weighted_sum(&w)
    }

    pub fn concat(&mut self, scalars: &[Var]) -> Var {
        let xs: Vec<f64> = scalars.iter().map(|&s| self.scalar(s)).collect();
        let rg = self.rg(scalars);
        self.push(Mat::from_column_slice(xs.len(), 1, &xs), Op::Concat(scalars.to_vec()), rg)
    }

    pub fn entry(&mut self, a: Var, i: usize, j: usize) -> Var {
        let v = self.value(a)[(i, j)];
        let rg = self.rg(&[a]);
        self.push(Mat::from_element(1, 1, v), Op::Entry(a, i, j), rg)
    }

    pub fn scale_by(&mut self, s: Var, a: Var) -> Var {
        let v = self.value(a) * self.scalar(s);
        let rg = self.rg(&[s, a]);
        self.push(v, Op::ScaleBy(s, a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax(self.value(a));
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let max = x.max();
        let lse = max + x.map(|v| (v - max).exp()).sum().ln();
        let v = x.map(|v| v - lse);
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSoftmax(a), rg)
    }

    /// Elementwise natural log, clamped away from zero.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(1e-300).ln());
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    /// Jensen-Shannon divergence (bits) between column `q` and constant `c`.
    pub fn jsd(&mut self, q: Var, c: &[f64]) -> Var {
        let qv = self.value(q);
        assert_eq!(qv.len(), c.len(), "jsd support mismatch");
        let v = jsd_value(qv.as_slice(), c);
        let rg = self.rg(&[q]);
        self.push(Mat::from_element(1, 1, v), Op::Jsd(q, c.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Mat::from_element(1, 1, v), Op::Sum(a), rg)
    }

    pub fn sq_dists(&mut self, x: Var, targets: &[Var]) -> Var {
        let xv = self.value(x);
        let ds: Vec<f64> = targets
            .iter()
            .map(|&t| (xv - self.value(t)).norm_squared())
            .collect();
        let mut all = targets.to_vec();
        all.push(x);
        let rg = self.rg(&all);
        self.push(Mat::from_column_slice(ds.len(), 1, &ds), Op::SqDists(x, targets.to_vec()), rg)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        let n = out.0 + 1;
        let mut grads: Vec<Option<Mat>> = vec![None; n];
        grads[out.0] = Some(Mat::from_element(1, 1, 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Scale(a, s) => acc(*a, g * *s),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    acc(*a, g * bv.transpose());
                }
                if self.requires_grad(*b) {
                    acc(*b, av.transpose() * g);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Solve(a, b) => {
                let av = self.value(*a);
                // b_bar = a^-T x_bar, a_bar = -b_bar x^T
                let bbar = solve_checked(&av.transpose(), g)
                    .expect("the transpose of a solved system stays solvable");
                if self.requires_grad(*a) {
                    acc(*a, -(&bbar * node.value.transpose()));
                }
                acc(*b, bbar);
            }
            Op::FrobSq(a) => acc(*a, self.value(*a) * (2.0 * g[(0, 0)])),
            Op::Kron(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (p, q) = (bv.nrows(), bv.ncols());
                if self.requires_grad(*a) {
                    let ga = Mat::from_fn(av.nrows(), av.ncols(), |i, j| {
                        g.view((i * p, j * q), (p, q)).component_mul(bv).sum()
                    });
                    acc(*a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Mat::zeros(p, q);
                    for i in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            let w = av[(i, j)];
                            if w != 0.0 {
                                gb += g.view((i * p, j * q), (p, q)) * w;
                            }
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Vec(a) => {
                let av = self.value(*a);
                acc(*a, Mat::from_column_slice(av.nrows(), av.ncols(), g.as_slice()));
            }
            Op::Unvec(a) => acc(*a, Mat::from_column_slice(g.len(), 1, g.as_slice())),
            Op::AddIdentity(a) => acc(*a, g.clone()),
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    if w != 0.0 {
                        acc(t, g * w);
                    }
                }
            }
            Op::Concat(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, Mat::from_element(1, 1, g[(k, 0)]));
                }
            }
            Op::Entry(a, i, j) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.nrows(), av.ncols());
                d[(*i, *j)] = g[(0, 0)];
                acc(*a, d);
            }
            Op::ScaleBy(s, a) => {
                let (sv, av) = (self.scalar(*s), self.value(*a));
                if self.requires_grad(*s) {
                    acc(*s, Mat::from_element(1, 1, g.dot(av)));
                }
                acc(*a, g * sv);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let inner = y.dot(g);
                acc(*a, y.zip_map(g, |yi, gi| yi * (gi - inner)));
            }
            Op::LogSoftmax(a) => {
                let p = node.value.map(f64::exp);
                let total = g.sum();
                acc(*a, g - p * total);
            }
            Op::Log(a) => {
                let av = self.value(*a);
                acc(*a, g.zip_map(av, |gi, x| gi / x.max(1e-300)));
            }
            Op::Jsd(q, c) => {
                let qv = self.value(*q);
                let s = g[(0, 0)];
                let d = Mat::from_fn(qv.nrows(), qv.ncols(), |i, j| {
                    let k = i + j * qv.nrows();
                    let (qk, ck) = (qv[(i, j)].max(1e-300), c[k]);
                    s * 0.5 * (log2_clamped(2.0 * qk) - log2_clamped(qk + ck))
                });
                acc(*q, d);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Mat::from_element(av.nrows(), av.ncols(), g[(0, 0)]));
            }
            Op::SqDists(x, targets) => {
                let xv = self.value(*x);
                let mut gx = Mat::zeros(xv.nrows(), xv.ncols());
                for (k, &t) in targets.iter().enumerate() {
                    let w = g[(k, 0)];
                    if w == 0.0 {
                        continue;
                    }
                    let diff = (xv - self.value(t)) * (2.0 * w);
                    if self.requires_grad(t) {
                        acc(t, -&diff);
                    }
                    gx += diff;
                }
                acc(*x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, xs: &[f64]) -> Mat {
        Mat::from_row_slice(r, c, xs)
    }

    /// Central differences of `f` at `x`.
    fn numeric(x: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| {
            let mut p = x.clone();
            p[(i, j)] += h;
            let mut m = x.clone();
            m[(i, j)] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Mat, b: &Mat, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn frobenius_gradient_is_twice_input() {
        let mut t = Tape::new();
        let x0 = mat(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let x = t.param(x0.clone());
        let f = t.frob_sq(x);
        let g = t.backward(f);
        assert_eq!(g.get(x).unwrap(), &(x0 * 2.0));
    }

    #[test]
    fn solve_adjoint_matches_finite_differences() {
        let a0 = mat(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b0 = mat(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 1.0]);
        let w = mat(3, 2, &[0.7, -0.1, 0.4, 1.3, -0.8, 0.2]);
        let f = |a: &Mat, b: &Mat| solve_checked(a, b).unwrap().component_mul(&w).sum();
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let b = t.param(b0.clone());
        let x = t.solve(a, b).unwrap();
        let wv = t.constant(w.clone());
        let xw = t.transpose(x);
        let prod = t.matmul(xw, wv);
        // trace(x^T w) through the diagonal
        let e0 = t.entry(prod, 0, 0);
        let e1 = t.entry(prod, 1, 1);
        let out = t.add(e0, e1);
        let g = t.backward(out);
        assert_close(g.get(a).unwrap(), &numeric(&a0, &|a| f(a, &b0)), 1e-6);
        assert_close(g.get(b).unwrap(), &numeric(&b0, &|b| f(&a0, b)), 1e-6);
    }

    #[test]
    fn kron_vec_adjoints() {
        let a0 = mat(2, 2, &[1.0, 2.0, -0.5, 0.3]);
        let b0 = mat(2, 3, &[0.2, 0.1, -1.0, 0.4, 0.9, 0.6]);
        let f = |a: &Mat, b: &Mat| {
            let k = a.kronecker(b);
            k.iter().enumerate().map(|(i, v)| v * v * (1.0 + i as f64 * 0.1)).sum::<f64>()
        };
        let mut t = Tape::new();
        let a = t.param(a0.clone());
        let b = t.param(b0.clone());
        let k = t.kron(a, b);
        let v = t.vec(k);
        let n = t.value(v).len();
        let wts: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let sq: Vec<Var> = (0..n)
            .map(|i| {
                let e = t.entry(v, i, 0);
                let s = t.frob_sq(e);
                t.scale(s, wts[i])
            })
            .collect();
        let out = t.sum_all(&sq);
        let g = t.backward(out);
        assert_close(g.get(a).unwrap(), &numeric(&a0, &|a| f(a, &b0)), 1e-6);
        assert_close(g.get(b).unwrap(), &numeric(&b0, &|b| f(&a0, b)), 1e-6);
    }

    #[test]
    fn softmax_jsd_chain() {
        let x0 = mat(3, 1, &[0.3, -1.2, 0.8]);
        let c = [0.6, 0.0, 0.4];
        let f = |x: &Mat| jsd_value(softmax(x).as_slice(), &c);
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let q = t.softmax(x);
        let d = t.jsd(q, &c);
        let g = t.backward(d);
        assert_close(g.get(x).unwrap(), &numeric(&x0, &f), 1e-6);
    }

    #[test]
    fn log_softmax_and_sq_dists() {
        let x0 = mat(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let e1 = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let e2 = mat(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let f = |x: &Mat| {
            let d = Mat::from_column_slice(2, 1, &[-(x - &e1).norm_squared(), -(x - &e2).norm_squared()]);
            let max = d.max();
            d[(0, 0)] - (max + d.map(|v| (v - max).exp()).sum().ln())
        };
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let a = t.constant(e1.clone());
        let b = t.constant(e2.clone());
        let d = t.sq_dists(x, &[a, b]);
        let nd = t.scale(d, -1.0);
        let ls = t.log_softmax(nd);
        let out = t.entry(ls, 0, 0);
        let g = t.backward(out);
        assert_close(g.get(x).unwrap(), &numeric(&x0, &f), 1e-6);
        assert!(g.get(a).is_none());
    }

    #[test]
    fn singular_solve_is_refused() {
        let mut t = Tape::new();
        let a = t.constant(mat(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        let b = t.constant(mat(2, 1, &[1.0, 1.0]));
        assert!(t.solve(a, b).is_err());
    }

    #[test]
    fn jsd_reference_values() {
        assert_eq!(jsd_value(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert_eq!(jsd_value(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        // 1.5 - 0.75 log2 3 by hand from the entropy form
        let expected = 1.5 - 0.75 * 3f64.log2();
        assert!((jsd_value(&[0.5, 0.5], &[1.0, 0.0]) - expected).abs() < 1e-12);
    }
}
