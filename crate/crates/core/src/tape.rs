//! A small reverse-mode automatic-differentiation tape over dense matrices.
//!
//! Every operation records its output value and the handles of its inputs;
//! [`Tape::backward`] sweeps the record in reverse. Only nodes that (directly
//! or transitively) depend on a trainable leaf take part in the backward
//! sweep, so constants such as masks and indicator matrices cost nothing.
//!
//! Operations whose gradients are easier to write by hand (the point-process
//! integrals, the expected log-intensity) plug in through [`CustomOp`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::linalg::{gemm, matmul_t, solve_lower, solve_lower_t, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Exp,
    Ln,
    Relu,
    Softplus,
    Sigmoid,
    Square,
    Sqrt,
    Recip,
}

/// Hand-written vector-Jacobian product for an operation with arbitrary
/// inputs.
pub trait CustomOp {
    /// Gradients with respect to each input given the gradient of the output.
    /// Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(&self, inputs: &[Rc<Mat>], output: &Mat, grad: &Mat, needs: &[bool]) -> Vec<Option<Mat>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Transpose(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Slice { a: Var, r0: usize, c0: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Diag(Var),
    DiagEmbed(Var),
    Fill(Var),
    SqDist(Var, Var),
    Cholesky(Var),
    TriSolve { l: Var, b: Var, trans: bool },
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.g[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the right shape if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.g[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn needs_any(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Trainable input.
    pub fn param(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(Mat::scalar(v))
    }

    pub fn value(&self, v: Var) -> Rc<Mat> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op shape mismatch");
        let out = va.zip_map(&vb, f);
        let ng = self.needs_any(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `a (n x m) + r (1 x m)` broadcast over rows.
    pub fn add_row(&self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert_eq!((1, va.cols), vr.shape(), "add_row shape mismatch");
        let mut out = (*va).clone();
        for i in 0..out.rows {
            for (x, y) in out.row_slice_mut(i).iter_mut().zip(&vr.data) {
                *x += y;
            }
        }
        let ng = self.needs_any(&[a, r]);
        self.push(out, Op::AddRow(a, r), ng)
    }

    /// `a (n x m) * r (1 x m)` broadcast over rows.
    pub fn mul_row(&self, a: Var, r: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        assert_eq!((1, va.cols), vr.shape(), "mul_row shape mismatch");
        let mut out = (*va).clone();
        for i in 0..out.rows {
            for (x, y) in out.row_slice_mut(i).iter_mut().zip(&vr.data) {
                *x *= y;
            }
        }
        let ng = self.needs_any(&[a, r]);
        self.push(out, Op::MulRow(a, r), ng)
    }

    /// `a (n x m) + c (n x 1)` broadcast over columns.
    pub fn add_col(&self, a: Var, c: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(c));
        assert_eq!((va.rows, 1), vc.shape(), "add_col shape mismatch");
        let mut out = (*va).clone();
        for i in 0..out.rows {
            let ci = vc.data[i];
            out.row_slice_mut(i).iter_mut().for_each(|x| *x += ci);
        }
        let ng = self.needs_any(&[a, c]);
        self.push(out, Op::AddCol(a, c), ng)
    }

    /// `a (n x m) * c (n x 1)` broadcast over columns.
    pub fn mul_col(&self, a: Var, c: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(c));
        assert_eq!((va.rows, 1), vc.shape(), "mul_col shape mismatch");
        let mut out = (*va).clone();
        for i in 0..out.rows {
            let ci = vc.data[i];
            out.row_slice_mut(i).iter_mut().for_each(|x| *x *= ci);
        }
        let ng = self.needs_any(&[a, c]);
        self.push(out, Op::MulCol(a, c), ng)
    }

    /// `a + s` where `s` is 1x1.
    pub fn add_scalar(&self, a: Var, s: Var) -> Var {
        let sv = self.item(s);
        let out = self.value(a).map(|x| x + sv);
        let ng = self.needs_any(&[a, s]);
        self.push(out, Op::AddScalar(a, s), ng)
    }

    /// `a * s` where `s` is 1x1.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let sv = self.item(s);
        let out = self.value(a).map(|x| x * sv);
        let ng = self.needs_any(&[a, s]);
        self.push(out, Op::MulScalar(a, s), ng)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `op(a) op(b)` with optional transposes.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = matmul_t(&self.value(a), ta, &self.value(b), tb);
        let ng = self.needs_any(&[a, b]);
        self.push(out, Op::MatMul { a, ta, b, tb }, ng)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let va = self.value(a);
        let out = match kind {
            Unary::Exp => va.map(f64::exp),
            Unary::Ln => va.map(f64::ln),
            Unary::Relu => va.map(|x| x.max(0.0)),
            Unary::Softplus => va.map(softplus),
            Unary::Sigmoid => va.map(sigmoid),
            Unary::Square => va.map(|x| x * x),
            Unary::Sqrt => va.map(f64::sqrt),
            Unary::Recip => va.map(|x| 1.0 / x),
        };
        let ng = self.needs(a);
        self.push(out, Op::Unary(a, kind), ng)
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }
    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a);
        self.push(out, Op::Clamp(a, lo, hi), ng)
    }

    /// Sum of all entries (1x1).
    pub fn sum(&self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Column sums (1 x m).
    pub fn sum_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Mat::zeros(1, va.cols);
        for i in 0..va.rows {
            for (o, x) in out.data.iter_mut().zip(va.row_slice(i)) {
                *o += x;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Row sums (n x 1).
    pub fn sum_cols(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Mat::col((0..va.rows).map(|i| va.row_slice(i).iter().sum()).collect());
        let ng = self.needs(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn dot(&self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    pub fn slice(&self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Var {
        let out = self.value(a).slice(r0, r1, c0, c1);
        let ng = self.needs(a);
        self.push(out, Op::Slice { a, r0, c0 }, ng)
    }

    pub fn slice_rows(&self, a: Var, r0: usize, r1: usize) -> Var {
        let c = self.shape(a).1;
        self.slice(a, r0, r1, 0, c)
    }

    pub fn slice_cols(&self, a: Var, c0: usize, c1: usize) -> Var {
        let r = self.shape(a).0;
        self.slice(a, 0, r, c0, c1)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let vals: Vec<Rc<Mat>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Mat> = vals.iter().map(|m| m.as_ref()).collect();
        let out = Mat::hcat(&refs);
        let ng = self.needs_any(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let vals: Vec<Rc<Mat>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Mat> = vals.iter().map(|m| m.as_ref()).collect();
        let out = Mat::vcat(&refs);
        let ng = self.needs_any(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Diagonal of a square matrix as an n x 1 column.
    pub fn diag(&self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.is_square(), "diag of non-square matrix");
        let out = Mat::col(va.diag());
        let ng = self.needs(a);
        self.push(out, Op::Diag(a), ng)
    }

    /// n x 1 column to an n x n diagonal matrix.
    pub fn diag_embed(&self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.cols, 1, "diag_embed expects a column");
        let out = Mat::from_diag(&va.data);
        let ng = self.needs(a);
        self.push(out, Op::DiagEmbed(a), ng)
    }

    /// Broadcast a 1x1 value to `rows x cols`.
    pub fn fill(&self, s: Var, rows: usize, cols: usize) -> Var {
        let out = Mat::filled(rows, cols, self.item(s));
        let ng = self.needs(s);
        self.push(out, Op::Fill(s), ng)
    }

    /// Pairwise squared differences of two columns: `out[i][j] = (a_i - b_j)^2`.
    pub fn sq_dist(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.cols == 1 && vb.cols == 1, "sq_dist expects columns");
        let out = Mat::from_fn(va.rows, vb.rows, |i, j| {
            let d = va.data[i] - vb.data[j];
            d * d
        });
        let ng = self.needs_any(&[a, b]);
        self.push(out, Op::SqDist(a, b), ng)
    }

    /// Lower Cholesky factor. Panics are avoided: the caller gets an error
    /// when the input is not positive definite.
    pub fn cholesky(&self, a: Var) -> crate::error::Result<Var> {
        let l = crate::linalg::cholesky(&self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(l, Op::Cholesky(a), ng))
    }

    /// `L^{-1} B` (or `L^{-T} B` when `trans`), `L` lower triangular.
    pub fn tri_solve(&self, l: Var, b: Var, trans: bool) -> Var {
        let (vl, vb) = (self.value(l), self.value(b));
        let out = if trans { solve_lower_t(&vl, &vb) } else { solve_lower(&vl, &vb) };
        let ng = self.needs_any(&[l, b]);
        self.push(out, Op::TriSolve { l, b, trans }, ng)
    }

    /// `K + j I` with the relative jitter `j = eps * mean(diag(K))`, kept on
    /// the tape so that gradients see it; falls back to the constant `eps`
    /// when the diagonal mean is not positive. Returns `(K + j I, j)`.
    pub fn add_relative_jitter(&self, k: Var, eps: f64) -> (Var, Var) {
        let n = self.shape(k).0;
        if eps == 0.0 {
            return (k, self.scalar_const(0.0));
        }
        let j = if self.value(k).mean_diag() > 0.0 {
            self.scale(self.sum(self.diag(k)), eps / n as f64)
        } else {
            self.scalar_const(eps)
        };
        let eye = self.constant(Mat::identity(n));
        (self.add(k, self.mul_scalar(eye, j)), j)
    }

    /// `2 * sum(log(diag(L)))`, the log-determinant from a Cholesky factor.
    pub fn chol_logdet(&self, l: Var) -> Var {
        let d = self.diag(l);
        let ld = self.ln(d);
        let s = self.sum(ld);
        self.scale(s, 2.0)
    }

    pub fn custom(&self, op: Box<dyn CustomOp>, inputs: &[Var], output: Mat) -> Var {
        let ng = self.needs_any(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "backward needs a scalar loss");
        let n = loss.0 + 1;
        let mut g: Vec<Option<Mat>> = (0..nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Mat::scalar(1.0));
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();

        for i in (0..n).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let grad = match g[i].take() {
                Some(x) => x,
                None => continue,
            };
            let val = |v: Var| -> &Mat { nodes[v.0].value.as_ref() };
            let needs = |v: Var| nodes[v.0].needs_grad;
            let acc = |v: Var, m: Mat, g: &mut Vec<Option<Mat>>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut g[v.0] {
                    Some(existing) => existing.add_assign(&m),
                    slot @ None => *slot = Some(m),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // Keep leaf gradients.
                    g[i] = Some(grad);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(*b, grad.clone(), &mut g);
                    }
                    acc(*a, grad, &mut g);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, grad.scale(-1.0), &mut g);
                    }
                    acc(*a, grad, &mut g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, grad.hadamard(val(*b)), &mut g);
                    }
                    if needs(*b) {
                        acc(*b, grad.hadamard(val(*a)), &mut g);
                    }
                }
                Op::Div(a, b) => {
                    let vb = val(*b);
                    if needs(*a) {
                        acc(*a, grad.zip_map(vb, |g, y| g / y), &mut g);
                    }
                    if needs(*b) {
                        let out = node.value.as_ref();
                        let gb = Mat::from_vec(
                            grad.rows,
                            grad.cols,
                            grad.data
                                .iter()
                                .zip(&out.data)
                                .zip(&vb.data)
                                .map(|((g, o), y)| -g * o / y)
                                .collect(),
                        );
                        acc(*b, gb, &mut g);
                    }
                }
                Op::AddRow(a, r) => {
                    if needs(*r) {
                        let mut gr = Mat::zeros(1, grad.cols);
                        for k in 0..grad.rows {
                            for (o, x) in gr.data.iter_mut().zip(grad.row_slice(k)) {
                                *o += x;
                            }
                        }
                        acc(*r, gr, &mut g);
                    }
                    acc(*a, grad, &mut g);
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (val(*a), val(*r));
                    if needs(*r) {
                        let mut gr = Mat::zeros(1, grad.cols);
                        for k in 0..grad.rows {
                            for ((o, x), y) in gr.data.iter_mut().zip(grad.row_slice(k)).zip(va.row_slice(k)) {
                                *o += x * y;
                            }
                        }
                        acc(*r, gr, &mut g);
                    }
                    if needs(*a) {
                        let mut ga = grad;
                        for k in 0..ga.rows {
                            for (x, y) in ga.row_slice_mut(k).iter_mut().zip(&vr.data) {
                                *x *= y;
                            }
                        }
                        acc(*a, ga, &mut g);
                    }
                }
                Op::AddCol(a, c) => {
                    if needs(*c) {
                        let gc = Mat::col((0..grad.rows).map(|k| grad.row_slice(k).iter().sum()).collect());
                        acc(*c, gc, &mut g);
                    }
                    acc(*a, grad, &mut g);
                }
                Op::MulCol(a, c) => {
                    let (va, vc) = (val(*a), val(*c));
                    if needs(*c) {
                        let gc = Mat::col(
                            (0..grad.rows)
                                .map(|k| grad.row_slice(k).iter().zip(va.row_slice(k)).map(|(x, y)| x * y).sum())
                                .collect(),
                        );
                        acc(*c, gc, &mut g);
                    }
                    if needs(*a) {
                        let mut ga = grad;
                        for k in 0..ga.rows {
                            let ck = vc.data[k];
                            ga.row_slice_mut(k).iter_mut().for_each(|x| *x *= ck);
                        }
                        acc(*a, ga, &mut g);
                    }
                }
                Op::AddScalar(a, s) => {
                    if needs(*s) {
                        acc(*s, Mat::scalar(grad.sum()), &mut g);
                    }
                    acc(*a, grad, &mut g);
                }
                Op::MulScalar(a, s) => {
                    if needs(*s) {
                        acc(*s, Mat::scalar(grad.frob_dot(val(*a))), &mut g);
                    }
                    if needs(*a) {
                        let sv = val(*s).item();
                        acc(*a, grad.scale(sv), &mut g);
                    }
                }
                Op::Scale(a, c) => acc(*a, grad.scale(*c), &mut g),
                Op::Offset(a) => acc(*a, grad, &mut g),
                Op::MatMul { a, ta, b, tb } => {
                    let (va, vb) = (val(*a), val(*b));
                    if needs(*a) {
                        let ga = if !*ta { matmul_t(&grad, false, vb, !*tb) } else { matmul_t(vb, *tb, &grad, true) };
                        acc(*a, ga, &mut g);
                    }
                    if needs(*b) {
                        let gb = if !*tb { matmul_t(va, !*ta, &grad, false) } else { matmul_t(&grad, true, va, *ta) };
                        acc(*b, gb, &mut g);
                    }
                }
                Op::Transpose(a) => acc(*a, grad.transpose(), &mut g),
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = node.value.as_ref();
                    let ga = match kind {
                        Unary::Exp => grad.hadamard(y),
                        Unary::Ln => grad.zip_map(x, |g, x| g / x),
                        Unary::Relu => grad.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
                        Unary::Softplus => grad.zip_map(x, |g, x| g * sigmoid(x)),
                        Unary::Sigmoid => grad.zip_map(y, |g, y| g * y * (1.0 - y)),
                        Unary::Square => grad.zip_map(x, |g, x| 2.0 * g * x),
                        Unary::Sqrt => grad.zip_map(y, |g, y| g / (2.0 * y)),
                        Unary::Recip => grad.zip_map(y, |g, y| -g * y * y),
                    };
                    acc(*a, ga, &mut g);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = val(*a);
                    let ga = grad.zip_map(x, |g, x| if x > *lo && x < *hi { g } else { 0.0 });
                    acc(*a, ga, &mut g);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Mat::filled(r, c, grad.item()), &mut g);
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    for k in 0..r {
                        ga.row_slice_mut(k).copy_from_slice(&grad.data);
                    }
                    acc(*a, ga, &mut g);
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    let ga = Mat::from_fn(r, c, |k, _| grad.data[k]);
                    acc(*a, ga, &mut g);
                }
                Op::Slice { a, r0, c0 } => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Mat::zeros(r, c);
                    ga.set_slice(*r0, *c0, &grad);
                    acc(*a, ga, &mut g);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = val(*p).cols;
                        if needs(*p) {
                            acc(*p, grad.slice(0, grad.rows, c0, c0 + w), &mut g);
                        }
                        c0 += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let h = val(*p).rows;
                        if needs(*p) {
                            acc(*p, grad.slice(r0, r0 + h, 0, grad.cols), &mut g);
                        }
                        r0 += h;
                    }
                }
                Op::Diag(a) => acc(*a, Mat::from_diag(&grad.data), &mut g),
                Op::DiagEmbed(a) => acc(*a, Mat::col(grad.diag()), &mut g),
                Op::Fill(s) => acc(*s, Mat::scalar(grad.sum()), &mut g),
                Op::SqDist(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    // d/da_i = sum_j 2 g_ij (a_i - b_j); d/db_j = -sum_i 2 g_ij (a_i - b_j)
                    let mut ga = vec![0.0; va.rows];
                    let mut gb = vec![0.0; vb.rows];
                    for i in 0..va.rows {
                        let row = grad.row_slice(i);
                        for j in 0..vb.rows {
                            let t = 2.0 * row[j] * (va.data[i] - vb.data[j]);
                            ga[i] += t;
                            gb[j] -= t;
                        }
                    }
                    if needs(*a) {
                        acc(*a, Mat::col(ga), &mut g);
                    }
                    if needs(*b) {
                        acc(*b, Mat::col(gb), &mut g);
                    }
                }
                Op::Cholesky(a) => {
                    let l = node.value.as_ref();
                    // Phi(L^T Lbar): lower triangle with halved diagonal.
                    let mut p = matmul_t(l, true, &grad.tril(), false);
                    for r in 0..p.rows {
                        for c in 0..p.cols {
                            if c > r {
                                p[(r, c)] = 0.0;
                            } else if c == r {
                                p[(r, c)] *= 0.5;
                            }
                        }
                    }
                    let x = solve_lower_t(l, &p);
                    let abar = solve_lower_t(l, &x.transpose()).transpose();
                    acc(*a, abar.symmetrize(), &mut g);
                }
                Op::TriSolve { l, b, trans } => {
                    let vl = val(*l);
                    let x = node.value.as_ref();
                    let gb = if *trans { solve_lower(vl, &grad) } else { solve_lower_t(vl, &grad) };
                    if needs(*l) {
                        let mut gl = Mat::zeros(vl.rows, vl.cols);
                        if *trans {
                            gemm(-1.0, x, false, &gb, true, 0.0, &mut gl);
                        } else {
                            gemm(-1.0, &gb, false, x, true, 0.0, &mut gl);
                        }
                        acc(*l, gl.tril(), &mut g);
                    }
                    if needs(*b) {
                        acc(*b, gb, &mut g);
                    }
                }
                Op::Custom(op, inputs) => {
                    let ins: Vec<Rc<Mat>> = inputs.iter().map(|v| Rc::clone(&nodes[v.0].value)).collect();
                    let nd: Vec<bool> = inputs.iter().map(|v| needs(*v)).collect();
                    let gs = op.backward(&ins, &node.value, &grad, &nd);
                    for ((v, gi), need) in inputs.iter().zip(gs).zip(nd) {
                        if let (Some(gi), true) = (gi, need) {
                            acc(*v, gi, &mut g);
                        }
                    }
                }
            }
        }
        Grads { g, shapes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` at `x0`, compared with the tape
    /// gradient.
    fn check(x0: &Mat, f: impl Fn(&Tape, Var) -> Var, tol: f64) {
        let t = Tape::new();
        let x = t.param(x0.clone());
        let y = f(&t, x);
        let g = t.backward(y).wrt(x);
        let h = 1e-6;
        for k in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data[k] += h;
            let mut xm = x0.clone();
            xm.data[k] -= h;
            let tp = Tape::new();
            let yp = {
                let v = tp.param(xp);
                tp.item(f(&tp, v))
            };
            let tm = Tape::new();
            let ym = {
                let v = tm.param(xm);
                tm.item(f(&tm, v))
            };
            let fd = (yp - ym) / (2.0 * h);
            let err = (fd - g.data[k]).abs() / (1.0 + fd.abs());
            assert!(err < tol, "entry {k}: fd {fd} vs tape {}", g.data[k]);
        }
    }

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_and_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(3, 4, &mut rng);
        let r = rand_mat(1, 4, &mut rng);
        let c = rand_mat(3, 1, &mut rng);
        let x0 = rand_mat(3, 4, &mut rng);
        check(
            &x0,
            |t, x| {
                let wv = t.constant(w.clone());
                let rv = t.constant(r.clone());
                let cv = t.constant(c.clone());
                let a = t.mul(x, wv);
                let b = t.add_row(a, rv);
                let b = t.mul_row(b, rv);
                let b = t.add_col(b, cv);
                let b = t.mul_col(b, cv);
                let s = t.softplus(b);
                let e = t.exp(t.scale(x, 0.3));
                let q = t.div(s, t.offset(e, 1.0));
                let sg = t.sigmoid(q);
                let sq = t.square(sg);
                let sm = t.sum(t.sqrt(t.offset(sq, 1.0)));
                let ln = t.sum(t.ln(t.offset(t.square(x), 0.5)));
                let sr = t.sum(t.mul(t.sum_rows(x), t.sum_rows(x)));
                let sc = t.sum(t.recip(t.offset(t.square(t.sum_cols(x)), 1.0)));
                let tot = t.add(sm, ln);
                let tot = t.add(tot, sr);
                t.add(tot, sc)
            },
            1e-6,
        );
    }

    #[test]
    fn scalar_broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a0 = rand_mat(2, 3, &mut rng);
        check(
            &Mat::scalar(0.7),
            |t, s| {
                let a = t.constant(a0.clone());
                let b = t.mul_scalar(a, s);
                let c = t.add_scalar(b, s);
                let f = t.fill(s, 2, 3);
                t.sum(t.square(t.add(c, f)))
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_and_structure_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b0 = rand_mat(4, 3, &mut rng);
        let x0 = rand_mat(4, 4, &mut rng);
        check(
            &x0,
            |t, x| {
                let b = t.constant(b0.clone());
                let p1 = t.matmul_t(x, false, b, false);
                let p2 = t.matmul_t(x, true, b, false);
                let p3 = t.matmul_t(b, true, x, true);
                let p4 = t.matmul_t(x, true, x, false);
                let s = t.slice(x, 1, 3, 0, 2);
                let cc = t.concat_cols(&[p1, p2]);
                let st = t.transpose(s);
                let cr = t.concat_rows(&[p3, t.slice_rows(x, 0, 2), t.concat_cols(&[st, st])]);
                let d = t.diag(p4);
                let de = t.diag_embed(d);
                let tot = t.add(t.sum(t.square(cc)), t.sum(t.square(cr)));
                let tot = t.add(tot, t.sum(t.mul(de, x)));
                t.add(tot, t.sum(t.relu(x)))
            },
            1e-6,
        );
    }

    #[test]
    fn sq_dist_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b0 = rand_mat(5, 1, &mut rng);
        let x0 = rand_mat(3, 1, &mut rng);
        check(
            &x0,
            |t, x| {
                let b = t.constant(b0.clone());
                let d1 = t.sq_dist(x, b);
                let d2 = t.sq_dist(b, x);
                let d3 = t.sq_dist(x, x);
                let s = t.add(t.sum(t.exp(t.neg(d1))), t.sum(t.square(d2)));
                t.add(s, t.sum(t.exp(t.scale(d3, -0.5))))
            },
            1e-6,
        );
    }

    #[test]
    fn cholesky_and_solve_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = rand_mat(5, 5, &mut rng);
        let b0 = rand_mat(5, 2, &mut rng);
        check(
            &a0,
            |t, a| {
                // A A^T + I is symmetric positive definite for any A.
                let s = t.matmul_t(a, false, a, true);
                let s = t.add(s, t.constant(Mat::identity(5)));
                let l = t.cholesky(s).unwrap();
                let b = t.constant(b0.clone());
                let x = t.tri_solve(l, b, false);
                let y = t.tri_solve(l, x, true);
                let ld = t.chol_logdet(l);
                t.add(t.sum(t.square(y)), ld)
            },
            1e-5,
        );
        // Gradient with respect to the right-hand side and the factor itself.
        let l0 = crate::linalg::cholesky(&{
            let mut m = matmul_t(&a0, false, &a0, true);
            m.add_diag(1.0);
            m
        })
        .unwrap();
        check(
            &b0,
            |t, b| {
                let l = t.constant(l0.clone());
                let x = t.tri_solve(l, b, true);
                t.sum(t.square(x))
            },
            1e-6,
        );
        check(
            &l0,
            |t, l| {
                let lt = t.mul(l, t.constant(Mat::from_fn(5, 5, |i, j| if j <= i { 1.0 } else { 0.0 })));
                let b = t.constant(b0.clone());
                let x = t.tri_solve(lt, b, false);
                let y = t.tri_solve(lt, x, true);
                t.sum(t.square(y))
            },
            1e-5,
        );
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let t = Tape::new();
        let x = t.param(Mat::row(vec![-2.0, 0.5, 3.0]));
        let y = t.sum(t.clamp(x, 0.0, 1.0));
        let g = t.backward(y).wrt(x);
        assert_eq!(g.data, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::new();
        let c = t.constant(Mat::scalar(2.0));
        let x = t.param(Mat::scalar(3.0));
        let y = t.mul(c, x);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).item(), 2.0);
    }
}
