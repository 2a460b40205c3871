use std::collections::HashMap;

use super::matrix::{log_softmax_slice, logsumexp_slice, sigmoid, softmax_slice, softplus};
use super::{Gradients, Matrix, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    Affine(Var, Var, Var),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Transpose(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Every op works on whole matrices; rows are treated as a batch wherever
/// an op is row-wise (softmax, log-softmax, log-sum-exp). The tape is
/// append-only, which keeps the recorded graph acyclic.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

fn check_same(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// The single entry of a `1 x 1` value.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Loads a parameter as a differentiable leaf. Loading the same name twice
    /// returns the same handle, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let index = store
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        if let Some(&v) = self.params.get(&index) {
            return Ok(v);
        }
        let v = self.push(store.by_index(index).value.clone(), Op::Param(index), true);
        self.params.insert(index, v);
        Ok(v)
    }

    /// `x W + b`, with `b` a single row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() || bv.shape() != (1, wv.cols()) {
            return Err(Error::shape(format!(
                "affine: x {:?}, W {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.matmul(wv);
        for i in 0..out.rows() {
            for (o, &bias) in out.row_mut(i).iter_mut().zip(bv.as_slice()) {
                *o += bias;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Affine(x, w, b), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.matmul(bv);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        check_same(self.value(a), self.value(b), what)?;
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    fn row_wise(&mut self, a: Var, f: impl Fn(&[f64]) -> Vec<f64>, op: Op) -> Var {
        let src = self.value(a);
        let mut out = Vec::with_capacity(src.len());
        for i in 0..src.rows() {
            out.extend(f(src.row(i)));
        }
        let cols = out.len() / src.rows().max(1);
        let m = Matrix::from_vec(src.rows(), cols, out);
        let ng = self.needs(a);
        self.push(m, op, ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.row_wise(a, softmax_slice, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.row_wise(a, log_softmax_slice, Op::LogSoftmax(a))
    }

    /// Row-wise log-sum-exp; `n x m -> n x 1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        self.row_wise(a, |r| vec![logsumexp_slice(r)], Op::LogSumExp(a))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape(format!(
                "concat: {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = Matrix::from_fn(av.rows(), av.cols() + bv.cols(), |i, j| {
            if j < av.cols() {
                av.get(i, j)
            } else {
                bv.get(i, j - av.cols())
            }
        });
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.needs(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.sum() / m.len().max(1) as f64;
        let ng = self.needs(a);
        self.push(Matrix::filled(1, 1, s), Op::Mean(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.rows()) {
            return Err(Error::shape(format!(
                "gather_rows: index {bad} for {} rows",
                src.rows()
            )));
        }
        let mut data = Vec::with_capacity(index.len() * src.cols());
        for &i in index {
            data.extend_from_slice(src.row(i));
        }
        let out = Matrix::from_vec(index.len(), src.cols(), data);
        let ng = self.needs(a);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec()), ng))
    }

    /// Broadcasts a single row to `n` rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let src = self.value(a);
        if src.rows() != 1 {
            return Err(Error::shape(format!(
                "repeat_rows expects one row, got {:?}",
                src.shape()
            )));
        }
        let mut data = Vec::with_capacity(n * src.cols());
        for _ in 0..n {
            data.extend_from_slice(src.as_slice());
        }
        let out = Matrix::from_vec(n, src.cols(), data);
        let ng = self.needs(a);
        Ok(self.push(out, Op::RepeatRows(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Reverse pass from `output`, seeded with ones. Returns gradients for
    /// every parameter of `store` (zero for those not on the tape).
    pub fn backward(&self, output: Var, store: &ParamStore) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..=output.0).map(|_| None).collect();
        let out_value = self.value(output);
        grads[output.0] = Some(Matrix::filled(out_value.rows(), out_value.cols(), 1.0));
        let mut result = store.zeros_like();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = &node.value;
            let mut send = |v: Var, contrib: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(index) => result.accumulate(*index, &g),
                Op::Affine(x, w, b) => {
                    if self.needs(*x) {
                        send(*x, g.matmul_t(self.value(*w)));
                    }
                    if self.needs(*w) {
                        send(*w, self.value(*x).t_matmul(&g));
                    }
                    if self.needs(*b) {
                        send(*b, g.col_sums());
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, g.matmul_t(self.value(*b)));
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(self.value(*b), |d, y| d * y));
                    send(*b, g.zip_map(self.value(*a), |d, x| d * x));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    send(*a, g.zip_map(bv, |d, y| d / y));
                    let da = g.zip_map(y, |d, q| d * q);
                    send(*b, da.zip_map(bv, |t, y| -t / y));
                }
                Op::Scale(a, f) => send(*a, g.map(|d| d * f)),
                Op::AddScalar(a) => send(*a, g),
                Op::Tanh(a) => send(*a, g.zip_map(y, |d, t| d * (1.0 - t * t))),
                Op::Sigmoid(a) => send(*a, g.zip_map(y, |d, s| d * s * (1.0 - s))),
                Op::Softplus(a) => send(*a, g.zip_map(self.value(*a), |d, x| d * sigmoid(x))),
                Op::Exp(a) => send(*a, g.zip_map(y, |d, e| d * e)),
                Op::Ln(a) => send(*a, g.zip_map(self.value(*a), |d, x| d / x)),
                Op::Square(a) => send(*a, g.zip_map(self.value(*a), |d, x| 2.0 * d * x)),
                Op::Softmax(a) => {
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                        for ((o, &p), &d) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = p * (d - dot);
                        }
                    }
                    send(*a, dx);
                }
                Op::LogSoftmax(a) => {
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((o, &ly), &d) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = d - ly.exp() * total;
                        }
                    }
                    send(*a, dx);
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let (lse, d) = (y.get(r, 0), g.get(r, 0));
                        for (o, &xv) in dx.row_mut(r).iter_mut().zip(x.row(r)) {
                            *o = d * (xv - lse).exp();
                        }
                    }
                    send(*a, dx);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    send(*a, Matrix::from_fn(g.rows(), ca, |i, j| g.get(i, j)));
                    send(*b, Matrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j)));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    send(*a, Matrix::filled(r, c, g.as_slice()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let n = (r * c).max(1) as f64;
                    send(*a, Matrix::filled(r, c, g.as_slice()[0] / n));
                }
                Op::GatherRows(a, index) => {
                    let (r, c) = self.value(*a).shape();
                    let mut dx = Matrix::zeros(r, c);
                    for (k, &i) in index.iter().enumerate() {
                        for (o, &d) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += d;
                        }
                    }
                    send(*a, dx);
                }
                Op::RepeatRows(a) => send(*a, g.col_sums()),
                Op::Transpose(a) => send(*a, g.transpose()),
            }
        }
        result
    }
}
