//! Reverse-mode tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` simply walks it in reverse. Parameters
//! enter the tape through [`Graph::param`], which keys them by address; the
//! `'p` lifetime pins the borrowed parameters for as long as the tape lives.

use std::collections::HashMap;

use super::matrix::{exact_sum, Matrix};
use super::params::Parameterized;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    MatMulExact(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Reshape(Var),
    BceWithLogits(Var, Matrix),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Broadcast class of the right operand of a binary op.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn bcast_kind(op: &'static str, a: &Matrix, b: &Matrix) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.shape() == (1, 1) {
        Ok(Bcast::Scalar)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Bcast::Row)
    } else if b.cols() == 1 && b.rows() == a.rows() {
        Ok(Bcast::Col)
    } else {
        Err(Error::dim(
            op,
            format!(
                "cannot broadcast {}x{} against {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            ),
        ))
    }
}

#[inline]
fn bcast_get(b: &Matrix, kind: Bcast, r: usize, c: usize) -> f64 {
    match kind {
        Bcast::Same => b.get(r, c),
        Bcast::Scalar => b.data()[0],
        Bcast::Row => b.data()[c],
        Bcast::Col => b.data()[r],
    }
}

fn bcast_apply(a: &Matrix, b: &Matrix, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = a.clone();
    let cols = a.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(*v, bcast_get(b, kind, i / cols, i % cols));
    }
    out
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn bcast_reduce(g: &Matrix, kind: Bcast, shape: (usize, usize)) -> Matrix {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Matrix::scalar(g.sum()),
        Bcast::Row => {
            let mut out = Matrix::zeros(1, shape.1);
            for r in 0..g.rows() {
                for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            out
        }
        Bcast::Col => {
            let mut out = Matrix::zeros(shape.0, 1);
            for r in 0..g.rows() {
                out.data_mut()[r] = g.row(r).iter().sum();
            }
            out
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Recorded computation with parameter registry.
pub struct Graph<'p> {
    nodes: Vec<Node>,
    params: HashMap<*const Matrix, Var>,
    _params: std::marker::PhantomData<&'p Matrix>,
}

impl<'p> Default for Graph<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            _params: std::marker::PhantomData,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient bookkeeping beyond its node.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Registers (or re-uses) a trainable parameter.
    pub fn param(&mut self, m: &'p Matrix) -> Var {
        let key = m as *const Matrix;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(m.clone(), Op::Leaf);
        self.params.insert(key, v);
        v
    }

    /// Registers every tensor of `model`, including ones the forward pass
    /// never touches, so that all of them receive a (possibly zero) gradient.
    pub fn register<M: Parameterized + ?Sized>(&mut self, model: &'p M) {
        model.visit(&mut |m| {
            self.param(m);
        });
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Like [`Graph::matmul`] but with order-independent inner sums.
    pub fn matmul_exact(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_exact(self.value(b))?;
        Ok(self.push(v, Op::MatMulExact(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNt(a, b)))
    }

    /// Elementwise sum; `b` may broadcast as a scalar, a row or a column.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("add", self.value(a), self.value(b))?;
        let v = bcast_apply(self.value(a), self.value(b), kind, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("sub", self.value(a), self.value(b))?;
        let v = bcast_apply(self.value(a), self.value(b), kind, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product with broadcasting of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("mul", self.value(a), self.value(b))?;
        let v = bcast_apply(self.value(a), self.value(b), kind, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = bcast_kind("div", self.value(a), self.value(b))?;
        let v = bcast_apply(self.value(a), self.value(b), kind, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all entries as a 1x1 node. Empty input gives 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).data().len();
        let s = self.sum(a);
        if n == 0 {
            s
        } else {
            self.scale(s, 1.0 / n as f64)
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&values)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&values)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(idx)?;
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec())))
    }

    /// Places row `i` of `a` at row `idx[i]` of an `n`-row zero matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let src = self.value(a);
        if idx.len() != src.rows() {
            return Err(Error::dim("scatter_rows", "index count differs from row count"));
        }
        let mut seen = vec![false; n];
        let mut out = Matrix::zeros(n, src.cols());
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= n || seen[dst] {
                return Err(Error::dim("scatter_rows", format!("bad target row {dst}")));
            }
            seen[dst] = true;
            out.row_mut(dst).copy_from_slice(src.row(i));
        }
        Ok(self.push(out, Op::ScatterRows(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Mean binary cross-entropy of `logits` against constant `targets`,
    /// evaluated in the overflow-free form `max(z,0) − z·t + ln(1+e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Matrix) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::dim("bce_with_logits", "targets shape differs"));
        }
        let n = z.data().len();
        let acc = exact_sum(
            z.data()
                .iter()
                .zip(targets.data())
                .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()),
        );
        let v = Matrix::scalar(if n == 0 { 0.0 } else { acc / n as f64 });
        Ok(self.push(v, Op::BceWithLogits(logits, targets.clone())))
    }

    /// Gradients of the 1x1 node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim("backward", "loss must be 1x1"));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) | Op::MatMulExact(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let bv = self.value(*b);
                    let kind = bcast_kind("add", self.value(*a), bv)?;
                    let mut gb = bcast_reduce(&g, kind, bv.shape());
                    if matches!(node.op, Op::Sub(..)) {
                        gb = gb.scale(-1.0);
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let kind = bcast_kind("mul", av, bv)?;
                    let ga = bcast_apply(&g, bv, kind, |x, y| x * y);
                    let gb = bcast_reduce(&g.zip_map(av, |x, y| x * y)?, kind, bv.shape());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let kind = bcast_kind("div", av, bv)?;
                    let ga = bcast_apply(&g, bv, kind, |x, y| x / y);
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let t = bcast_apply(&g.zip_map(&node.value, |x, y| -x * y)?, bv, kind, |x, y| {
                        x / y
                    });
                    let gb = bcast_reduce(&t, kind, bv.shape());
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })?;
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y))?;
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?;
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, s)| x * s).sum();
                        for ((o, &gv), &s) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = s * (gv - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(r, c, g.data()[0]));
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        acc(&mut grads, p, g.slice_rows(start, rows)?);
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        acc(&mut grads, p, g.slice_cols(start, cols)?);
                        start += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..g.rows() {
                        ga.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, &v) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterRows(a, idx) => {
                    acc(&mut grads, *a, g.gather_rows(idx)?);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, g.reshape(r, c)?);
                }
                Op::BceWithLogits(a, t) => {
                    let z = self.value(*a);
                    let n = z.data().len().max(1) as f64;
                    let scale = g.data()[0] / n;
                    let ga = z.zip_map(t, |x, y| (sigmoid(x) - y) * scale)?;
                    acc(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every tensor of `model`, in visit order. Tensors that
    /// never entered the tape get zeros of the matching shape.
    pub fn param_grads<M: Parameterized + ?Sized>(&self, grads: &Gradients, model: &M) -> Vec<Matrix> {
        let mut out = Vec::new();
        model.visit(&mut |m| {
            let g = self
                .params
                .get(&(m as *const Matrix))
                .and_then(|&v| grads.wrt(v).cloned())
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            out.push(g);
        });
        out
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` influences it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(&Matrix) -> f64>(f: F, x: &Matrix) -> Matrix {
        let eps = 1e-6;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn check_unary(build: impl Fn(&mut Graph, Var) -> Var, x: Matrix) {
        let eval = |m: &Matrix| {
            let mut g = Graph::new();
            let v = g.constant(m.clone());
            let y = build(&mut g, v);
            g.value(y).item().unwrap()
        };
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = build(&mut g, v);
        let grads = g.backward(y).unwrap();
        let analytic = grads.wrt(v).unwrap();
        let numeric = fd(eval, &x);
        assert!(analytic.max_abs_diff(&numeric) < 1e-7, "{analytic:?} vs {numeric:?}");
    }

    fn sample() -> Matrix {
        Matrix::from_rows(&[vec![0.3, -1.2, 0.7], vec![1.5, 0.2, -0.4]]).unwrap()
    }

    #[test]
    fn elementwise_ops_backprop() {
        let w = Matrix::from_rows(&[vec![0.5, -0.3, 1.1], vec![0.9, 0.4, -0.8]]).unwrap();
        check_unary(
            |g, x| {
                let s = g.sigmoid(x);
                let t = g.tanh(s);
                let w = g.constant(w.clone());
                let m = g.mul(t, w).unwrap();
                g.sum(m)
            },
            sample(),
        );
        check_unary(
            |g, x| {
                let r = g.relu(x);
                let s = g.scale(r, 3.0);
                g.mean(s)
            },
            sample(),
        );
    }

    #[test]
    fn broadcast_ops_backprop() {
        let row = Matrix::from_rows(&[vec![0.2, 0.5, -0.1]]).unwrap();
        let col = Matrix::from_rows(&[vec![1.7], vec![-0.6]]).unwrap();
        check_unary(
            |g, x| {
                let r = g.constant(row.clone());
                assert!(g.add(r, x).is_err());
                let y = g.add(x, r).unwrap();
                let c = g.constant(col.clone());
                let z = g.mul(y, c).unwrap();
                let z2 = g.mul(z, z).unwrap();
                g.sum(z2)
            },
            sample(),
        );
        // gradient flowing into the broadcast operand itself
        check_unary(
            |g, x| {
                let big = g.constant(sample());
                let r = g.slice_rows(x, 0, 1).unwrap();
                let y = g.sub(big, r).unwrap();
                let c = g.slice_cols(x, 0, 1).unwrap();
                let z = g.div(y, c).unwrap();
                let s = g.slice_cols(x, 1, 1).unwrap();
                let s = g.slice_rows(s, 1, 1).unwrap();
                let z = g.mul(z, s).unwrap();
                let z = g.mul(z, z).unwrap();
                g.sum(z)
            },
            Matrix::from_rows(&[vec![0.8, -1.2, 0.7], vec![1.5, 0.9, -0.4]]).unwrap(),
        );
    }

    #[test]
    fn structural_ops_backprop() {
        let w = Matrix::from_rows(&[vec![0.3, 0.1], vec![-0.2, 0.6], vec![0.5, -0.9]]).unwrap();
        check_unary(
            |g, x| {
                let w = g.constant(w.clone());
                let y = g.matmul(x, w).unwrap();
                let sm = g.softmax_rows(y);
                let cat = g.concat_cols(&[sm, x]).unwrap();
                let cat = g.concat_rows(&[cat, cat]).unwrap();
                let gathered = g.gather_rows(cat, &[3, 0, 0]).unwrap();
                let sc = g.scatter_rows(gathered, &[2, 0, 1], 4).unwrap();
                let rs = g.reshape(sc, 5, 4).unwrap();
                let nt = g.matmul_nt(rs, rs).unwrap();
                let nt = g.tanh(nt);
                g.sum(nt)
            },
            sample(),
        );
    }

    #[test]
    fn bce_matches_finite_differences() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).unwrap();
        check_unary(|g, x| g.bce_with_logits(x, &t).unwrap(), sample());
        let mut g = Graph::new();
        let z = g.constant(Matrix::from_rows(&[vec![800.0, -800.0]]).unwrap());
        let l = g
            .bce_with_logits(z, &Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        assert!(g.value(l).item().unwrap() < 1e-12);
    }

    #[test]
    fn param_registry_dedups_and_zero_fills() {
        let a = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let unused = Matrix::zeros(2, 3);
        struct Two(Matrix, Matrix);
        impl Parameterized for Two {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
                f(&self.0);
                f(&self.1);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
                f(&mut self.0);
                f(&mut self.1);
            }
        }
        let model = Two(a, unused);
        let mut g = Graph::new();
        let p1 = g.param(&model.0);
        let p2 = g.param(&model.0);
        assert_eq!(p1, p2);
        let y = g.mul(p1, p2).unwrap();
        let grads = g.backward(y).unwrap();
        let pg = g.param_grads(&grads, &model);
        assert_eq!(pg[0].item().unwrap(), 4.0);
        assert_eq!(pg[1], Matrix::zeros(2, 3));
    }
}
