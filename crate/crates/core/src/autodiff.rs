//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every node in creation order, which is a valid
//! topological order, so [`Graph::backward`] only has to sweep the tape once
//! from the root downwards. Shapes are checked when a node is created.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatVec(Var, Var),
    MatVecT(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Slice(Var, usize),
    Pick(Var, usize),
    Sum(Var),
    AddN(Vec<Var>),
    Mask(Var, Vec<f64>),
    DotConst(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape. Nodes are appended in creation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` is not a leaf reached from the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

fn check_vector(op: &'static str, a: &Tensor) -> Result<()> {
    if a.cols() != 1 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: (a.rows(), 1),
        });
    }
    Ok(())
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// `w x` for a matrix `w` and vector `x`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wm, xv) = (self.value(w), self.value(x));
        if xv.cols() != 1 || wm.cols() != xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: wm.shape(),
                rhs: xv.shape(),
            });
        }
        let out: Vec<f64> = (0..wm.rows()).map(|r| dot(wm.row(r), xv.data())).collect();
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x), ng))
    }

    /// `mᵀ x` for a `k x n` matrix and a `k`-vector.
    pub fn matvec_t(&mut self, m: Var, x: Var) -> Result<Var> {
        let (mm, xv) = (self.value(m), self.value(x));
        if xv.cols() != 1 || mm.rows() != xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                lhs: mm.shape(),
                rhs: xv.shape(),
            });
        }
        let mut out = vec![0.0; mm.cols()];
        for (r, &coef) in xv.data().iter().enumerate() {
            for (o, v) in out.iter_mut().zip(mm.row(r)) {
                *o += coef * v;
            }
        }
        let ng = self.ng(m) || self.ng(x);
        Ok(self.push(Tensor::vector(out), Op::MatVecT(m, x), ng))
    }

    /// `a bᵀ` for `k x n` and `m x n` matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: am.shape(),
                rhs: bm.shape(),
            });
        }
        let mut out = Tensor::zeros(am.rows(), bm.rows());
        for i in 0..am.rows() {
            for j in 0..bm.rows() {
                out.set(i, j, dot(am.row(i), bm.row(j)));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        check_same(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the vector `v` to every row of `m`.
    pub fn add_row_broadcast(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mm, vv) = (self.value(m), self.value(v));
        if vv.cols() != 1 || vv.rows() != mm.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: mm.shape(),
                rhs: vv.shape(),
            });
        }
        let mut out = mm.clone();
        let cols = mm.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += vv.data()[i % cols];
        }
        let ng = self.ng(m) || self.ng(v);
        Ok(self.push(out, Op::AddRowBroadcast(m, v), ng))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 - a` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map_op(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_op(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, sigmoid, Op::Sigmoid(a))
    }

    /// Multiplies every entry of `a` by the scalar node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(a),
                rhs: sv.shape(),
            });
        }
        let c = sv.item();
        let av = self.value(a);
        let data = av.data().iter().map(|x| c * x).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    /// Softmax over a vector, shifted by its maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        check_vector("softmax", self.value(a))?;
        let out = Tensor::vector(softmax_slice(self.value(a).data()));
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        check_vector("log_softmax", self.value(a))?;
        let x = self.value(a).data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let out = Tensor::vector(x.iter().map(|v| v - lse).collect());
        let ng = self.ng(a);
        Ok(self.push(out, Op::LogSoftmax(a), ng))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            check_vector("concat", self.value(p))?;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng))
    }

    /// Stacks equally sized vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or(Error::EmptyInput("stack_rows"))?;
        let n = self.value(first).rows();
        let mut data = Vec::with_capacity(n * rows.len());
        for &r in rows {
            let rv = self.value(r);
            if rv.shape() != (n, 1) {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: (n, 1),
                    rhs: rv.shape(),
                });
            }
            data.extend_from_slice(rv.data());
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        let out = Tensor::from_vec(rows.len(), n, data);
        Ok(self.push(out, Op::StackRows(rows.to_vec()), ng))
    }

    /// Row `idx` of a matrix as a vector (embedding lookup).
    pub fn row(&mut self, m: Var, idx: usize) -> Result<Var> {
        let mm = self.value(m);
        if idx >= mm.rows() {
            return Err(Error::InvalidArgument(format!(
                "row {idx} out of range for {:?}",
                mm.shape()
            )));
        }
        let out = Tensor::vector(mm.row(idx).to_vec());
        let ng = self.ng(m);
        Ok(self.push(out, Op::Row(m, idx), ng))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        check_vector("slice", av)?;
        if start + len > av.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: av.shape(),
                rhs: (start + len, 1),
            });
        }
        let out = Tensor::vector(av.data()[start..start + len].to_vec());
        let ng = self.ng(a);
        Ok(self.push(out, Op::Slice(a, start), ng))
    }

    /// Entry `idx` of a vector as a scalar.
    pub fn pick(&mut self, a: Var, idx: usize) -> Result<Var> {
        let av = self.value(a);
        check_vector("pick", av)?;
        if idx >= av.rows() {
            return Err(Error::InvalidArgument(format!(
                "index {idx} out of range for {:?}",
                av.shape()
            )));
        }
        let out = Tensor::scalar(av.data()[idx]);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Pick(a, idx), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Sum of equally shaped nodes.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms.first().ok_or(Error::EmptyInput("add_n"))?;
        let mut out = self.value(first).clone();
        for &t in &terms[1..] {
            check_same("add_n", &out, self.value(t))?;
            out.axpy(1.0, self.value(t));
        }
        let ng = terms.iter().any(|&t| self.ng(t));
        Ok(self.push(out, Op::AddN(terms.to_vec()), ng))
    }

    /// Elementwise product with a fixed mask.
    pub fn mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: av.shape(),
                rhs: (mask.len(), 1),
            });
        }
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Mask(a, mask), ng))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::InvalidArgument(format!("dropout rate {rate}")));
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask(a, mask)
    }

    /// `Σ a_i c_i` for a constant `c`. Backpropagating through it injects
    /// exactly `c` as the upstream gradient of `a`.
    pub fn dot_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if c.len() != av.len() {
            return Err(Error::ShapeMismatch {
                op: "dot_const",
                lhs: av.shape(),
                rhs: (c.len(), 1),
            });
        }
        let s = dot(av.data(), &c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::DotConst(a, c), ng))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Constant => unreachable!("constants never need gradients"),
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            } else if grads[i].is_none() {
                let (r, c) = node.value.shape();
                grads[i] = Some(Tensor::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Tensor)| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            let t = slot.get_or_insert_with(|| {
                let (r, c) = self.nodes[v.0].value.shape();
                Tensor::zeros(r, c)
            });
            f(t);
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                acc(*w, &mut |t| {
                    let cols = wv.cols();
                    for (r, gr) in gd.iter().enumerate() {
                        let row = &mut t.data_mut()[r * cols..(r + 1) * cols];
                        for (o, xi) in row.iter_mut().zip(xv.data()) {
                            *o += gr * xi;
                        }
                    }
                });
                acc(*x, &mut |t| {
                    for (r, gr) in gd.iter().enumerate() {
                        for (o, wi) in t.data_mut().iter_mut().zip(wv.row(r)) {
                            *o += gr * wi;
                        }
                    }
                });
            }
            Op::MatVecT(m, x) => {
                let (mv, xv) = (self.value(*m), self.value(*x));
                acc(*m, &mut |t| {
                    let cols = mv.cols();
                    for (r, xr) in xv.data().iter().enumerate() {
                        let row = &mut t.data_mut()[r * cols..(r + 1) * cols];
                        for (o, gj) in row.iter_mut().zip(gd) {
                            *o += xr * gj;
                        }
                    }
                });
                acc(*x, &mut |t| {
                    for (r, o) in t.data_mut().iter_mut().enumerate() {
                        *o += dot(mv.row(r), gd);
                    }
                });
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |t| {
                    let cols = av.cols();
                    for i in 0..av.rows() {
                        let row = &mut t.data_mut()[i * cols..(i + 1) * cols];
                        for j in 0..bv.rows() {
                            let gij = g.get(i, j);
                            for (o, bj) in row.iter_mut().zip(bv.row(j)) {
                                *o += gij * bj;
                            }
                        }
                    }
                });
                acc(*b, &mut |t| {
                    let cols = bv.cols();
                    for j in 0..bv.rows() {
                        let row = &mut t.data_mut()[j * cols..(j + 1) * cols];
                        for i in 0..av.rows() {
                            let gij = g.get(i, j);
                            for (o, ai) in row.iter_mut().zip(av.row(i)) {
                                *o += gij * ai;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |t| t.axpy(1.0, g));
                acc(*b, &mut |t| t.axpy(1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |t| t.axpy(1.0, g));
                acc(*b, &mut |t| t.axpy(-1.0, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |t| {
                    for ((o, gi), bi) in t.data_mut().iter_mut().zip(gd).zip(bv.data()) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |t| {
                    for ((o, gi), ai) in t.data_mut().iter_mut().zip(gd).zip(av.data()) {
                        *o += gi * ai;
                    }
                });
            }
            Op::AddRowBroadcast(m, v) => {
                acc(*m, &mut |t| t.axpy(1.0, g));
                acc(*v, &mut |t| {
                    let cols = t.len();
                    for (i, gi) in gd.iter().enumerate() {
                        t.data_mut()[i % cols] += gi;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |t| t.axpy(*c, g)),
            Op::OneMinus(a) => acc(*a, &mut |t| t.axpy(-1.0, g)),
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                let av = self.value(*a);
                acc(*a, &mut |t| t.axpy(c, g));
                acc(*s, &mut |t| t.data_mut()[0] += dot(gd, av.data()));
            }
            Op::Tanh(a) => acc(*a, &mut |t| {
                for ((o, gi), yi) in t.data_mut().iter_mut().zip(gd).zip(y.data()) {
                    *o += gi * (1.0 - yi * yi);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |t| {
                for ((o, gi), yi) in t.data_mut().iter_mut().zip(gd).zip(y.data()) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            Op::Softmax(a) => {
                let gy = dot(gd, y.data());
                acc(*a, &mut |t| {
                    for ((o, gi), yi) in t.data_mut().iter_mut().zip(gd).zip(y.data()) {
                        *o += yi * (gi - gy);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let gsum: f64 = gd.iter().sum();
                acc(*a, &mut |t| {
                    for ((o, gi), yi) in t.data_mut().iter_mut().zip(gd).zip(y.data()) {
                        *o += gi - yi.exp() * gsum;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |t| {
                        for (o, gi) in t.data_mut().iter_mut().zip(&gd[offset..offset + n]) {
                            *o += gi;
                        }
                    });
                    offset += n;
                }
            }
            Op::StackRows(rows) => {
                for (r, &v) in rows.iter().enumerate() {
                    acc(v, &mut |t| {
                        for (o, gi) in t.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gi;
                        }
                    });
                }
            }
            Op::Row(m, idx) => acc(*m, &mut |t| {
                let cols = t.cols();
                for (o, gi) in t.data_mut()[idx * cols..(idx + 1) * cols].iter_mut().zip(gd) {
                    *o += gi;
                }
            }),
            Op::Slice(a, start) => acc(*a, &mut |t| {
                for (o, gi) in t.data_mut()[*start..*start + gd.len()].iter_mut().zip(gd) {
                    *o += gi;
                }
            }),
            Op::Pick(a, idx) => acc(*a, &mut |t| t.data_mut()[*idx] += gd[0]),
            Op::Sum(a) => acc(*a, &mut |t| {
                for o in t.data_mut() {
                    *o += gd[0];
                }
            }),
            Op::AddN(terms) => {
                for &v in terms {
                    acc(v, &mut |t| t.axpy(1.0, g));
                }
            }
            Op::Mask(a, mask) => acc(*a, &mut |t| {
                for ((o, gi), m) in t.data_mut().iter_mut().zip(gd).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::DotConst(a, c) => acc(*a, &mut |t| {
                for (o, ci) in t.data_mut().iter_mut().zip(c) {
                    *o += gd[0] * ci;
                }
            }),
        }
    }
}

/// Compares the reverse-mode gradient of a scalar program with respect to one
/// input against central differences with step `h`.
///
/// Returns the maximum over entries of `|analytic - numeric| / max(1, |analytic|)`.
pub fn check_gradient<F>(program: F, leaf: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut graph = Graph::new();
    let x = graph.leaf(leaf.clone());
    let root = program(&mut graph, x)?;
    let analytic = graph.backward(root)?.take(x).expect("leaf gradient");

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let root = program(&mut g, x)?;
        Ok(g.scalar(root))
    };

    let mut worst = 0.0_f64;
    for i in 0..leaf.len() {
        let mut plus = leaf.clone();
        plus.data_mut()[i] += h;
        let mut minus = leaf.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> Var {
        g.leaf(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0, 0.0, 0.0]);
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn tanh_matches_scalar_math() {
        let input = [-1.3, 0.2, 2.7];
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &input);
        let y = g.tanh(x);
        for (out, inp) in g.value(y).data().iter().zip(input) {
            assert!((out - inp.tanh()).abs() <= 1e-12);
        }
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(3.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 3.0);
        assert_eq!(grads.wrt(y).unwrap().item(), 2.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let v = vec_leaf(&mut g, &[0.3, -1.2, 2.0, 0.1]);
        let s = g.softmax(v).unwrap();
        let root = g.sum(s);
        let grads = g.backward(root).unwrap();
        for &d in grads.wrt(v).unwrap().data() {
            assert!(d.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let v = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(v), Err(Error::NonScalarRoot((2, 1)))));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`add`") && msg.contains("(2, 1)") && msg.contains("(3, 1)"), "{msg}");
        let w = g.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            g.matvec(w, b),
            Err(Error::ShapeMismatch { op: "matvec", .. })
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x through one node used three times.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.5));
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let y = g.add(sq, lin).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.wrt(x).unwrap().item() - (2.0 * 1.5 + 3.0)).abs() < 1e-15);

        // Manual duplication: two distinct leaves with the same value.
        let mut g2 = Graph::new();
        let a = g2.leaf(Tensor::scalar(1.5));
        let b = g2.leaf(Tensor::scalar(1.5));
        let c = g2.leaf(Tensor::scalar(1.5));
        let sq = g2.mul(a, b).unwrap();
        let lin = g2.scale(c, 3.0);
        let y2 = g2.add(sq, lin).unwrap();
        let gr = g2.backward(y2).unwrap();
        let total = gr.wrt(a).unwrap().item() + gr.wrt(b).unwrap().item() + gr.wrt(c).unwrap().item();
        assert_eq!(total, grads.wrt(x).unwrap().item());
    }

    #[test]
    fn check_gradient_linear_is_exact() {
        let w = Tensor::from_rows(&[[1.0, -2.0, 0.5]]);
        for h in [1e-3, 1e-5, 0.5] {
            let err = check_gradient(
                |g, x| {
                    let wv = g.constant(w.clone());
                    let y = g.matvec(wv, x)?;
                    Ok(g.sum(y))
                },
                &Tensor::vector(vec![0.3, 0.1, -0.7]),
                h,
            )
            .unwrap();
            assert!(err <= 1e-9, "h={h}: {err}");
        }
    }

    #[test]
    fn check_gradient_sigmoid_chain() {
        let err = check_gradient(
            |g, x| {
                let a = g.sigmoid(x);
                let b = g.sigmoid(a);
                let c = g.mul(a, b)?;
                Ok(g.sum(c))
            },
            &Tensor::vector(vec![0.4, -1.1, 2.3]),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn check_gradient_constant_program() {
        let err = check_gradient(
            |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
            &Tensor::vector(vec![1.0, 2.0]),
            1e-5,
        );
        // The root is a constant: it is not connected to the leaf.
        assert_eq!(err.unwrap(), 0.0);
    }

    #[test]
    fn check_gradient_rejects_bad_step() {
        let res = check_gradient(|g, x| Ok(g.sum(x)), &Tensor::scalar(1.0), 0.0);
        assert!(res.is_err());
    }

    #[test]
    fn two_layer_tanh_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = Tensor::uniform(5, 3, 1.0, &mut rng);
        let w2 = Tensor::uniform(2, 5, 1.0, &mut rng);
        let input = Tensor::uniform(3, 1, 1.0, &mut rng);
        let program = |w1: &Tensor, w2: &Tensor, leaf_is: usize| {
            let (w1, w2, input) = (w1.clone(), w2.clone(), input.clone());
            move |g: &mut Graph, x: Var| -> Result<Var> {
                let (a, b, c) = match leaf_is {
                    0 => (x, g.constant(w2.clone()), g.constant(input.clone())),
                    _ => (g.constant(w1.clone()), x, g.constant(input.clone())),
                };
                let h = g.matvec(a, c)?;
                let h = g.tanh(h);
                let o = g.matvec(b, h)?;
                let o = g.tanh(o);
                let sq = g.mul(o, o)?;
                Ok(g.sum(sq))
            }
        };
        assert!(check_gradient(program(&w1, &w2, 0), &w1, 1e-5).unwrap() <= 1e-4);
        assert!(check_gradient(program(&w1, &w2, 1), &w2, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn dropout_is_identity_at_zero_rate_and_inverted_otherwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0; 1000]));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        for &v in g.value(y).data() {
            assert!(v == 0.0 || v == 2.0);
        }
        let mean: f64 = g.value(y).data().iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
    }
}
