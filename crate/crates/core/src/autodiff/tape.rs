use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::{min_image_component, BinGrid};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScalarMul(Var, S),
    AddScalar(Var),
    Relu(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    Clamp(Var, S, S),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    SegmentMean(Var, Rc<[usize]>, Rc<[usize]>),
    L2Norm(Var),
    Cosine(Var, Var),
    MinImage(Var),
    SoftHistogram(Var, Rc<[usize]>, Rc<[BinGrid<S>]>),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Operations take `&self`; nodes are appended in execution order, so parents
/// always precede children and a single reverse sweep is a valid backward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape { op, left, right }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].tracked)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as fixed data.
    pub fn constant(&self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    pub fn value_ref(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// First element; the value of a `1 x 1` result.
    pub fn scalar(&self, v: Var) -> S {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn unary(&self, a: Var, op: Op<S>, f: impl Fn(&Tensor<S>) -> Tensor<S>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.0].value)
        };
        let t = self.tracked(&[a]);
        self.push(out, op, t)
    }

    fn elementwise(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(shape_err(name, x.shape(), y.shape()));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::new(x.rows(), x.cols(), data)?
        };
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, op, t))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// `a [n, k] + b [1, k]`, broadcasting `b` over rows.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if y.rows() != 1 || y.cols() != x.cols() {
                return Err(shape_err("add_row", x.shape(), y.shape()));
            }
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, &v) in out.row_mut(r).iter_mut().zip(y.data()) {
                    *o += v;
                }
            }
            out
        };
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), t))
    }

    pub fn scalar_mul(&self, a: Var, c: S) -> Var {
        self.unary(a, Op::ScalarMul(a, c), |x| x.map(|v| v * c))
    }

    pub fn add_scalar(&self, a: Var, c: S) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x.map(|v| v + c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scalar_mul(a, -S::one())
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| {
            x.map(|v| if v > S::zero() { v } else { S::zero() })
        })
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x.map(|v| v * sigmoid(v)))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.map(|v| v.exp()))
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.map(|v| v.ln()))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self, a: Var) -> Var {
        self.unary(a, Op::Softmax(a), |x| {
            let mut out = x.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            out
        })
    }

    /// Clamp into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&self, a: Var, lo: S, hi: S) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.map(|v| v.max(lo).min(hi)))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::Sum(a), |x| Tensor::scalar(x.sum()))
    }

    pub fn mean(&self, a: Var) -> Var {
        self.unary(a, Op::Mean(a), |x| {
            let n = S::from_usize_lossy(x.len().max(1));
            Tensor::scalar(x.sum() / n)
        })
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat of zero tensors"));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rows() != rows {
                    return Err(shape_err(
                        "concat",
                        nodes[parts[0].0].value.shape(),
                        v.shape(),
                    ));
                }
                cols += v.cols();
            }
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut c0 = 0;
                for p in parts {
                    let v = &nodes[p.0].value;
                    out.row_mut(r)[c0..c0 + v.cols()].copy_from_slice(v.row(r));
                    c0 += v.cols();
                }
            }
            out
        };
        let t = self.tracked(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), t))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if start >= end || end > x.cols() {
                return Err(shape_err("slice_cols", x.shape(), (start, end)));
            }
            let mut out = Tensor::zeros(x.rows(), end - start);
            for r in 0..x.rows() {
                out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
            }
            out
        };
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), t))
    }

    /// Row gather: `out[k] = a[index[k]]`.
    pub fn index_gather(&self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = Tensor::zeros(index.len(), x.cols());
            for (k, &i) in index.iter().enumerate() {
                if i >= x.rows() {
                    return Err(shape_err("index_gather", x.shape(), (i, 0)));
                }
                out.row_mut(k).copy_from_slice(x.row(i));
            }
            out
        };
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::Gather(a, index), t))
    }

    fn check_segments(&self, a: Var, ids: &[usize], n: usize) -> Result<()> {
        let rows = self.shape(a).0;
        if ids.len() != rows {
            return Err(shape_err("segment", self.shape(a), (ids.len(), 1)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::arg(format!("segment id {bad} out of range 0..{n}")));
        }
        Ok(())
    }

    fn segment_sum_value(x: &Tensor<S>, ids: &[usize], n: usize) -> Tensor<S> {
        let mut out = Tensor::zeros(n, x.cols());
        for (r, &s) in ids.iter().enumerate() {
            for (o, &v) in out.row_mut(s).iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Sums rows into `n_segments` buckets.
    pub fn segment_sum(&self, a: Var, ids: Rc<[usize]>, n_segments: usize) -> Result<Var> {
        self.check_segments(a, &ids, n_segments)?;
        let out = Self::segment_sum_value(&self.value_ref(a), &ids, n_segments);
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, ids), t))
    }

    /// Averages rows per bucket; empty buckets yield zero rows.
    pub fn segment_mean(&self, a: Var, ids: Rc<[usize]>, n_segments: usize) -> Result<Var> {
        self.check_segments(a, &ids, n_segments)?;
        let mut counts = vec![0usize; n_segments];
        for &s in ids.iter() {
            counts[s] += 1;
        }
        let mut out = Self::segment_sum_value(&self.value_ref(a), &ids, n_segments);
        for (s, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv = S::one() / S::from_usize_lossy(c);
                for v in out.row_mut(s) {
                    *v *= inv;
                }
            }
        }
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::SegmentMean(a, ids, counts.into()), t))
    }

    /// Row-wise Euclidean norm, `[n, k] -> [n, 1]`.
    pub fn l2_norm(&self, a: Var) -> Var {
        self.unary(a, Op::L2Norm(a), |x| {
            let data = (0..x.rows())
                .map(|r| x.row(r).iter().map(|&v| v * v).sum::<S>().sqrt())
                .collect();
            Tensor::column_vector(data)
        })
    }

    /// Row-pair cosine similarity, `[n, k] x [n, k] -> [n, 1]`. A zero-norm row is
    /// treated as orthogonal (cosine 0, zero gradient).
    pub fn cosine_similarity(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.shape() != y.shape() {
                return Err(shape_err("cosine_similarity", x.shape(), y.shape()));
            }
            let data = (0..x.rows())
                .map(|r| cosine_row(x.row(r), y.row(r)).0)
                .collect();
            Tensor::column_vector(data)
        };
        let t = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Cosine(a, b), t))
    }

    /// Maps each row of displacements `[n, 3]` to its minimum image under the
    /// per-row box lengths. Piecewise identity, so the gradient passes through.
    pub fn min_image(&self, a: Var, boxes: &Tensor<S>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.shape() != boxes.shape() || x.cols() != 3 {
                return Err(shape_err("min_image", x.shape(), boxes.shape()));
            }
            let data = x
                .data()
                .iter()
                .zip(boxes.data())
                .map(|(&v, &l)| min_image_component(v, l))
                .collect();
            Tensor::new(x.rows(), 3, data)?
        };
        let t = self.tracked(&[a]);
        Ok(self.push(out, Op::MinImage(a), t))
    }

    /// Soft radial histogram per segment. `distances` is `[P, 1]`; pair `p`
    /// belongs to histogram `segments[p]` evaluated on `grids[segments[p]]`.
    /// Each counted pair (0 < d <= r_max) contributes Gaussian weights that sum
    /// to one. Output is `[G, bins]`; all grids must share the bin count.
    pub fn soft_histogram(
        &self,
        distances: Var,
        segments: Rc<[usize]>,
        grids: Rc<[BinGrid<S>]>,
    ) -> Result<Var> {
        let bins = grids.first().map_or(0, |g| g.bins);
        if grids.iter().any(|g| g.bins != bins) || bins == 0 {
            return Err(Error::arg(
                "soft_histogram grids must share a positive bin count",
            ));
        }
        if self.shape(distances).1 != 1 {
            return Err(shape_err("soft_histogram", self.shape(distances), (0, 1)));
        }
        self.check_segments(distances, &segments, grids.len())?;
        let out = {
            let d = self.value_ref(distances);
            let mut out = Tensor::zeros(grids.len(), bins);
            let mut w = vec![S::zero(); bins];
            let mut slopes = vec![S::zero(); bins];
            for (p, &g) in segments.iter().enumerate() {
                let dist = d.data()[p];
                if !grids[g].counts(dist) {
                    continue;
                }
                grids[g].soft_weights(dist, &mut w, &mut slopes);
                for (o, &v) in out.row_mut(g).iter_mut().zip(&w) {
                    *o += v;
                }
            }
            out
        };
        let t = self.tracked(&[distances]);
        Ok(self.push(out, Op::SoftHistogram(distances, segments, grids), t))
    }

    /// Reverse sweep from a scalar `loss`. Leaves the loss does not reach get zero
    /// gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn cosine_row<S: Scalar>(x: &[S], y: &[S]) -> (S, S, S, S) {
    let dot: S = x.iter().zip(y).map(|(&a, &b)| a * b).sum();
    let nx = x.iter().map(|&a| a * a).sum::<S>().sqrt();
    let ny = y.iter().map(|&a| a * a).sum::<S>().sqrt();
    if nx == S::zero() || ny == S::zero() {
        (S::zero(), dot, nx, ny)
    } else {
        (dot / (nx * ny), dot, nx, ny)
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], nodes: &[Node<S>], v: Var, g: Tensor<S>) {
    if !nodes[v.0].tracked {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &Tensor<S>,
    grads: &mut [Option<Tensor<S>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[a.0].tracked {
                let ga = g.matmul(&val(*b).transpose()).expect("matmul grad shape");
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[b.0].tracked {
                let gb = val(*a).transpose().matmul(g).expect("matmul grad shape");
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (x, z) = (val(*a), val(*b));
            if nodes[a.0].tracked {
                let data = g
                    .data()
                    .iter()
                    .zip(z.data())
                    .map(|(&p, &q)| p * q)
                    .collect();
                accumulate(
                    grads,
                    nodes,
                    *a,
                    Tensor::new(g.rows(), g.cols(), data).unwrap(),
                );
            }
            if nodes[b.0].tracked {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&p, &q)| p * q)
                    .collect();
                accumulate(
                    grads,
                    nodes,
                    *b,
                    Tensor::new(g.rows(), g.cols(), data).unwrap(),
                );
            }
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[b.0].tracked {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(grads, nodes, *b, gb);
            }
        }
        Op::ScalarMul(a, c) => {
            let c = *c;
            accumulate(grads, nodes, *a, g.map(|v| v * c));
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::Relu(a) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                .collect();
            accumulate(
                grads,
                nodes,
                *a,
                Tensor::new(g.rows(), g.cols(), data).unwrap(),
            );
        }
        Op::Silu(a) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| {
                    let s = sigmoid(xv);
                    gv * s * (S::one() + xv * (S::one() - s))
                })
                .collect();
            accumulate(
                grads,
                nodes,
                *a,
                Tensor::new(g.rows(), g.cols(), data).unwrap(),
            );
        }
        Op::Exp(a) => {
            let data = g
                .data()
                .iter()
                .zip(y.data())
                .map(|(&gv, &yv)| gv * yv)
                .collect();
            accumulate(
                grads,
                nodes,
                *a,
                Tensor::new(g.rows(), g.cols(), data).unwrap(),
            );
        }
        Op::Log(a) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| gv / xv)
                .collect();
            accumulate(
                grads,
                nodes,
                *a,
                Tensor::new(g.rows(), g.cols(), data).unwrap(),
            );
        }
        Op::Softmax(a) => {
            let mut ga = Tensor::zeros(g.rows(), g.cols());
            for r in 0..g.rows() {
                let (gr, yr) = (g.row(r), y.row(r));
                let dot: S = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                for ((o, &gv), &yv) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { S::zero() })
                .collect();
            accumulate(
                grads,
                nodes,
                *a,
                Tensor::new(g.rows(), g.cols(), data).unwrap(),
            );
        }
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.data()[0]));
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            let n = S::from_usize_lossy((r * c).max(1));
            accumulate(grads, nodes, *a, Tensor::filled(r, c, g.data()[0] / n));
        }
        Op::Concat(parts) => {
            let mut c0 = 0;
            for p in parts {
                let pc = val(*p).cols();
                if nodes[p.0].tracked {
                    let mut gp = Tensor::zeros(g.rows(), pc);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + pc]);
                    }
                    accumulate(grads, nodes, *p, gp);
                }
                c0 += pc;
            }
        }
        Op::SliceCols(a, start) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            for r in 0..g.rows() {
                ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Gather(a, index) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            for (k, &i) in index.iter().enumerate() {
                for (o, &v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                    *o += v;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SegmentSum(a, ids) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            for (r, &s) in ids.iter().enumerate() {
                ga.row_mut(r).copy_from_slice(g.row(s));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SegmentMean(a, ids, counts) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            for (r, &s) in ids.iter().enumerate() {
                let inv = S::one() / S::from_usize_lossy(counts[s]);
                for (o, &v) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                    *o = v * inv;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::L2Norm(a) => {
            let x = val(*a);
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let n = y.data()[r];
                if n == S::zero() {
                    continue;
                }
                let scale = g.data()[r] / n;
                for (o, &v) in ga.row_mut(r).iter_mut().zip(x.row(r)) {
                    *o = v * scale;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Cosine(a, b) => {
            let (x, z) = (val(*a), val(*b));
            let mut ga = Tensor::zeros(x.rows(), x.cols());
            let mut gb = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let (cos, _dot, nx, nz) = cosine_row(x.row(r), z.row(r));
                if nx == S::zero() || nz == S::zero() {
                    continue;
                }
                let gr = g.data()[r];
                let inv = S::one() / (nx * nz);
                let (xr, zr) = (x.row(r), z.row(r));
                for c in 0..x.cols() {
                    ga.set(r, c, gr * (zr[c] * inv - cos * xr[c] / (nx * nx)));
                    gb.set(r, c, gr * (xr[c] * inv - cos * zr[c] / (nz * nz)));
                }
            }
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::MinImage(a) => accumulate(grads, nodes, *a, g.clone()),
        Op::SoftHistogram(dv, segments, grids) => {
            let d = val(*dv);
            let bins = grids[0].bins;
            let mut w = vec![S::zero(); bins];
            let mut slopes = vec![S::zero(); bins];
            let mut gd = Tensor::zeros(d.rows(), 1);
            for (p, &seg) in segments.iter().enumerate() {
                let dist = d.data()[p];
                if !grids[seg].counts(dist) {
                    continue;
                }
                grids[seg].soft_weights(dist, &mut w, &mut slopes);
                let mean_slope: S = w.iter().zip(&slopes).map(|(&a, &s)| a * s).sum();
                let grow = g.row(seg);
                let mut acc = S::zero();
                for b in 0..bins {
                    acc += grow[b] * w[b] * (slopes[b] - mean_slope);
                }
                gd.data_mut()[p] = acc;
            }
            accumulate(grads, nodes, *dv, gd);
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<(usize, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, for collecting parameter gradients without copies.
    pub fn take(&mut self, v: Var) -> Tensor<S> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

/// Rescales `grads` in place so their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: S) -> S {
    debug_assert!(max_norm > S::zero());
    let norm = grads.iter().map(|g| g.squared_norm()).sum::<S>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale(factor);
        }
    }
    norm
}
