//! Wengert tape: forward ops record nodes, `backward` replays them in
//! reverse. Parents always precede children, so one reverse sweep visits
//! each node exactly once.

use super::{broadcast_expand, broadcast_shape, reduce_to_shape, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Scale(usize, T),
    AddScalar(usize, T),
    ClampMin(usize, T),
    Huber(usize, T),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    SliceRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    UpsampleNearest {
        input: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recorded computation. Gradients accumulate across `backward` calls until
/// [`Tape::zero_grads`] resets them.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Leaves are the gradient targets.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<VarId> {
        self.push("leaf", Op::Leaf, value)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient for `id`, zeros until a backward pass has
    /// reached it.
    pub fn grad(&self, id: VarId) -> Tensor<T> {
        Tensor::new(
            self.nodes[id.0].value.shape().to_vec(),
            self.grads[id.0].clone(),
        )
        .expect("grad buffer matches node shape")
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x = T::zero();
            }
        }
    }

    fn push(&mut self, name: &'static str, op: Op<T>, value: Tensor<T>) -> Result<VarId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.grads.push(vec![T::zero(); value.numel()]);
        self.nodes.push(Node { op, value });
        Ok(VarId(id))
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let out = if sa == sb {
            let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let da = broadcast_expand(self.nodes[a.0].value.data(), &sa, &out_shape);
            let db = broadcast_expand(self.nodes[b.0].value.data(), &sb, &out_shape);
            da.iter().zip(&db).map(|(&x, &y)| f(x, y)).collect()
        };
        self.push(name, op, Tensor::new(out_shape, out)?)
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: VarId,
        op: Op<T>,
        f: impl Fn(T) -> T,
    ) -> Result<VarId> {
        let value = self.nodes[a.0].value.map(f);
        self.push(name, op, value)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("div", a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    /// 2-D matrix product `(m×k)·(k×n) → m×n`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        self.push("matmul", Op::Matmul(a.0, b.0), Tensor::new(vec![m, n], out)?)
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Op::Transpose(a.0), Tensor::new(vec![c, r], out)?)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unary("exp", a, Op::Exp(a.0), |x| x.exp())
    }

    /// Natural log. Callers clamp nonpositive inputs first; a nonpositive
    /// element surfaces as a non-finite error here rather than propagating.
    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        self.unary("log", a, Op::Log(a.0), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.unary("sigmoid", a, Op::Sigmoid(a.0), |x| {
            T::one() / (T::one() + (-x).exp())
        })
    }

    pub fn sqrt(&mut self, a: VarId) -> Result<VarId> {
        self.unary("sqrt", a, Op::Sqrt(a.0), |x| x.sqrt())
    }

    pub fn scale(&mut self, a: VarId, c: T) -> Result<VarId> {
        self.unary("scale", a, Op::Scale(a.0, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: VarId, c: T) -> Result<VarId> {
        self.unary("add_scalar", a, Op::AddScalar(a.0, c), |x| x + c)
    }

    /// `max(x, c)`: the epsilon floor under norms and denominators.
    pub fn clamp_min(&mut self, a: VarId, c: T) -> Result<VarId> {
        self.unary("clamp_min", a, Op::ClampMin(a.0, c), |x| x.max(c))
    }

    /// Elementwise Huber penalty: `x²/2` inside `|x| ≤ delta`, linear outside.
    pub fn huber(&mut self, a: VarId, delta: T) -> Result<VarId> {
        if delta <= T::zero() {
            return Err(Error::invalid("huber delta must be positive"));
        }
        self.unary("huber", a, Op::Huber(a.0, delta), |x| {
            let ax = x.abs();
            if ax <= delta {
                T::c(0.5) * x * x
            } else {
                delta * (ax - T::c(0.5) * delta)
            }
        })
    }

    /// Softmax over the last axis of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.is_empty() || sa.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: sa,
                rhs: vec![],
            });
        }
        let cols = *sa.last().unwrap();
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        for (row_in, row_out) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                sum = sum + *o;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        self.push("softmax", Op::Softmax(a.0), Tensor::new(sa, out)?)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push("sum", Op::Sum(a.0), Tensor::scalar(s))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let n = self.nodes[a.0].value.numel();
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        self.push("mean", Op::Mean(a.0), Tensor::scalar(s / T::c(n as f64)))
    }

    /// Sum a 2-D tensor along `axis`, keeping the reduced dim as size 1.
    pub fn sum_axis(&mut self, a: VarId, axis: usize) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                lhs: sa,
                rhs: vec![axis],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.nodes[a.0].value.data();
        let (shape, out) = if axis == 0 {
            let mut out = vec![T::zero(); c];
            for row in src.chunks(c) {
                for (o, &x) in out.iter_mut().zip(row) {
                    *o = *o + x;
                }
            }
            (vec![1, c], out)
        } else {
            let out = src
                .chunks(c)
                .map(|row| row.iter().fold(T::zero(), |acc, &x| acc + x))
                .collect();
            (vec![r, 1], out)
        };
        self.push("sum_axis", Op::SumAxis(a.0, axis), Tensor::new(shape, out)?)
    }

    /// Gather rows of a 2-D tensor.
    pub fn slice_rows(&mut self, a: VarId, rows: &[usize]) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!(
                "slice_rows: row {bad} out of bounds for {r} rows"
            )));
        }
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            "slice_rows",
            Op::SliceRows(a.0, rows.to_vec()),
            Tensor::new(vec![rows.len(), c], out)?,
        )
    }

    /// Stack two 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = self.nodes[a.0].value.data().to_vec();
        out.extend_from_slice(self.nodes[b.0].value.data());
        self.push(
            "concat_rows",
            Op::ConcatRows(a.0, b.0),
            Tensor::new(vec![sa[0] + sb[0], sa[1]], out)?,
        )
    }

    /// Nearest-neighbor upsampling. Each row of `a` is an `h×w` grid; every
    /// cell is replicated into a `factor×factor` block.
    pub fn upsample_nearest(
        &mut self,
        a: VarId,
        h: usize,
        w: usize,
        factor: usize,
    ) -> Result<VarId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[1] != h * w || factor == 0 {
            return Err(Error::ShapeMismatch {
                op: "upsample_nearest",
                lhs: sa,
                rhs: vec![h, w, factor],
            });
        }
        let rows = sa[0];
        let (oh, ow) = (h * factor, w * factor);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); rows * oh * ow];
        for r in 0..rows {
            let src_row = &src[r * h * w..(r + 1) * h * w];
            let dst_row = &mut out[r * oh * ow..(r + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    dst_row[y * ow + x] = src_row[(y / factor) * w + (x / factor)];
                }
            }
        }
        self.push(
            "upsample_nearest",
            Op::UpsampleNearest {
                input: a.0,
                h,
                w,
                factor,
            },
            Tensor::new(vec![rows, oh * ow], out)?,
        )
    }

    /// Reverse sweep from a scalar `loss`. Contributions add into the
    /// per-node accumulators read by [`Tape::grad`].
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        // Local buffers so repeated backward calls each propagate a fresh
        // unit seed; results accumulate into self.grads at the end.
        let mut local: Vec<Vec<T>> = self
            .nodes
            .iter()
            .map(|n| vec![T::zero(); n.value.numel()])
            .collect();
        local[loss.0][0] = T::one();

        for i in (0..=loss.0).rev() {
            if local[i].iter().all(|&g| g == T::zero()) {
                continue;
            }
            let grad = std::mem::take(&mut local[i]);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    local[i] = grad;
                    continue;
                }
                Op::Add(a, b) => {
                    self.backprop_linear(&mut local, i, a, &grad, T::one());
                    self.backprop_linear(&mut local, i, b, &grad, T::one());
                }
                Op::Sub(a, b) => {
                    self.backprop_linear(&mut local, i, a, &grad, T::one());
                    self.backprop_linear(&mut local, i, b, &grad, -T::one());
                }
                Op::Mul(a, b) => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let (sa, sb) = (
                        self.nodes[a].value.shape().to_vec(),
                        self.nodes[b].value.shape().to_vec(),
                    );
                    let ea = broadcast_expand(self.nodes[a].value.data(), &sa, &out_shape);
                    let eb = broadcast_expand(self.nodes[b].value.data(), &sb, &out_shape);
                    let da: Vec<T> = grad.iter().zip(&eb).map(|(&g, &y)| g * y).collect();
                    let db: Vec<T> = grad.iter().zip(&ea).map(|(&g, &x)| g * x).collect();
                    accumulate(&mut local[a], &reduce_to_shape(&da, &out_shape, &sa));
                    accumulate(&mut local[b], &reduce_to_shape(&db, &out_shape, &sb));
                }
                Op::Div(a, b) => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let (sa, sb) = (
                        self.nodes[a].value.shape().to_vec(),
                        self.nodes[b].value.shape().to_vec(),
                    );
                    let ea = broadcast_expand(self.nodes[a].value.data(), &sa, &out_shape);
                    let eb = broadcast_expand(self.nodes[b].value.data(), &sb, &out_shape);
                    let da: Vec<T> = grad.iter().zip(&eb).map(|(&g, &y)| g / y).collect();
                    let db: Vec<T> = grad
                        .iter()
                        .zip(ea.iter().zip(&eb))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    accumulate(&mut local[a], &reduce_to_shape(&da, &out_shape, &sa));
                    accumulate(&mut local[b], &reduce_to_shape(&db, &out_shape, &sb));
                }
                Op::Matmul(a, b) => {
                    let sa = self.nodes[a].value.shape().to_vec();
                    let sb = self.nodes[b].value.shape().to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let av = self.nodes[a].value.data();
                    let bv = self.nodes[b].value.data();
                    // dA[i,p] = Σ_j g[i,j]·B[p,j]; dB[p,j] = Σ_i A[i,p]·g[i,j]
                    let mut da = vec![T::zero(); m * k];
                    for i_r in 0..m {
                        let g_row = &grad[i_r * n..(i_r + 1) * n];
                        let da_row = &mut da[i_r * k..(i_r + 1) * k];
                        for p in 0..k {
                            let b_row = &bv[p * n..(p + 1) * n];
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + g_row[j] * b_row[j];
                            }
                            da_row[p] = acc;
                        }
                    }
                    let mut db = vec![T::zero(); k * n];
                    for i_r in 0..m {
                        let g_row = &grad[i_r * n..(i_r + 1) * n];
                        let a_row = &av[i_r * k..(i_r + 1) * k];
                        for p in 0..k {
                            let w = a_row[p];
                            if w == T::zero() {
                                continue;
                            }
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                db_row[j] = db_row[j] + w * g_row[j];
                            }
                        }
                    }
                    accumulate(&mut local[a], &da);
                    accumulate(&mut local[b], &db);
                }
                Op::Transpose(a) => {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let (r, c) = (out_shape[0], out_shape[1]);
                    let mut da = vec![T::zero(); r * c];
                    for y in 0..r {
                        for x in 0..c {
                            da[x * r + y] = grad[y * c + x];
                        }
                    }
                    accumulate(&mut local[a], &da);
                }
                Op::Exp(a) => {
                    let out = self.nodes[i].value.data();
                    let da: Vec<T> = grad.iter().zip(out).map(|(&g, &e)| g * e).collect();
                    accumulate(&mut local[a], &da);
                }
                Op::Log(a) => {
                    let src = self.nodes[a].value.data();
                    let da: Vec<T> = grad.iter().zip(src).map(|(&g, &x)| g / x).collect();
                    accumulate(&mut local[a], &da);
                }
                Op::Sigmoid(a) => {
                    let out = self.nodes[i].value.data();
                    let da: Vec<T> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &s)| g * s * (T::one() - s))
                        .collect();
                    accumulate(&mut local[a], &da);
                }
                Op::Sqrt(a) => {
                    let out = self.nodes[i].value.data();
                    let da: Vec<T> = grad
                        .iter()
                        .zip(out)
                        .map(|(&g, &s)| g / (T::c(2.0) * s))
                        .collect();
                    accumulate(&mut local[a], &da);
                }
                Op::Scale(a, c) => {
                    self.backprop_linear(&mut local, i, a, &grad, c);
                }
                Op::AddScalar(a, _) => {
                    self.backprop_linear(&mut local, i, a, &grad, T::one());
                }
                Op::ClampMin(a, c) => {
                    // Subgradient: pass-through on x >= c, zero below.
                    let src = self.nodes[a].value.data();
                    let da: Vec<T> = grad
                        .iter()
                        .zip(src)
                        .map(|(&g, &x)| if x >= c { g } else { T::zero() })
                        .collect();
                    accumulate(&mut local[a], &da);
                }
                Op::Huber(a, delta) => {
                    let src = self.nodes[a].value.data();
                    let da: Vec<T> = grad
                        .iter()
                        .zip(src)
                        .map(|(&g, &x)| {
                            if x.abs() <= delta {
                                g * x
                            } else {
                                g * delta * x.signum()
                            }
                        })
                        .collect();
                    accumulate(&mut local[a], &da);
                }
                Op::Softmax(a) => {
                    let out = self.nodes[i].value.data();
                    let cols = *self.nodes[i].value.shape().last().unwrap();
                    let mut da = vec![T::zero(); out.len()];
                    for ((s_row, g_row), d_row) in out
                        .chunks(cols)
                        .zip(grad.chunks(cols))
                        .zip(da.chunks_mut(cols))
                    {
                        let dot = s_row
                            .iter()
                            .zip(g_row)
                            .fold(T::zero(), |acc, (&s, &g)| acc + s * g);
                        for ((d, &s), &g) in d_row.iter_mut().zip(s_row).zip(g_row) {
                            *d = s * (g - dot);
                        }
                    }
                    accumulate(&mut local[a], &da);
                }
                Op::Sum(a) => {
                    let g = grad[0];
                    for x in local[a].iter_mut() {
                        *x = *x + g;
                    }
                }
                Op::Mean(a) => {
                    let n = T::c(self.nodes[a].value.numel() as f64);
                    let g = grad[0] / n;
                    for x in local[a].iter_mut() {
                        *x = *x + g;
                    }
                }
                Op::SumAxis(a, axis) => {
                    let sa = self.nodes[a].value.shape().to_vec();
                    let (r, c) = (sa[0], sa[1]);
                    let buf = &mut local[a];
                    if axis == 0 {
                        for y in 0..r {
                            for x in 0..c {
                                buf[y * c + x] = buf[y * c + x] + grad[x];
                            }
                        }
                    } else {
                        for y in 0..r {
                            for x in 0..c {
                                buf[y * c + x] = buf[y * c + x] + grad[y];
                            }
                        }
                    }
                }
                Op::SliceRows(a, rows) => {
                    let c = self.nodes[a].value.shape()[1];
                    let buf = &mut local[a];
                    for (k_r, &src_row) in rows.iter().enumerate() {
                        for x in 0..c {
                            buf[src_row * c + x] = buf[src_row * c + x] + grad[k_r * c + x];
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let na = self.nodes[a].value.numel();
                    accumulate(&mut local[a], &grad[..na]);
                    accumulate(&mut local[b], &grad[na..]);
                }
                Op::UpsampleNearest { input, h, w, factor } => {
                    let rows = self.nodes[input].value.shape()[0];
                    let (oh, ow) = (h * factor, w * factor);
                    let buf = &mut local[input];
                    for r in 0..rows {
                        let g_row = &grad[r * oh * ow..(r + 1) * oh * ow];
                        let d_row = &mut buf[r * h * w..(r + 1) * h * w];
                        for y in 0..oh {
                            for x in 0..ow {
                                let s = (y / factor) * w + (x / factor);
                                d_row[s] = d_row[s] + g_row[y * ow + x];
                            }
                        }
                    }
                }
            }
        }

        for (acc, l) in self.grads.iter_mut().zip(&local) {
            if !l.is_empty() {
                accumulate(acc, l);
            }
        }
        if self.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(())
    }

    fn backprop_linear(
        &self,
        local: &mut [Vec<T>],
        node: usize,
        parent: usize,
        grad: &[T],
        coeff: T,
    ) {
        let out_shape = self.nodes[node].value.shape().to_vec();
        let ps = self.nodes[parent].value.shape().to_vec();
        if ps == out_shape && coeff == T::one() {
            accumulate(&mut local[parent], grad);
        } else {
            let scaled: Vec<T> = grad.iter().map(|&g| g * coeff).collect();
            accumulate(&mut local[parent], &reduce_to_shape(&scaled, &out_shape, &ps));
        }
    }
}

fn accumulate<T: Scalar>(target: &mut [T], src: &[T]) {
    for (t, &s) in target.iter_mut().zip(src) {
        *t = *t + s;
    }
}

/// `(m×k)·(k×n)` with i-k-j loop order so the inner loop runs over
/// contiguous rows.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
    out
}
