//! Append-only operation record with reverse-mode gradient propagation.
//!
//! Every operation validates shapes, computes its value eagerly and pushes a
//! node. [`Graph::backward`] walks the nodes in reverse recording order once,
//! so a node's gradient is complete before it is propagated to its inputs.

use super::conv::{self, Conv3dSpec, ConvGeometry};
use super::gemm::gemm;
use super::param::{ParamId, ParamSet};
use super::{axis_split, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        query: Var,
        memory: Var,
        weights: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// Operation record for one forward evaluation.
///
/// Parameters are borrowed from a [`ParamSet`] rather than copied; the set
/// must outlive the graph and stays immutable while the graph exists.
pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            record: true,
        }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that evaluates values only; nothing needed for backward is kept.
    pub fn inference(params: &'p ParamSet) -> Self {
        Graph {
            record: false,
            ..Self::with_params(params)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .params
                .expect("parameter node without a parameter set")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &Shape {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Gradients with respect to it are reported by
    /// [`Gradients::get`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let params = self
            .params
            .ok_or_else(|| Error::UnknownParameter(format!("#{}", id.0)))?;
        if id.0 >= params.len() {
            return Err(Error::UnknownParameter(format!("#{}", id.0)));
        }
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().clone(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s (e.g. a bias over
    /// the last axis).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        check_suffix("add_broadcast", self.shape(x), self.shape(b), 0)?;
        let bias = self.value(b).data();
        let tx = self.value(x);
        let n = bias.len();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let t = Tensor::from_parts(tx.shape().clone(), data);
        Ok(self.push(t, Op::AddBroadcast(x, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x).map(|v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    /// Matrix product over the last two axes. `b` is either a single `[k, n]`
    /// matrix shared across all leading axes of `a`, or has the same leading
    /// axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let da = self.shape(a).dims().to_vec();
        let db = self.shape(b).dims().to_vec();
        if da.len() < 2 || db.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank ≥ 2, got {da:?} and {db:?}"),
            ));
        }
        let (m, k) = (da[da.len() - 2], da[da.len() - 1]);
        let (kb, n) = (db[db.len() - 2], db[db.len() - 1]);
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {da:?} · {db:?}"),
            ));
        }
        let lead = &da[..da.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = db.len() == 2;
        if !shared_rhs && &db[..db.len() - 2] != lead {
            return Err(Error::shape(
                "matmul",
                format!("batch extents differ: {da:?} · {db:?}"),
            ));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (ta, tb) = (self.value(a).data(), self.value(b).data());
            if shared_rhs {
                gemm(batch * m, k, n, ta, false, tb, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &ta[i * m * k..(i + 1) * m * k],
                        false,
                        &tb[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        let mut dims = lead.to_vec();
        dims.extend([m, n]);
        let t = Tensor::from_parts(Shape::from_dims_unchecked(dims), out);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let dims = self.shape(x).dims().to_vec();
        if dims.len() < 2 {
            return Err(Error::shape("transpose", format!("rank < 2: {dims:?}")));
        }
        let (rows, cols) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let batch = dims[..dims.len() - 2].iter().product();
        let data = transpose_batched(self.value(x).data(), batch, rows, cols);
        let mut out_dims = dims;
        let r = out_dims.len();
        out_dims.swap(r - 2, r - 1);
        let t = Tensor::from_parts(Shape::from_dims_unchecked(out_dims), data);
        Ok(self.push(
            t,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(dims)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).dims().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let d = self.shape(p).dims();
            let compatible = d.len() == base.len()
                && d.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(ax, (x, y))| ax == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{d:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += d[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let t = Tensor::from_parts(Shape::from_dims_unchecked(dims), data);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let dims = self.shape(x).dims().to_vec();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} on axis {axis} of {dims:?}", start + len),
            ));
        }
        let (outer, extent, inner) = axis_split(&dims, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * extent + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_dims = dims;
        out_dims[axis] = len;
        let t = Tensor::from_parts(Shape::from_dims_unchecked(out_dims), data);
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::scalar(tx.sum() / tx.len() as f64);
        self.push(t, Op::Mean(x))
    }

    /// Mean over all elements of `(a − b)²`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// Numerically stable softmax along `axis` (max subtracted before `exp`).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.shape(x).dims().to_vec();
        if axis >= dims.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {dims:?}"),
            ));
        }
        let (outer, extent, inner) = axis_split(&dims, axis);
        let mut data = self.value(x).data().to_vec();
        if inner == 1 {
            softmax_rows(&mut data, extent);
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * extent + j) * inner + i;
                    let max = (0..extent)
                        .map(|j| data[at(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..extent {
                        let e = exp_nonpositive(data[at(j)] - max);
                        data[at(j)] = e;
                        total += e;
                    }
                    for j in 0..extent {
                        data[at(j)] /= total;
                    }
                }
            }
        }
        let t = Tensor::from_parts(Shape::from_dims_unchecked(dims), data);
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// `softmax(Q·Mᵀ)·M` per batch entry, for `Q` `[B, P, C]` and `M`
    /// `[B, K, C]` serving as both keys and values; returns `[B, P, C]`.
    /// Equivalent to `matmul(softmax(matmul(q, transpose(m)), 2), m)` but
    /// evaluated in row blocks, storing only the attention weights.
    pub fn attention(&mut self, query: Var, memory: Var) -> Result<Var> {
        let dq = self.shape(query).dims().to_vec();
        let dm = self.shape(memory).dims().to_vec();
        if dq.len() != 3 || dm.len() != 3 || dq[0] != dm[0] || dq[2] != dm[2] {
            return Err(Error::shape(
                "attention",
                format!("expected [B, P, C] and [B, K, C], got {dq:?} and {dm:?}"),
            ));
        }
        let (batch, p, c, k) = (dq[0], dq[1], dq[2], dm[1]);
        let mut weights = vec![0.0; batch * p * k];
        let mut out = vec![0.0; batch * p * c];
        {
            let (tq, tm) = (self.value(query).data(), self.value(memory).data());
            for b in 0..batch {
                let qb = &tq[b * p * c..(b + 1) * p * c];
                let mb = &tm[b * k * c..(b + 1) * k * c];
                for r0 in (0..p).step_by(ATTENTION_BLOCK) {
                    let rows = ATTENTION_BLOCK.min(p - r0);
                    let w = &mut weights[(b * p + r0) * k..(b * p + r0 + rows) * k];
                    gemm(rows, c, k, &qb[r0 * c..(r0 + rows) * c], false, mb, true, w, false);
                    softmax_rows(w, k);
                    let o = &mut out[(b * p + r0) * c..(b * p + r0 + rows) * c];
                    gemm(rows, k, c, w, false, mb, false, o, false);
                }
            }
        }
        let t = Tensor::from_parts(Shape::from_dims_unchecked(dq), out);
        if !self.record {
            return Ok(self.push(t, Op::Leaf));
        }
        Ok(self.push(
            t,
            Op::Attention {
                query,
                memory,
                weights,
            },
        ))
    }

    /// Per-sample normalization over all non-leading axes (a rank-1 input is a
    /// single sample), followed by `γ·x̂ + β`. `γ` and `β` share one shape,
    /// which must be a trailing suffix of the normalized axes.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let dims = self.shape(x).dims().to_vec();
        let skip = usize::from(dims.len() > 1);
        check_suffix("layer_norm", self.shape(x), self.shape(gamma), skip)?;
        self.same_shape("layer_norm", gamma, beta)?;
        let samples = if dims.len() > 1 { dims[0] } else { 1 };
        let tx = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let width = tx.len() / samples;
        let mut out = vec![0.0; tx.len()];
        let mut means = Vec::with_capacity(samples);
        let mut rstds = Vec::with_capacity(samples);
        for s in 0..samples {
            let row = &tx[s * width..(s + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (e, (&v, o)) in row.iter().zip(&mut out[s * width..]).enumerate() {
                let p = e % g.len();
                *o = (v - mean) * rstd * g[p] + b[p];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::from_parts(Shape::from_dims_unchecked(dims), out);
        let op = if self.record {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(t, op))
    }

    /// 3D convolution of a `[B, D, H, W, Cin]` input with a
    /// `[kd, kh, kw, Cin, Cout]` kernel and optional `[Cout]` bias.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: Conv3dSpec,
    ) -> Result<Var> {
        let geom = conv::geometry(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let (out, cols) = conv::conv3d_unrolled(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let op = if self.record {
            Op::Conv3d {
                input,
                kernel,
                bias,
                geom,
                cols,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, op))
    }

    /// Propagates `∂loss/∂·` back through every node recorded before `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::InvalidInput(
                "backward on a graph built in inference mode".into(),
            ));
        }
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(Error::NotScalar(loss_shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(loss_shape.clone(), vec![1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let gd = g.data();
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    add_into(self.buf(&mut grads, *a), gd, 1.0);
                    add_into(self.buf(&mut grads, *b), gd, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(self.buf(&mut grads, *a), gd, 1.0);
                    add_into(self.buf(&mut grads, *b), gd, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    for ((dst, &gi), &y) in self.buf(&mut grads, *a).iter_mut().zip(gd).zip(vb) {
                        *dst += gi * y;
                    }
                    for ((dst, &gi), &x) in self.buf(&mut grads, *b).iter_mut().zip(gd).zip(va) {
                        *dst += gi * x;
                    }
                }
                Op::AddBroadcast(x, b) => {
                    add_into(self.buf(&mut grads, *x), gd, 1.0);
                    let gb = self.buf(&mut grads, *b);
                    let n = gb.len();
                    for (e, &gi) in gd.iter().enumerate() {
                        gb[e % n] += gi;
                    }
                }
                Op::Scale(x, factor) => add_into(self.buf(&mut grads, *x), gd, *factor),
                Op::Sigmoid(x) => {
                    let y = self.node_value(i).data();
                    for ((dst, &gi), &yi) in self.buf(&mut grads, *x).iter_mut().zip(gd).zip(y) {
                        *dst += gi * yi * (1.0 - yi);
                    }
                }
                Op::Tanh(x) => {
                    let y = self.node_value(i).data();
                    for ((dst, &gi), &yi) in self.buf(&mut grads, *x).iter_mut().zip(gd).zip(y) {
                        *dst += gi * (1.0 - yi * yi);
                    }
                }
                Op::Relu(x) => {
                    let y = self.node_value(i).data();
                    for ((dst, &gi), &yi) in self.buf(&mut grads, *x).iter_mut().zip(gd).zip(y) {
                        if yi > 0.0 {
                            *dst += gi;
                        }
                    }
                }
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    shared_rhs,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    if *shared_rhs {
                        let ga = self.buf(&mut grads, *a);
                        gemm(batch * m, n, k, gd, false, vb, true, ga, true);
                        let gb = self.buf(&mut grads, *b);
                        gemm(k, batch * m, n, va, true, gd, false, gb, true);
                    } else {
                        let ga = self.buf(&mut grads, *a);
                        for s in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gd[s * m * n..(s + 1) * m * n],
                                false,
                                &vb[s * k * n..(s + 1) * k * n],
                                true,
                                &mut ga[s * m * k..(s + 1) * m * k],
                                true,
                            );
                        }
                        let gb = self.buf(&mut grads, *b);
                        for s in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &va[s * m * k..(s + 1) * m * k],
                                true,
                                &gd[s * m * n..(s + 1) * m * n],
                                false,
                                &mut gb[s * k * n..(s + 1) * k * n],
                                true,
                            );
                        }
                    }
                }
                Op::Transpose {
                    x,
                    batch,
                    rows,
                    cols,
                } => {
                    let back = transpose_batched(gd, *batch, *cols, *rows);
                    add_into(self.buf(&mut grads, *x), &back, 1.0);
                }
                Op::Reshape(x) => add_into(self.buf(&mut grads, *x), gd, 1.0),
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = axis_split(g.dims(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let extent = self.shape(p).dims()[*axis];
                        let block = extent * inner;
                        let gp = self.buf(&mut grads, p);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(&mut gp[o * block..(o + 1) * block], &gd[from..from + block], 1.0);
                        }
                        offset += extent;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (outer, extent, inner) = axis_split(self.shape(*x).dims(), *axis);
                    let len = g.dims()[*axis];
                    let gx = self.buf(&mut grads, *x);
                    for o in 0..outer {
                        let to = (o * extent + start) * inner;
                        add_into(
                            &mut gx[to..to + len * inner],
                            &gd[o * len * inner..(o + 1) * len * inner],
                            1.0,
                        );
                    }
                }
                Op::Sum(x) => {
                    let g0 = gd[0];
                    self.buf(&mut grads, *x).iter_mut().for_each(|d| *d += g0);
                }
                Op::Mean(x) => {
                    let gx = self.buf(&mut grads, *x);
                    let g0 = gd[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += g0);
                }
                Op::Softmax { x, axis } => {
                    let y = self.node_value(i).data();
                    let (outer, extent, inner) = axis_split(g.dims(), *axis);
                    if inner == 1 {
                        let mut local = vec![0.0; gd.len()];
                        for ((dst, gr), yr) in local
                            .chunks_exact_mut(extent)
                            .zip(gd.chunks_exact(extent))
                            .zip(y.chunks_exact(extent))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                                *d = yi * (gi - dot);
                            }
                        }
                        self.give(&mut grads, *x, local);
                        continue;
                    }
                    let gx = self.buf(&mut grads, *x);
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |j: usize| (o * extent + j) * inner + c;
                            let dot: f64 = (0..extent).map(|j| gd[at(j)] * y[at(j)]).sum();
                            for j in 0..extent {
                                gx[at(j)] += y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
                Op::Attention {
                    query,
                    memory,
                    weights,
                } => {
                    let dq = self.shape(*query).dims();
                    let (batch, p, c) = (dq[0], dq[1], dq[2]);
                    let k = self.shape(*memory).dims()[1];
                    let (tq, tm) = (self.value(*query).data(), self.value(*memory).data());
                    let mut gq = vec![0.0; tq.len()];
                    let mut gm = vec![0.0; tm.len()];
                    let mut gs = vec![0.0; ATTENTION_BLOCK * k];
                    for b in 0..batch {
                        let qb = &tq[b * p * c..(b + 1) * p * c];
                        let mb = &tm[b * k * c..(b + 1) * k * c];
                        let gmb = &mut gm[b * k * c..(b + 1) * k * c];
                        for r0 in (0..p).step_by(ATTENTION_BLOCK) {
                            let rows = ATTENTION_BLOCK.min(p - r0);
                            let w = &weights[(b * p + r0) * k..(b * p + r0 + rows) * k];
                            let go = &gd[(b * p + r0) * c..(b * p + r0 + rows) * c];
                            let s = &mut gs[..rows * k];
                            // ∂/∂weights, then memory as values.
                            gemm(rows, c, k, go, false, mb, true, s, false);
                            gemm(k, rows, c, w, true, go, false, gmb, true);
                            for (sr, wr) in s.chunks_exact_mut(k).zip(w.chunks_exact(k)) {
                                let dot: f64 = sr.iter().zip(wr).map(|(a, b)| a * b).sum();
                                for (sv, &wv) in sr.iter_mut().zip(wr) {
                                    *sv = wv * (*sv - dot);
                                }
                            }
                            // Scores to query and to memory as keys.
                            let qr = &qb[r0 * c..(r0 + rows) * c];
                            gemm(rows, k, c, s, false, mb, false, &mut gq[(b * p + r0) * c..(b * p + r0 + rows) * c], true);
                            gemm(k, rows, c, s, true, qr, false, gmb, true);
                        }
                    }
                    self.give(&mut grads, *query, gq);
                    self.give(&mut grads, *memory, gm);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let vx = self.value(*x).data();
                    let vg = self.value(*gamma).data();
                    let samples = mean.len();
                    let width = vx.len() / samples;
                    let plen = vg.len();
                    let mut gx_local = vec![0.0; vx.len()];
                    let mut g_gamma = vec![0.0; plen];
                    let mut g_beta = vec![0.0; plen];
                    for s in 0..samples {
                        let range = s * width..(s + 1) * width;
                        let (mu, r) = (mean[s], rstd[s]);
                        let mut mean_gxhat = 0.0;
                        let mut mean_gxhat_xhat = 0.0;
                        for (e, (&v, &gi)) in vx[range.clone()].iter().zip(&gd[range.clone()]).enumerate() {
                            let p = e % plen;
                            let xhat = (v - mu) * r;
                            let gxhat = gi * vg[p];
                            g_gamma[p] += gi * xhat;
                            g_beta[p] += gi;
                            mean_gxhat += gxhat;
                            mean_gxhat_xhat += gxhat * xhat;
                        }
                        mean_gxhat /= width as f64;
                        mean_gxhat_xhat /= width as f64;
                        for (e, ((&v, &gi), dst)) in vx[range.clone()]
                            .iter()
                            .zip(&gd[range.clone()])
                            .zip(&mut gx_local[range])
                            .enumerate()
                        {
                            let xhat = (v - mu) * r;
                            let gxhat = gi * vg[e % plen];
                            *dst = r * (gxhat - mean_gxhat - xhat * mean_gxhat_xhat);
                        }
                    }
                    add_into(self.buf(&mut grads, *x), &gx_local, 1.0);
                    add_into(self.buf(&mut grads, *gamma), &g_gamma, 1.0);
                    add_into(self.buf(&mut grads, *beta), &g_beta, 1.0);
                }
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    geom,
                    cols,
                } => {
                    let rows = geom.rows();
                    let patch = geom.patch();
                    let c_out = geom.c_out;
                    if let Some(b) = bias {
                        let gb = self.buf(&mut grads, *b);
                        for row in gd.chunks_exact(c_out) {
                            add_into(gb, row, 1.0);
                        }
                    }
                    let gk = self.buf(&mut grads, *kernel);
                    gemm(patch, rows, c_out, cols, true, gd, false, gk, true);
                    let mut gcols = vec![0.0; rows * patch];
                    gemm(
                        rows,
                        c_out,
                        patch,
                        gd,
                        false,
                        self.value(*kernel).data(),
                        true,
                        &mut gcols,
                        false,
                    );
                    geom.col2im(&gcols, self.buf(&mut grads, *input));
                }
            }
        }

        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn node_value(&self, i: usize) -> &Tensor {
        self.value(Var(i))
    }

    /// Adds a freshly computed gradient for `v`, taking ownership when `v`
    /// has no gradient yet.
    fn give(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        match &mut grads[v.0] {
            Some(t) => add_into(t.data_mut(), &data, 1.0),
            slot => *slot = Some(Tensor::from_parts(self.shape(v).clone(), data)),
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros_like_shape(self.shape(v)))
            .data_mut()
    }
}

/// Gradients of one backward pass, kept for inputs and parameters.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Query rows per block of the fused attention; keeps a block of scores
/// cache-resident between the score product, softmax and value product.
const ATTENTION_BLOCK: usize = 32;

/// In-place softmax of each contiguous row of `extent` values.
fn softmax_rows(data: &mut [f64], extent: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just detected on the running CPU.
        unsafe { softmax_rows_avx2(data, extent) };
        return;
    }
    softmax_rows_portable(data, extent);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn softmax_rows_avx2(data: &mut [f64], extent: usize) {
    softmax_rows_portable(data, extent);
}

#[inline(always)]
fn softmax_rows_portable(data: &mut [f64], extent: usize) {
    for row in data.chunks_exact_mut(extent) {
        let max = lanes(row, f64::NEG_INFINITY, |m, v| if v > m { v } else { m });
        for v in row.iter_mut() {
            *v = exp_nonpositive(*v - max);
        }
        let inv = 1.0 / lanes(row, 0.0, |a, v| a + v);
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Reduction over four interleaved accumulators, so the loop vectorizes.
#[inline(always)]
fn lanes(xs: &[f64], init: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    let mut acc = [init; 4];
    let chunks = xs.chunks_exact(4);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..4 {
            acc[k] = f(acc[k], c[k]);
        }
    }
    let mut out = f(f(acc[0], acc[1]), f(acc[2], acc[3]));
    for &v in tail {
        out = f(out, v);
    }
    out
}

/// `exp(x)` for `x ≤ 0`, within a few ulp of the libm value; flushes to zero
/// below −708. Branch-free so slice loops vectorize.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    const COEFFS: [f64; 13] = [
        1.0 / 6_227_020_800.0,
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
    ];
    // Adding 1.5·2^52 rounds to the nearest integer and leaves it in the low
    // mantissa bits, avoiding float-to-int conversions that block vectorizing.
    const ROUND: f64 = 6_755_399_441_055_744.0;
    let clamped = x.max(-708.0);
    let shifted = clamped * INV_LN2 + ROUND;
    let k = shifted - ROUND;
    let r = (clamped - k * LN2_HI) - k * LN2_LO;
    let mut p = COEFFS[0];
    for c in &COEFFS[1..] {
        p = p * r + c;
    }
    p = p * r + 1.0;
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    if x < -708.0 {
        0.0
    } else {
        p * scale
    }
}

fn add_into(dst: &mut [f64], src: &[f64], alpha: f64) {
    debug_assert_eq!(dst.len(), src.len());
    if alpha == 1.0 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += alpha * s;
        }
    }
}

fn transpose_batched(src: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let block = rows * cols;
    for b in 0..batch {
        let (s, d) = (&src[b * block..(b + 1) * block], &mut out[b * block..(b + 1) * block]);
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}

/// `small` must equal the trailing axes of `big` after skipping `skip` leading axes.
fn check_suffix(op: &'static str, big: &Shape, small: &Shape, skip: usize) -> Result<()> {
    let (b, s) = (big.dims(), small.dims());
    let ok = s.len() + skip <= b.len() && b[b.len() - s.len()..] == *s;
    if !ok {
        return Err(Error::shape(
            op,
            format!("{small} does not broadcast over {big}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::exp_nonpositive;

    #[test]
    fn exp_kernel_matches_libm() {
        let mut x = 0.0;
        while x > -700.0 {
            let (fast, exact) = (exp_nonpositive(x), x.exp());
            assert!(((fast - exact) / exact).abs() < 4e-16, "x = {x}: {fast} vs {exact}");
            x -= 0.013_7;
        }
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(-800.0), 0.0);
        assert_eq!(exp_nonpositive(f64::NEG_INFINITY), 0.0);
    }
}
