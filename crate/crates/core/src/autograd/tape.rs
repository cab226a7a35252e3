use std::collections::HashMap;

use super::conv::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One anchor/positive/negative row triple for [`Tape::hinge_triplets`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    BandPool {
        input: Var,
        rows: (usize, usize),
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    L2Normalize {
        input: Var,
        eps: f64,
    },
    SoftmaxXent {
        logits: Var,
        rows: Vec<(usize, usize)>,
    },
    Hinge {
        input: Var,
        triples: Vec<Triple>,
        margin: f64,
    },
    WeightedSum {
        input: Var,
        weights: Tensor,
    },
    SumScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records a computation in topological order and differentiates it in reverse.
///
/// Nodes are only ever appended, so every operation's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<ParamId>,
    labels: HashMap<String, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by [`Tape::backward`], if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Handle to a stored parameter. Repeated calls with the same id return
    /// the same handle, so a parameter consumed twice is one node on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        self.param_order.push(id);
        v
    }

    /// Parameters registered on this tape, in order of first use.
    pub fn params_used(&self) -> &[ParamId] {
        &self.param_order
    }

    /// Attach a name to an intermediate value so callers can find it later.
    pub fn label(&mut self, name: impl Into<String>, v: Var) {
        self.labels.insert(name.into(), v);
    }

    pub fn labelled(&self, name: &str) -> Option<Var> {
        self.labels.get(name).copied()
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// 2D cross-correlation over `[N, C, H, W]` with weight `[O, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(
                "conv2d",
                format!("expected rank-4 input and weight, got {:?} and {:?}", xs, ws),
            );
        }
        if ws[2].is_multiple_of(2) || ws[3].is_multiple_of(2) {
            return shape_err("conv2d", format!("kernel {}x{} must have odd extents", ws[2], ws[3]));
        }
        self.conv_generic(
            "conv2d",
            input,
            weight,
            bias,
            [xs[0], xs[1], 1, xs[2], xs[3]],
            [ws[0], ws[1], 1, ws[2], ws[3]],
            [1, stride, stride],
            [0, padding, padding],
            false,
        )
    }

    /// 3D cross-correlation over `[N, G, D, H, W]` with weight `[G_out, G, kd, kh, kw]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return shape_err(
                "conv3d",
                format!("expected rank-5 input and weight, got {:?} and {:?}", xs, ws),
            );
        }
        self.conv_generic(
            "conv3d",
            input,
            weight,
            bias,
            [xs[0], xs[1], xs[2], xs[3], xs[4]],
            [ws[0], ws[1], ws[2], ws[3], ws[4]],
            stride,
            padding,
            true,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_generic(
        &mut self,
        name: &'static str,
        input: Var,
        weight: Var,
        bias: Var,
        xs: [usize; 5],
        ws: [usize; 5],
        stride: [usize; 3],
        pad: [usize; 3],
        volumetric: bool,
    ) -> Result<Var> {
        if stride.contains(&0) {
            return shape_err(name, "stride must be at least 1");
        }
        if xs[1] != ws[1] {
            return shape_err(
                name,
                format!("input has {} channels but weight expects {}", xs[1], ws[1]),
            );
        }
        let bs = self.shape(bias);
        if bs != [ws[0]] {
            return shape_err(name, format!("bias shape {:?}, expected [{}]", bs, ws[0]));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = ConvGeom::out_extent(xs[2 + a], ws[2 + a], stride[a], pad[a]).ok_or_else(|| {
                Error::Shape {
                    op: name,
                    detail: format!(
                        "kernel extent {} exceeds padded input extent {} on spatial axis {}",
                        ws[2 + a],
                        xs[2 + a] + 2 * pad[a],
                        a
                    ),
                }
            })?;
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            input: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad,
            output,
        };
        let data = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let shape = if volumetric {
            vec![xs[0], ws[0], output[0], output[1], output[2]]
        } else {
            vec![xs[0], ws[0], output[1], output[2]]
        };
        let value = Tensor::new(shape, data)?;
        self.push_op(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            },
            &[input, weight, bias],
            name,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push_op(value, Op::Relu(x), &[x], "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            );
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push_op(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let mut value = self.value(x).clone();
        value.scale(factor);
        self.push_op(value, Op::Scale(x, factor), &[x], "scale")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {} out of range for rank {}", axis, base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err(
                    "concat",
                    format!("{:?} incompatible with {:?} along axis {}", s, base, axis),
                );
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        self.push_op(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    /// Reinterpret the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_op(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Mean over rows `start..end` and all columns of `[N, C, H, W]`, giving `[N, C]`.
    pub fn band_avg_pool(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("band_avg_pool", format!("expected rank 4, got {:?}", s));
        }
        if start >= end || end > s[2] {
            return shape_err(
                "band_avg_pool",
                format!("row band {}..{} invalid for height {}", start, end, s[2]),
            );
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let count = ((end - start) * w) as f64;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let plane = &src[i * h * w..(i + 1) * h * w];
            *o = plane[start * w..end * w].iter().sum::<f64>() / count;
        }
        let value = Tensor::new(vec![n, c], out)?;
        self.push_op(
            value,
            Op::BandPool {
                input: x,
                rows: (start, end),
            },
            &[x],
            "band_avg_pool",
        )
    }

    /// Mean over all spatial positions of `[N, C, H, W]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let h = match self.shape(x) {
            [_, _, h, _] => *h,
            s => return shape_err("global_avg_pool", format!("expected rank 4, got {:?}", s)),
        };
        self.band_avg_pool(x, 0, h)
    }

    /// `x [N, in]`, `weight [out, in]`, `bias [out]` to `[N, out]`.
    pub fn fully_connected(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(bias) != [ws[0]] {
            return shape_err(
                "fully_connected",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    xs,
                    ws,
                    self.shape(bias)
                ),
            );
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            let xr = &xv[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wv[o * din..(o + 1) * din];
                out[i * dout + o] = bv[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![n, dout], out)?;
        self.push_op(
            value,
            Op::Linear {
                input: x,
                weight,
                bias,
            },
            &[x, weight, bias],
            "fully_connected",
        )
    }

    /// Row-wise `x / sqrt(|x|^2 + eps^2)` on `[N, d]` (or a single vector).
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("l2_normalize eps must be > 0, got {eps}")));
        }
        let (rows, cols) = rows_cols(self.shape(x), "l2_normalize")?;
        let mut value = self.value(x).clone();
        for r in value.data_mut().chunks_mut(cols).take(rows) {
            let n = (r.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        self.push_op(value, Op::L2Normalize { input: x, eps }, &[x], "l2_normalize")
    }

    /// Mean of `-log softmax(logits[row])[target]` over `(row, target)` pairs.
    pub fn softmax_cross_entropy(&mut self, logits: Var, rows: &[(usize, usize)]) -> Result<Var> {
        let (n, k) = rows_cols(self.shape(logits), "softmax_cross_entropy")?;
        if rows.is_empty() {
            return shape_err("softmax_cross_entropy", "no samples");
        }
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for &(r, t) in rows {
            if r >= n {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    detail: format!("row {r} out of range for {n} samples"),
                });
            }
            if t >= k {
                return Err(Error::Index {
                    op: "softmax_cross_entropy",
                    detail: format!("target {t} out of range for {k} classes"),
                });
            }
            let row = &lv[r * k..(r + 1) * k];
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / rows.len() as f64);
        self.push_op(
            value,
            Op::SoftmaxXent {
                logits,
                rows: rows.to_vec(),
            },
            &[logits],
            "softmax_cross_entropy",
        )
    }

    /// `sum_t max(0, margin + D(x_a, x_p) - D(x_a, x_n))` with `D(u, v) = |u - v|^2 / 2`
    /// over rows of `x [N, d]`.
    pub fn hinge_triplets(&mut self, x: Var, triples: &[Triple], margin: f64) -> Result<Var> {
        let (n, d) = rows_cols(self.shape(x), "hinge_triplets")?;
        let xv = self.value(x);
        let mut total = 0.0;
        for t in triples {
            if t.anchor >= n || t.positive >= n || t.negative >= n {
                return Err(Error::Index {
                    op: "hinge_triplets",
                    detail: format!("{:?} out of range for {} rows", t, n),
                });
            }
            total += hinge_term(xv, d, t, margin).max(0.0);
        }
        let value = Tensor::scalar(total);
        self.push_op(
            value,
            Op::Hinge {
                input: x,
                triples: triples.to_vec(),
                margin,
            },
            &[x],
            "hinge_triplets",
        )
    }

    /// `sum(weights * x)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", self.shape(x), weights.shape()),
            );
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        self.push_op(Tensor::scalar(s), Op::WeightedSum { input: x, weights }, &[x], "weighted_sum")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let w = Tensor::full(self.shape(x), 1.0);
        self.weighted_sum(x, w)
    }

    /// Left-to-right sum of scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &v in xs {
            let t = self.value(v);
            if t.len() != 1 {
                return shape_err("sum_scalars", format!("non-scalar input {:?}", t.shape()));
            }
            total += t.item();
        }
        self.push_op(Tensor::scalar(total), Op::SumScalars(xs.to_vec()), xs, "sum_scalars")
    }

    /// Reverse pass from a scalar. Gradients are added to whatever earlier
    /// calls left behind; use [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            g.check_finite("backward")?;
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut send = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                );
                send(*input, Tensor::new(self.shape(*input).to_vec(), gi)?);
                send(*weight, Tensor::new(self.shape(*weight).to_vec(), gw)?);
                send(*bias, Tensor::new(self.shape(*bias).to_vec(), gb)?);
            }
            Op::Relu(x) => {
                let mut out = g.clone();
                for (o, v) in out.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if *v <= 0.0 {
                        *o = 0.0;
                    }
                }
                send(*x, out);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Scale(x, f) => {
                let mut out = g.clone();
                out.scale(*f);
                send(*x, out);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.shape(v);
                    let block = vs[*axis] * inner;
                    let row = shape[*axis] * inner;
                    let mut part = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * row + offset;
                        part.extend_from_slice(&g.data()[start..start + block]);
                    }
                    offset += block;
                    send(v, Tensor::new(vs.to_vec(), part)?);
                }
            }
            Op::Reshape(x) => {
                send(*x, g.clone().reshape(self.shape(*x))?);
            }
            Op::BandPool { input, rows } => {
                let s = self.shape(*input);
                let (h, w) = (s[2], s[3]);
                let count = ((rows.1 - rows.0) * w) as f64;
                let mut out = Tensor::zeros(s);
                for (p, gv) in g.data().iter().enumerate() {
                    let plane = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
                    plane[rows.0 * w..rows.1 * w]
                        .iter_mut()
                        .for_each(|v| *v = gv / count);
                }
                send(*input, out);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*weight)[0];
                let xv = self.value(*input).data();
                let wv = self.value(*weight).data();
                let gv = g.data();
                let mut gx = vec![0.0; n * din];
                let mut gw = vec![0.0; dout * din];
                let mut gb = vec![0.0; dout];
                for i in 0..n {
                    for o in 0..dout {
                        let go = gv[i * dout + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        let wr = &wv[o * din..(o + 1) * din];
                        let xr = &xv[i * din..(i + 1) * din];
                        for k in 0..din {
                            gx[i * din + k] += go * wr[k];
                            gw[o * din + k] += go * xr[k];
                        }
                    }
                }
                send(*input, Tensor::new(xs.to_vec(), gx)?);
                send(*weight, Tensor::new(vec![dout, din], gw)?);
                send(*bias, Tensor::new(vec![dout], gb)?);
            }
            Op::L2Normalize { input, eps } => {
                let xv = self.value(*input);
                let (_, cols) = rows_cols(xv.shape(), "l2_normalize")?;
                let mut out = Tensor::zeros(xv.shape());
                for ((xr, gr), or) in xv
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(out.data_mut().chunks_mut(cols))
                {
                    let n = (xr.iter().map(|v| v * v).sum::<f64>() + eps * eps).sqrt();
                    let gy: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for k in 0..cols {
                        or[k] = (gr[k] - xr[k] / n * gy) / n;
                    }
                }
                send(*input, out);
            }
            Op::SoftmaxXent { logits, rows } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let scale = g.item() / rows.len() as f64;
                let mut out = Tensor::zeros(lv.shape());
                for &(r, t) in rows {
                    let row = &lv.data()[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    let orow = &mut out.data_mut()[r * k..(r + 1) * k];
                    for c in 0..k {
                        orow[c] += scale * (row[c] - lse).exp();
                    }
                    orow[t] -= scale;
                }
                send(*logits, out);
            }
            Op::Hinge {
                input,
                triples,
                margin,
            } => {
                let xv = self.value(*input);
                let d = xv.shape()[1];
                let gs = g.item();
                let mut out = Tensor::zeros(xv.shape());
                for t in triples {
                    if hinge_term(xv, d, t, *margin) <= 0.0 {
                        continue;
                    }
                    let (a, p, n) = (xv.row(t.anchor), xv.row(t.positive), xv.row(t.negative));
                    let o = out.data_mut();
                    for k in 0..d {
                        o[t.anchor * d + k] += gs * (n[k] - p[k]);
                        o[t.positive * d + k] += gs * (p[k] - a[k]);
                        o[t.negative * d + k] += gs * (a[k] - n[k]);
                    }
                }
                send(*input, out);
            }
            Op::WeightedSum { input, weights } => {
                let mut out = weights.clone();
                out.scale(g.item());
                send(*input, out);
            }
            Op::SumScalars(xs) => {
                for &v in xs {
                    send(v, Tensor::full(self.shape(v), g.item()));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn rows_cols(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [d] => Ok((1, *d)),
        [n, d] => Ok((*n, *d)),
        s => shape_err(op, format!("expected rank 1 or 2, got {:?}", s)),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn hinge_term(x: &Tensor, d: usize, t: &Triple, margin: f64) -> f64 {
    let data = x.data();
    let row = |i: usize| &data[i * d..(i + 1) * d];
    margin + half_sq_dist(row(t.anchor), row(t.positive)) - half_sq_dist(row(t.anchor), row(t.negative))
}

pub(crate) fn half_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}
