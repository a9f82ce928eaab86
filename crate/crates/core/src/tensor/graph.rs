use rayon::prelude::*;

use super::{gemm, numel, split_axis, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct Axis {
    outer: usize,
    n: usize,
    inner: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    MeanAxis(Var, Axis),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    L2Normalize(Var, Axis, Vec<f64>),
    Concat(Vec<Var>, Vec<usize>, Axis),
    Slice(Var, Axis, usize),
    Gather(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    },
    AvgPool2d(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run tape. Confined to one thread; build a fresh graph per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
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

    /// Adds a leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` was reachable.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// True when no node in the graph tracks gradients.
    pub fn is_gradient_free(&self) -> bool {
        self.nodes.iter().all(|n| !n.requires_grad)
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(name, value.data())?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise -------------------------------------------------------

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record(name, out, &[a, b], op)
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.val(a);
        let out = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        self.record(name, out, &[a], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.val(b).data().contains(&0.0) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`D` vector to every row of a `[.., D]` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.val(a), self.val(row));
        let d = *ta.shape().last().unwrap_or(&0);
        if tr.rank() != 1 || tr.numel() != d || d == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(d) {
            chunk.iter_mut().zip(tr.data()).for_each(|(x, y)| *x += y);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.record("add_row", out, &[a, row], Op::AddRow(a, row))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("mul_scalar", a, |x| x * s, Op::MulScalar(a, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(TensorError::DivisionByZero { op: "div_scalar" });
        }
        self.mul_scalar(a, 1.0 / s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, f64::ln, Op::Log(a))
    }

    // ---- shape -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut c);
        let out = Tensor::from_parts(vec![m, n], c);
        self.record("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        if ta.rank() != 2 {
            return Err(TensorError::Invalid(format!(
                "transpose expects rank 2, got {:?}",
                ta.shape()
            )));
        }
        let (r, c) = (ta.shape()[0], ta.shape()[1]);
        let out = Tensor::from_parts(vec![c, r], transpose2(r, c, ta.data()));
        self.record("transpose", out, &[a], Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.val(a);
        if numel(shape) != ta.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), ta.data().to_vec());
        self.record("reshape", out, &[a], Op::Reshape(a))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let base = self.val(*first).shape().to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut lens = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.val(x).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&lens) {
                let d = self.val(x).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        let ax = Axis { outer, n: total, inner };
        self.record("concat", out, xs, Op::Concat(xs.to_vec(), lens, ax))
    }

    /// Elements `start..start+len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.val(a);
        let (outer, n, inner) = split_axis(ta.shape(), axis)?;
        if start + len > n {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} exceeds axis length {n}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        self.record("slice", out, &[a], Op::Slice(a, Axis { outer, n, inner }, start))
    }

    /// `out.flat[k] = a.flat[indices[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
        let ta = self.val(a);
        if numel(shape) != indices.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: vec![indices.len()],
                rhs: shape.to_vec(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.numel()) {
            return Err(TensorError::Invalid(format!(
                "gather index {bad} out of range for {} elements",
                ta.numel()
            )));
        }
        let data = indices.iter().map(|&i| ta.data()[i]).collect();
        let out = Tensor::from_parts(shape.to_vec(), data);
        self.record("gather", out, &[a], Op::Gather(a, indices.to_vec()))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).data().iter().sum();
        self.record("sum", Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        if ta.numel() == 0 {
            return Err(TensorError::DivisionByZero { op: "mean" });
        }
        let s = ta.data().iter().sum::<f64>() / ta.numel() as f64;
        self.record("mean", Tensor::scalar(s), &[a], Op::Mean(a))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let ta = self.val(a);
        let (outer, n, inner) = split_axis(ta.shape(), axis)?;
        if mean && n == 0 {
            return Err(TensorError::DivisionByZero { op: "mean_axis" });
        }
        let scale = if mean { 1.0 / n as f64 } else { 1.0 };
        let d = ta.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &d[(o * n + i) * inner..(o * n + i + 1) * inner];
                data[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(acc, v)| *acc += v);
            }
        }
        data.iter_mut().for_each(|v| *v *= scale);
        let mut shape = ta.shape().to_vec();
        shape.remove(axis);
        let ax = Axis { outer, n, inner };
        let out = Tensor::from_parts(shape, data);
        if mean {
            self.record("mean_axis", out, &[a], Op::MeanAxis(a, ax))
        } else {
            self.record("sum_axis", out, &[a], Op::SumAxis(a, ax))
        }
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    // ---- normalisations ----------------------------------------------------

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let ta = self.val(a);
        let (outer, n, inner) = split_axis(ta.shape(), axis)?;
        let d = ta.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|i| (d[idx(i)] - max).exp()).sum();
                let lz = z.ln();
                for i in 0..n {
                    let shifted = d[idx(i)] - max;
                    out[idx(i)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        let ax = Axis { outer, n, inner };
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        if log {
            self.record("log_softmax", t, &[a], Op::LogSoftmax(a, ax))
        } else {
            self.record("softmax", t, &[a], Op::Softmax(a, ax))
        }
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    /// Divides each fibre along `axis` by its Euclidean norm. Zero fibres are an error.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.val(a);
        let (outer, n, inner) = split_axis(ta.shape(), axis)?;
        let d = ta.data();
        let mut out = vec![0.0; d.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let norm = (0..n).map(|i| d[idx(i)] * d[idx(i)]).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(TensorError::DivisionByZero { op: "l2_normalize" });
                }
                norms[o * inner + j] = norm;
                for i in 0..n {
                    out[idx(i)] = d[idx(i)] / norm;
                }
            }
        }
        let t = Tensor::from_parts(ta.shape().to_vec(), out);
        self.record(
            "l2_normalize",
            t,
            &[a],
            Op::L2Normalize(a, Axis { outer, n, inner }, norms),
        )
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D cross-correlation. `x` is `[B, Cin, H, W]`, `w` is `[Cout, Cin, kh, kw]`,
    /// optional `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw) = (self.val(x), self.val(w));
        let geo = ConvGeom::new(tx.shape(), tw.shape(), stride, padding)?;
        if let Some(b) = b {
            let tb = self.val(b);
            if tb.shape() != [geo.cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geo.cout],
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        let bias = b.map(|b| self.val(b).data());
        let (xd, wd) = (tx.data(), tw.data());
        let img_in = geo.cin * geo.h * geo.w;
        let img_out = geo.cout * geo.ho * geo.wo;
        let mut out = vec![0.0; geo.batch * img_out];
        out.par_chunks_mut(img_out.max(1))
            .zip(xd.par_chunks(img_in.max(1)))
            .for_each(|(o, xi)| {
                let cols = geo.im2col(xi);
                gemm(geo.cout, geo.kdim(), geo.ho * geo.wo, wd, false, &cols, false, 0.0, o);
                if let Some(bias) = bias {
                    for (c, chunk) in o.chunks_mut(geo.ho * geo.wo).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += bias[c]);
                    }
                }
            });
        let shape = vec![geo.batch, geo.cout, geo.ho, geo.wo];
        let t = Tensor::from_parts(shape, out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.record(
            "conv2d",
            t,
            &inputs,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        )
    }

    /// Non-overlapping `k × k` average pooling over `[B, C, H, W]`; trailing
    /// rows/columns that do not fill a window are dropped.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 4 || k == 0 {
            return Err(TensorError::Invalid(format!(
                "avg_pool2d expects [B,C,H,W] and k > 0, got {:?}, k={k}",
                tx.shape()
            )));
        }
        let (bc, h, w) = (tx.shape()[0] * tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if h < k || w < k {
            return Err(TensorError::Invalid(format!(
                "avg_pool2d window {k} larger than spatial size {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let scale = 1.0 / (k * k) as f64;
        let d = tx.data();
        let mut out = vec![0.0; bc * ho * wo];
        for p in 0..bc {
            let src = &d[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..k {
                        let row = &src[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                        s += row.iter().sum::<f64>();
                    }
                    out[(p * ho + oy) * wo + ox] = s * scale;
                }
            }
        }
        let shape = vec![tx.shape()[0], tx.shape()[1], ho, wo];
        self.record("avg_pool2d", Tensor::from_parts(shape, out), &[x], Op::AvgPool2d(x, k))
    }

    // ---- backward ----------------------------------------------------------

    /// Back-propagates from the scalar `loss`, populating gradients of every
    /// reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.val(loss).shape().to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.data.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, contrib));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) {
        let gd = g.data();
        // Split borrow: node data is read while grads are written through `acc`.
        let node = &self.nodes[idx];
        let y = node.value.data();
        let contribs: Vec<(Var, Vec<f64>)> = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Sub(a, b) => vec![(*a, gd.to_vec()), (*b, gd.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let mut c = Vec::new();
                if self.needs(*a) {
                    c.push((*a, gd.iter().zip(bd).map(|(g, b)| g * b).collect()));
                }
                if self.needs(*b) {
                    c.push((*b, gd.iter().zip(ad).map(|(g, a)| g * a).collect()));
                }
                c
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let mut c = Vec::new();
                if self.needs(*a) {
                    c.push((*a, gd.iter().zip(bd).map(|(g, b)| g / b).collect()));
                }
                if self.needs(*b) {
                    let gb = gd
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(g, (a, b))| -g * a / (b * b))
                        .collect();
                    c.push((*b, gb));
                }
                c
            }
            Op::AddRow(a, r) => {
                let d = self.val(*r).numel();
                let mut gr = vec![0.0; d];
                for chunk in gd.chunks(d) {
                    gr.iter_mut().zip(chunk).for_each(|(acc, v)| *acc += v);
                }
                vec![(*a, gd.to_vec()), (*r, gr)]
            }
            Op::AddScalar(a) => vec![(*a, gd.to_vec())],
            Op::MulScalar(a, s) => vec![(*a, gd.iter().map(|v| v * s).collect())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut c = Vec::new();
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, tb.data(), true, 0.0, &mut ga);
                    c.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, gd, false, 0.0, &mut gb);
                    c.push((*b, gb));
                }
                c
            }
            Op::Transpose(a) => {
                let s = g.shape();
                vec![(*a, transpose2(s[0], s[1], gd))]
            }
            Op::Reshape(a) => vec![(*a, gd.to_vec())],
            Op::Relu(a) => {
                let ad = self.val(*a).data();
                vec![(
                    *a,
                    gd.iter()
                        .zip(ad)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Exp(a) => vec![(*a, gd.iter().zip(y).map(|(g, y)| g * y).collect())],
            Op::Log(a) => {
                let ad = self.val(*a).data();
                vec![(*a, gd.iter().zip(ad).map(|(g, x)| g / x).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![gd[0]; self.val(*a).numel()])],
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                vec![(*a, vec![gd[0] / n as f64; n])]
            }
            Op::SumAxis(a, ax) | Op::MeanAxis(a, ax) => {
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / ax.n as f64
                } else {
                    1.0
                };
                let mut ga = vec![0.0; ax.outer * ax.n * ax.inner];
                for o in 0..ax.outer {
                    let src = &gd[o * ax.inner..(o + 1) * ax.inner];
                    for i in 0..ax.n {
                        let base = (o * ax.n + i) * ax.inner;
                        ga[base..base + ax.inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d = s * scale);
                    }
                }
                vec![(*a, ga)]
            }
            Op::Softmax(a, ax) => {
                let mut ga = vec![0.0; gd.len()];
                for_fibres(*ax, |idx| {
                    let dot: f64 = idx.clone().map(|k| gd[k] * y[k]).sum();
                    for k in idx {
                        ga[k] = y[k] * (gd[k] - dot);
                    }
                });
                vec![(*a, ga)]
            }
            Op::LogSoftmax(a, ax) => {
                let mut ga = vec![0.0; gd.len()];
                for_fibres(*ax, |idx| {
                    let total: f64 = idx.clone().map(|k| gd[k]).sum();
                    for k in idx {
                        ga[k] = gd[k] - y[k].exp() * total;
                    }
                });
                vec![(*a, ga)]
            }
            Op::L2Normalize(a, ax, norms) => {
                let mut ga = vec![0.0; gd.len()];
                let mut f = 0;
                for_fibres(*ax, |idx| {
                    let dot: f64 = idx.clone().map(|k| gd[k] * y[k]).sum();
                    let n = norms[f];
                    f += 1;
                    for k in idx {
                        ga[k] = (gd[k] - y[k] * dot) / n;
                    }
                });
                vec![(*a, ga)]
            }
            Op::Concat(xs, lens, ax) => {
                let mut c = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for (&x, &len) in xs.iter().zip(lens) {
                    let mut gx = Vec::with_capacity(ax.outer * len * ax.inner);
                    for o in 0..ax.outer {
                        let base = (o * ax.n + offset) * ax.inner;
                        gx.extend_from_slice(&gd[base..base + len * ax.inner]);
                    }
                    offset += len;
                    c.push((x, gx));
                }
                c
            }
            Op::Slice(a, ax, start) => {
                let len = g.shape().iter().product::<usize>() / (ax.outer * ax.inner).max(1);
                let mut ga = vec![0.0; ax.outer * ax.n * ax.inner];
                for o in 0..ax.outer {
                    let dst = (o * ax.n + start) * ax.inner;
                    let src = o * len * ax.inner;
                    ga[dst..dst + len * ax.inner].copy_from_slice(&gd[src..src + len * ax.inner]);
                }
                vec![(*a, ga)]
            }
            Op::Gather(a, indices) => {
                let mut ga = vec![0.0; self.val(*a).numel()];
                for (&i, &v) in indices.iter().zip(gd) {
                    ga[i] += v;
                }
                vec![(*a, ga)]
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => self.conv_backward(*x, *w, *b, *stride, *padding, gd),
            Op::AvgPool2d(x, k) => {
                let s = self.val(*x).shape();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let scale = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; bc * h * w];
                for p in 0..bc {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = gd[(p * ho + oy) * wo + ox] * scale;
                            for dy in 0..*k {
                                let base = p * h * w + (oy * k + dy) * w + ox * k;
                                gx[base..base + k].iter_mut().for_each(|d| *d = v);
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
        };
        for (v, c) in contribs {
            self.acc(v, c);
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        gd: &[f64],
    ) -> Vec<(Var, Vec<f64>)> {
        let (tx, tw) = (self.val(x), self.val(w));
        let geo = ConvGeom::new(tx.shape(), tw.shape(), stride, padding).expect("validated in forward");
        let (img_in, hw_out) = (geo.cin * geo.h * geo.w, geo.ho * geo.wo);
        let img_out = geo.cout * hw_out;
        let kdim = geo.kdim();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let wd = tw.data();
        let per_image: Vec<(Vec<f64>, Vec<f64>)> = tx
            .data()
            .par_chunks(img_in.max(1))
            .zip(gd.par_chunks(img_out.max(1)))
            .map(|(xi, go)| {
                let mut gw = Vec::new();
                if need_w {
                    let cols = geo.im2col(xi);
                    gw = vec![0.0; geo.cout * kdim];
                    gemm(geo.cout, hw_out, kdim, go, false, &cols, true, 0.0, &mut gw);
                }
                let mut gx = Vec::new();
                if need_x {
                    let mut gcols = vec![0.0; kdim * hw_out];
                    gemm(kdim, geo.cout, hw_out, wd, true, go, false, 0.0, &mut gcols);
                    gx = geo.col2im(&gcols);
                }
                (gw, gx)
            })
            .collect();
        let mut out = Vec::new();
        if need_x {
            let mut gx = Vec::with_capacity(geo.batch * img_in);
            for (_, g) in &per_image {
                gx.extend_from_slice(g);
            }
            out.push((x, gx));
        }
        if need_w {
            let mut gw = vec![0.0; geo.cout * kdim];
            for (g, _) in &per_image {
                gw.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
            out.push((w, gw));
        }
        if let Some(b) = b {
            let mut gb = vec![0.0; geo.cout];
            for go in gd.chunks(img_out.max(1)) {
                for (c, chunk) in go.chunks(hw_out.max(1)).enumerate() {
                    gb[c] += chunk.iter().sum::<f64>();
                }
            }
            out.push((b, gb));
        }
        out
    }
}

fn for_fibres(ax: Axis, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..ax.outer {
        for j in 0..ax.inner {
            let start = o * ax.n * ax.inner + j;
            f((start..start + ax.n * ax.inner).step_by(ax.inner));
        }
    }
}

fn transpose2(r: usize, c: usize, d: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{w} (+{pad})"
            )));
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn kdim(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Maps output (oy, ox) and kernel tap (ky, kx) to an input pixel, if in bounds.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    /// `[Cin*kh*kw, Ho*Wo]` patch matrix for one image.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut cols = vec![0.0; self.kdim() * hw];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((iy, ix)) = self.src(oy, ox, ky, kx) {
                                dst[oy * self.wo + ox] = x[(c * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((iy, ix)) = self.src(oy, ox, ky, kx) {
                                x[(c * self.h + iy) * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = numel(shape);
        t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let y = g.l2_normalize(x, 0).unwrap();
        close(g.value(y).data(), &[0.6, 0.8], 1e-12);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1000.0, 1000.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        close(g.value(y).data(), &[0.5, 0.5, 0.0], 1e-12);
        let ly = g.log_softmax(x, 0).unwrap();
        close(&g.value(ly).data()[..2], &[-(2f64.ln()); 2], 1e-12);
    }

    #[test]
    fn identity_conv_reproduces_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random(&[2, 3, 5, 4], &mut rng);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let mut g = Graph::new();
        let x = g.constant(img.clone()).unwrap();
        let w = g.constant(t(&[3, 3, 1, 1], &w)).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &img);
    }

    #[test]
    fn conv_matches_direct_loop_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = random(&[1, 2, 5, 5], &mut rng);
        let ws = random(&[3, 2, 3, 3], &mut rng);
        let bs = random(&[3], &mut rng);
        let mut g = Graph::new();
        let x = g.constant(xs.clone()).unwrap();
        let w = g.constant(ws.clone()).unwrap();
        let b = g.constant(bs.clone()).unwrap();
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3, 3]);
        let at = |c: usize, i: isize, j: isize| -> f64 {
            if i < 0 || j < 0 || i >= 5 || j >= 5 {
                0.0
            } else {
                xs.data()[(c * 5 + i as usize) * 5 + j as usize]
            }
        };
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = bs.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = ws.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                s += wv * at(ci, (oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                            }
                        }
                    }
                    let got = g.value(y).data()[(co * 3 + oy) * 3 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 5.0])).unwrap();
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.param(t(&[2], &[3.0, 4.0])).unwrap();
        let sx = g.stop_gradient(x);
        let p = g.mul(sx, y).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(y).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::BackwardTwice));
        g.zero_grad();
        g.backward(l).unwrap();
    }

    #[test]
    fn forward_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let z = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.div(a, z), Err(TensorError::DivisionByZero { .. })));
        let neg = g.constant(t(&[1], &[-1.0])).unwrap();
        assert!(matches!(g.log(neg), Err(TensorError::NonFinite { .. })));
        let big = g.constant(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(g.exp(big), Err(TensorError::NonFinite { .. })));
        let zero = g.constant(Tensor::zeros(vec![1, 3])).unwrap();
        assert!(g.l2_normalize(zero, 1).is_err());
        assert!(g.constant(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn constant_only_ops_record_no_graph_edges() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.exp(a).unwrap();
        assert!(!g.requires_grad(b));
        assert!(g.is_gradient_free());
    }

    type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var) -> Result<Var>>);

    fn op_cases() -> Vec<Case> {
        let aux = |g: &mut Graph, shape: &[usize], seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.constant(random(shape, &mut rng).clone())
        };
        vec![
            (
                "add",
                vec![3, 4],
                Box::new(move |g, x| {
                    let c = aux(g, &[3, 4], 9)?;
                    let y = g.add(x, c)?;
                    let y = g.mul(y, y)?;
                    g.sum(y)
                }),
            ),
            (
                "sub_mul",
                vec![3, 4],
                Box::new(move |g, x| {
                    let c = aux(g, &[3, 4], 9)?;
                    let y = g.sub(c, x)?;
                    let y = g.mul(y, x)?;
                    g.sum(y)
                }),
            ),
            (
                "div",
                vec![5],
                Box::new(move |g, x| {
                    let c = g.constant(Tensor::full(vec![5], 3.0))?;
                    let d = g.add(x, c)?;
                    let y = g.div(x, d)?;
                    g.sum(y)
                }),
            ),
            (
                "add_row_scalar",
                vec![4],
                Box::new(move |g, x| {
                    let c = aux(g, &[3, 4], 4)?;
                    let y = g.add_row(c, x)?;
                    let y = g.mul_scalar(y, 1.7)?;
                    let y = g.add_scalar(y, 0.3)?;
                    let y = g.mul(y, y)?;
                    g.mean(y)
                }),
            ),
            (
                "matmul_transpose",
                vec![3, 4],
                Box::new(move |g, x| {
                    let c = aux(g, &[4, 2], 5)?;
                    let y = g.matmul(x, c)?;
                    let xt = g.transpose(x)?;
                    let ct = g_t(g, c)?;
                    let z = g.matmul(y, ct)?;
                    let w = g.matmul(z, xt)?;
                    let w = g.mul(w, w)?;
                    g.sum(w)
                }),
            ),
            (
                "relu",
                vec![10],
                Box::new(move |g, x| {
                    let y = g.relu(x)?;
                    let y = g.mul(y, y)?;
                    g.sum(y)
                }),
            ),
            (
                "exp_log",
                vec![6],
                Box::new(move |g, x| {
                    let y = g.exp(x)?;
                    let y = g.add_scalar(y, 1.0)?;
                    let y = g.log(y)?;
                    g.sum(y)
                }),
            ),
            (
                "softmax_axis0",
                vec![3, 4],
                Box::new(move |g, x| {
                    let c = aux(g, &[3, 4], 6)?;
                    let y = g.softmax(x, 0)?;
                    let y = g.mul(y, c)?;
                    g.sum(y)
                }),
            ),
            (
                "log_softmax_axis1",
                vec![3, 4],
                Box::new(move |g, x| {
                    let c = aux(g, &[3, 4], 7)?;
                    let y = g.log_softmax(x, 1)?;
                    let y = g.mul(y, c)?;
                    g.sum(y)
                }),
            ),
            (
                "l2_normalize",
                vec![2, 3, 2],
                Box::new(move |g, x| {
                    let c = aux(g, &[2, 3, 2], 8)?;
                    let y = g.l2_normalize(x, 1)?;
                    let y = g.mul(y, c)?;
                    g.sum(y)
                }),
            ),
            (
                "reduce_axis",
                vec![2, 3, 4],
                Box::new(move |g, x| {
                    let a = g.sum_axis(x, 1)?;
                    let b = g.mean_axis(x, 2)?;
                    let a = g.mul(a, a)?;
                    let b = g.mul(b, b)?;
                    let a = g.sum(a)?;
                    let b = g.sum(b)?;
                    g.add(a, b)
                }),
            ),
            (
                "concat_slice_reshape",
                vec![2, 3],
                Box::new(move |g, x| {
                    let c = aux(g, &[2, 2], 3)?;
                    let y = g.concat(&[x, c, x], 1)?;
                    let s = g.slice(y, 1, 2, 4)?;
                    let r = g.reshape(s, &[4, 2])?;
                    let r = g.mul(r, r)?;
                    g.sum(r)
                }),
            ),
            (
                "gather",
                vec![3, 3],
                Box::new(move |g, x| {
                    let y = g.gather(x, &[0, 4, 4, 8, 2, 1], &[2, 3])?;
                    let y = g.mul(y, y)?;
                    g.sum(y)
                }),
            ),
            (
                "conv_pool",
                vec![2, 2, 6, 6],
                Box::new(move |g, x| {
                    let w = aux(g, &[3, 2, 3, 3], 11)?;
                    let b = aux(g, &[3], 12)?;
                    let y = g.conv2d(x, w, Some(b), 1, 1)?;
                    let y = g.avg_pool2d(y, 2)?;
                    let y = g.mul(y, y)?;
                    g.sum(y)
                }),
            ),
            (
                "conv_weights_strided",
                vec![3, 2, 3, 3],
                Box::new(move |g, w| {
                    let x = aux(g, &[2, 2, 7, 7], 13)?;
                    let y = g.conv2d(x, w, None, 2, 1)?;
                    let y = g.mul(y, y)?;
                    g.sum(y)
                }),
            ),
        ]
    }

    fn g_t(g: &mut Graph, v: Var) -> Result<Var> {
        g.transpose(v)
    }

    #[test]
    fn every_op_passes_finite_difference_on_ten_seeds() {
        for (name, shape, f) in op_cases() {
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let x = random(&shape, &mut rng);
                let err = finite_diff_check(&f, &x, 1e-5).unwrap();
                assert!(err < 1e-3, "{name} seed {seed}: relative error {err}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 2, 8, 8], &mut rng);
        let w = random(&[5, 2, 3, 3], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wv = g.param(w.clone()).unwrap();
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let l = g.sum(y).unwrap();
            g.backward(l).unwrap();
            (g.value(y).clone(), g.grad(wv).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
