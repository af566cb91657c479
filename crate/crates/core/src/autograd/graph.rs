use std::str::FromStr;

use super::{AutogradError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operation kinds understood by [`Graph::forward_primitive`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    Relu,
    MaxPool2d { window: usize },
    GlobalAvgPool,
    Reshape,
    Concat { axis: usize },
    Scale(f64),
    Log,
    Exp,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    SquaredL2Distance,
    Abs,
}

impl FromStr for PrimitiveKind {
    type Err = AutogradError;

    /// Parses the parameter-free kinds; parameterized kinds take defaults
    /// (`conv2d` stride 1 pad 0, `max-pool2d` window 2, `concat` axis 0,
    /// `sum`/`mean` over all elements, `scalar-scale` by 1).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" | "mul-elementwise" => Self::Mul,
            "matmul" => Self::MatMul,
            "conv2d" => Self::Conv2d { stride: 1, pad: 0 },
            "relu" => Self::Relu,
            "max-pool2d" => Self::MaxPool2d { window: 2 },
            "global-avg-pool" => Self::GlobalAvgPool,
            "reshape" => Self::Reshape,
            "concat" => Self::Concat { axis: 0 },
            "scalar-scale" => Self::Scale(1.0),
            "log" => Self::Log,
            "exp" => Self::Exp,
            "sum" => Self::Sum { axis: None },
            "mean" => Self::Mean { axis: None },
            "squared-l2-distance" => Self::SquaredL2Distance,
            "abs" => Self::Abs,
            other => return Err(AutogradError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Scale(Var, f64),
    Log(Var),
    Exp(Var),
    Reduce {
        input: Var,
        axis: Option<usize>,
        mean: bool,
    },
    SquaredL2Distance(Var, Var),
    Abs(Var),
    LogSoftmax {
        input: Var,
        tau: f64,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// valid topological order. A fresh graph is built for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(kind: &'static str, shapes: &[&[usize]]) -> AutogradError {
    AutogradError::ShapeMismatch {
        kind,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
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

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if this node takes one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
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

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic dispatcher over [`PrimitiveKind`].
    pub fn forward_primitive(
        &mut self,
        kind: PrimitiveKind,
        inputs: &[Var],
        reshape_to: Option<&[usize]>,
    ) -> Result<Var, AutogradError> {
        let arity = |n: usize| -> Result<(), AutogradError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutogradError::Arity {
                    kind: format!("{kind:?}"),
                    expected: n,
                    got: inputs.len(),
                })
            }
        };
        match kind {
            PrimitiveKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            PrimitiveKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveKind::Conv2d { stride, pad } => match inputs.len() {
                2 => self.conv2d(inputs[0], inputs[1], None, stride, pad),
                3 => self.conv2d(inputs[0], inputs[1], Some(inputs[2]), stride, pad),
                _ => {
                    arity(2)?;
                    unreachable!()
                }
            },
            PrimitiveKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            PrimitiveKind::MaxPool2d { window } => {
                arity(1)?;
                self.max_pool2d(inputs[0], window)
            }
            PrimitiveKind::GlobalAvgPool => {
                arity(1)?;
                self.global_avg_pool(inputs[0])
            }
            PrimitiveKind::Reshape => {
                arity(1)?;
                let shape = reshape_to.ok_or_else(|| mismatch("reshape", &[self.shape(inputs[0])]))?;
                self.reshape(inputs[0], shape)
            }
            PrimitiveKind::Concat { axis } => self.concat(inputs, axis),
            PrimitiveKind::Scale(s) => {
                arity(1)?;
                Ok(self.scale(inputs[0], s))
            }
            PrimitiveKind::Log => {
                arity(1)?;
                Ok(self.log(inputs[0]))
            }
            PrimitiveKind::Exp => {
                arity(1)?;
                Ok(self.exp(inputs[0]))
            }
            PrimitiveKind::Sum { axis } => {
                arity(1)?;
                self.sum(inputs[0], axis)
            }
            PrimitiveKind::Mean { axis } => {
                arity(1)?;
                self.mean(inputs[0], axis)
            }
            PrimitiveKind::SquaredL2Distance => {
                arity(2)?;
                self.squared_l2_distance(inputs[0], inputs[1])
            }
            PrimitiveKind::Abs => {
                arity(1)?;
                Ok(self.abs(inputs[0]))
            }
        }
    }

    fn elementwise(
        &mut self,
        kind: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(kind, &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `(m, k) @ (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x + bias` broadcast over the leading axis: `(n, d) + (d)`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutogradError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (sx, sb) = (tx.shape(), tb.shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(mismatch("add-bias", &[sx, sb]));
        }
        let d = sb[0];
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// NCHW convolution with an `(out, in, kh, kw)` kernel and optional
    /// per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, AutogradError> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let (si, sw) = (ti.shape(), tw.shape());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(mismatch("conv2d", &[si, sw]));
        }
        if let Some(b) = bias {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(mismatch("conv2d", &[si, sw, sb]));
            }
        }
        let geom = ConvGeom::new(si, sw, stride, pad).ok_or_else(|| mismatch("conv2d", &[si, sw]))?;
        let mut out = vec![0.0; geom.out_len()];
        conv_forward(&geom, ti.data(), tw.data(), &mut out);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let plane = geom.oh * geom.ow;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bd[i % geom.oc];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let value = Tensor::new(vec![geom.n, geom.oc, geom.oh, geom.ow], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    /// Non-overlapping `window × window` max pooling over NCHW input.
    /// Trailing rows/columns that do not fill a window are dropped; ties go
    /// to the first maximal element in row-major order.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var, AutogradError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || window == 0 || s[2] < window || s[3] < window {
            return Err(mismatch("max-pool2d", &[s]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / window, w / window);
        let src = t.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + oy * window * w + ox * window;
                    let mut best = src[best_idx];
                    for dy in 0..window {
                        let row = base + (oy * window + dy) * w + ox * window;
                        for dx in 0..window {
                            let v = src[row + dx];
                            if v > best {
                                best = v;
                                best_idx = row + dx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }, rg))
    }

    /// `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, AutogradError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(mismatch("global-avg-pool", &[s]));
        }
        let plane = s[2] * s[3];
        let data = t
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let t = self.value(x);
        let value = t
            .reshaped(shape)
            .map_err(|_| mismatch("reshape", &[t.shape(), shape]))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Collapse all axes after the first: `(n, ...) -> (n, rest)`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, AutogradError> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutogradError> {
        let first = *inputs.first().ok_or(AutogradError::EmptyInput)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", &[&base]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
                return Err(mismatch("concat", &shapes));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sum over one axis (removing it) or over everything (rank-0 result).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, AutogradError> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, AutogradError> {
        self.reduce(x, axis, true)
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var, AutogradError> {
        let t = self.value(x);
        let value = match axis {
            None => {
                let s: f64 = t.data().iter().sum();
                Tensor::scalar(if mean { s / t.len() as f64 } else { s })
            }
            Some(ax) => {
                let s = t.shape();
                if ax >= s.len() {
                    return Err(mismatch(if mean { "mean" } else { "sum" }, &[s]));
                }
                let (outer, len, inner) = split_axis(s, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let src = &t.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = s.to_vec();
                shape.remove(ax);
                Tensor::new(shape, out)?
            }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reduce { input: x, axis, mean }, rg))
    }

    /// `Σ (a − b)²` over the last axis; `(n, d), (n, d) -> (n)` or
    /// `(d), (d) -> scalar`.
    pub fn squared_l2_distance(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rank() == 0 {
            return Err(mismatch("squared-l2-distance", &[ta.shape(), tb.shape()]));
        }
        let d = *ta.shape().last().unwrap();
        let data: Vec<f64> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum())
            .collect();
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::SquaredL2Distance(a, b), rg))
    }

    /// `log softmax(x / tau)` over the last axis.
    pub fn log_softmax(&mut self, x: Var, tau: f64) -> Result<Var, AutogradError> {
        if !(tau > 0.0) {
            return Err(AutogradError::NonPositiveTemperature(tau));
        }
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(mismatch("log-softmax", &[t.shape()]));
        }
        let d = *t.shape().last().unwrap();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&z| ((z - max) / tau).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|&z| (z - max) / tau - lse));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmax { input: x, tau }, rg))
    }

    /// Divide every row (last axis) by its Euclidean norm. Rows with norm
    /// below `1e-12` are left unscaled.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, AutogradError> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(mismatch("l2-normalize", &[t.shape()]));
        }
        let d = *t.shape().last().unwrap();
        let mut data = Vec::with_capacity(t.len());
        let mut norms = Vec::with_capacity(t.len() / d);
        for row in t.data().chunks(d) {
            let norm = dot(row, row).sqrt();
            let scale = if norm < 1e-12 { 1.0 } else { norm };
            norms.push(scale);
            data.extend(row.iter().map(|v| v / scale));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows { input: x, norms }, rg))
    }

    /// `softmax(x / tau)` over the last axis.
    pub fn softmax(&mut self, x: Var, tau: f64) -> Result<Var, AutogradError> {
        let ls = self.log_softmax(x, tau)?;
        Ok(self.exp(ls))
    }

    /// Reverse sweep from a scalar root. Gradients of nodes that require
    /// them are left in place and can be read with [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), AutogradError> {
        if root.0 >= self.nodes.len() {
            return Err(AutogradError::BackwardBeforeForward);
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutogradError::NonScalarRoot(
                self.nodes[root.0].value.shape().to_vec(),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &gy);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: impl FnOnce(&Self) -> Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let delta = g(self);
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
            None => node.grad = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, op: &Op, gy: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |_| gy.to_vec());
                self.accumulate(b, |_| gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |_| gy.to_vec());
                self.accumulate(b, |_| gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |s| zip_map(gy, s.value(b).data(), |g, y| g * y));
                self.accumulate(b, |s| zip_map(gy, s.value(a).data(), |g, x| g * x));
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.accumulate(a, |s| {
                    // dA = dY · Bᵀ
                    let bd = s.value(b).data();
                    let mut out = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &gy[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &bd[c * n..(c + 1) * n];
                            out[r * k + c] = dot(grow, brow);
                        }
                    }
                    out
                });
                self.accumulate(b, |s| {
                    // dB = Aᵀ · dY
                    let ad = s.value(a).data();
                    let mut out = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &gy[r * n..(r + 1) * n];
                        for c in 0..k {
                            let av = ad[r * k + c];
                            if av != 0.0 {
                                axpy(av, grow, &mut out[c * n..(c + 1) * n]);
                            }
                        }
                    }
                    out
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(x, |_| gy.to_vec());
                let d = self.shape(bias)[0];
                self.accumulate(bias, |_| {
                    let mut out = vec![0.0; d];
                    for row in gy.chunks(d) {
                        axpy(1.0, row, &mut out);
                    }
                    out
                });
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let geom = ConvGeom::new(self.shape(input), self.shape(weight), stride, pad)
                    .expect("validated in forward");
                self.accumulate(input, |s| {
                    let mut out = vec![0.0; s.value(input).len()];
                    conv_backward_input(&geom, gy, s.value(weight).data(), &mut out);
                    out
                });
                self.accumulate(weight, |s| {
                    let mut out = vec![0.0; s.value(weight).len()];
                    conv_backward_weight(&geom, gy, s.value(input).data(), &mut out);
                    out
                });
                if let Some(b) = bias {
                    self.accumulate(b, |_| {
                        let plane = geom.oh * geom.ow;
                        let mut out = vec![0.0; geom.oc];
                        for (j, chunk) in gy.chunks(plane).enumerate() {
                            out[j % geom.oc] += chunk.iter().sum::<f64>();
                        }
                        out
                    });
                }
            }
            Op::Relu(x) => {
                let y = self.nodes[i].value.data();
                let g = zip_map(gy, y, |g, y| if y > 0.0 { g } else { 0.0 });
                self.accumulate(x, |_| g);
            }
            Op::MaxPool2d { input, ref argmax } => {
                let len = self.value(input).len();
                let mut out = vec![0.0; len];
                for (&idx, &g) in argmax.iter().zip(gy) {
                    out[idx] += g;
                }
                self.accumulate(input, |_| out);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let plane = s[2] * s[3];
                let out = gy
                    .iter()
                    .flat_map(|&g| std::iter::repeat(g / plane as f64).take(plane))
                    .collect();
                self.accumulate(x, |_| out);
            }
            Op::Reshape(x) => self.accumulate(x, |_| gy.to_vec()),
            Op::Concat { ref inputs, axis } => {
                let base = self.nodes[i].value.shape().to_vec();
                let outer: usize = base[..axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[axis];
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[axis] * inner;
                    let mut out = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        let start = o * total * inner + offset;
                        out.extend_from_slice(&gy[start..start + width]);
                    }
                    offset += width;
                    self.accumulate(v, |_| out);
                }
            }
            Op::Scale(x, s) => self.accumulate(x, |_| gy.iter().map(|g| g * s).collect()),
            Op::Log(x) => self.accumulate(x, |s| zip_map(gy, s.value(x).data(), |g, v| g / v)),
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                let g = zip_map(gy, y, |g, y| g * y);
                self.accumulate(x, |_| g);
            }
            Op::Abs(x) => self.accumulate(x, |s| {
                zip_map(gy, s.value(x).data(), |g, v| g * v.signum() * (v != 0.0) as u8 as f64)
            }),
            Op::Reduce { input, axis, mean } => {
                let s = self.shape(input).to_vec();
                let total = s.iter().product::<usize>();
                let out = match axis {
                    None => {
                        let g = if mean { gy[0] / total as f64 } else { gy[0] };
                        vec![g; total]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(&s, ax);
                        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                        let mut out = Vec::with_capacity(total);
                        for o in 0..outer {
                            for _ in 0..len {
                                out.extend(gy[o * inner..(o + 1) * inner].iter().map(|g| g * scale));
                            }
                        }
                        out
                    }
                };
                self.accumulate(input, |_| out);
            }
            Op::SquaredL2Distance(a, b) => {
                let d = *self.shape(a).last().unwrap();
                let diff = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
                let ga: Vec<f64> = diff
                    .iter()
                    .enumerate()
                    .map(|(j, &df)| 2.0 * df * gy[j / d])
                    .collect();
                if self.requires_grad(b) {
                    let gb = ga.iter().map(|g| -g).collect();
                    self.accumulate(b, |_| gb);
                }
                self.accumulate(a, |_| ga);
            }
            Op::LogSoftmax { input, tau } => {
                let y = self.nodes[i].value.data();
                let d = *self.shape(input).last().unwrap();
                let mut out = Vec::with_capacity(y.len());
                for (yrow, grow) in y.chunks(d).zip(gy.chunks(d)) {
                    let gsum: f64 = grow.iter().sum();
                    out.extend(
                        yrow.iter()
                            .zip(grow)
                            .map(|(&ly, &g)| (g - ly.exp() * gsum) / tau),
                    );
                }
                self.accumulate(input, |_| out);
            }
            Op::L2NormalizeRows { input, ref norms } => {
                let y = self.nodes[i].value.data();
                let d = *self.shape(input).last().unwrap();
                let mut out = Vec::with_capacity(y.len());
                for ((yrow, grow), &norm) in y.chunks(d).zip(gy.chunks(d)).zip(norms) {
                    if norm == 1.0 && dot(yrow, yrow) < 1e-24 {
                        out.extend_from_slice(grow);
                        continue;
                    }
                    let proj = dot(yrow, grow);
                    out.extend(yrow.iter().zip(grow).map(|(&yv, &g)| (g - yv * proj) / norm));
                }
                self.accumulate(input, |_| out);
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av != 0.0 {
                axpy(av, &b[c * n..(c + 1) * n], orow);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sw: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, ic, h, w) = (si[0], si[1], si[2], si[3]);
        let (oc, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw {
            return None;
        }
        Some(Self {
            n,
            ic,
            h,
            w,
            oc,
            kh,
            kw,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn out_len(&self) -> usize {
        self.n * self.oc * self.oh * self.ow
    }

    /// Output columns `ox` whose tap `kx` lands inside the input, as a
    /// half-open range.
    #[inline]
    fn valid_x(&self, kx: usize) -> (usize, usize) {
        valid_range(self.w, self.ow, kx, self.stride, self.pad)
    }

    #[inline]
    fn valid_y(&self, ky: usize) -> (usize, usize) {
        valid_range(self.h, self.oh, ky, self.stride, self.pad)
    }
}

#[inline]
fn valid_range(size: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k - pad in [0, size)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], out: &mut [f64]) {
    let (ih, iw, oh, ow) = (g.h, g.w, g.oh, g.ow);
    for b in 0..g.n {
        for o in 0..g.oc {
            let oplane = &mut out[(b * g.oc + o) * oh * ow..(b * g.oc + o + 1) * oh * ow];
            for c in 0..g.ic {
                let iplane = &input[(b * g.ic + c) * ih * iw..(b * g.ic + c + 1) * ih * iw];
                let kbase = ((o * g.ic) + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_y(ky);
                    for kx in 0..g.kw {
                        let wv = weight[kbase + ky * g.kw + kx];
                        let (x0, x1) = g.valid_x(kx);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let irow = &iplane[iy * iw..(iy + 1) * iw];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                axpy(wv, &irow[ix0..ix0 + (x1 - x0)], &mut orow[x0..x1]);
                            } else {
                                for ox in x0..x1 {
                                    orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(g: &ConvGeom, gy: &[f64], weight: &[f64], out: &mut [f64]) {
    let (ih, iw, oh, ow) = (g.h, g.w, g.oh, g.ow);
    for b in 0..g.n {
        for o in 0..g.oc {
            let gplane = &gy[(b * g.oc + o) * oh * ow..(b * g.oc + o + 1) * oh * ow];
            for c in 0..g.ic {
                let iplane = &mut out[(b * g.ic + c) * ih * iw..(b * g.ic + c + 1) * ih * iw];
                let kbase = ((o * g.ic) + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_y(ky);
                    for kx in 0..g.kw {
                        let wv = weight[kbase + ky * g.kw + kx];
                        let (x0, x1) = g.valid_x(kx);
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let irow = &mut iplane[iy * iw..(iy + 1) * iw];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                axpy(wv, &grow[x0..x1], &mut irow[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    irow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(g: &ConvGeom, gy: &[f64], input: &[f64], out: &mut [f64]) {
    let (ih, iw, oh, ow) = (g.h, g.w, g.oh, g.ow);
    for b in 0..g.n {
        for o in 0..g.oc {
            let gplane = &gy[(b * g.oc + o) * oh * ow..(b * g.oc + o + 1) * oh * ow];
            for c in 0..g.ic {
                let iplane = &input[(b * g.ic + c) * ih * iw..(b * g.ic + c + 1) * ih * iw];
                let kbase = ((o * g.ic) + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid_y(ky);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid_x(kx);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let irow = &iplane[iy * iw..(iy + 1) * iw];
                            if g.stride == 1 {
                                let ix0 = x0 + kx - g.pad;
                                acc += dot(&grow[x0..x1], &irow[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    acc += grow[ox] * irow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        out[kbase + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}
