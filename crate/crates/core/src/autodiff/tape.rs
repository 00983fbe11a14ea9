use super::kernels::{
    col2im, conv_scatter, conv_weight_grad_scatter, gemm, im2col, is_sparse, transpose, ConvGeom,
};
use super::surrogate::Surrogate;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f32),
    MulBcast(Var, Var),
    AddBcast(Var, Var, f32),
    MulConst(Var, Vec<f32>),
    Sigmoid(Var),
    Tanh(Var),
    Spike(Var, f32),
    Reset(Var, Var),
    Leaky(Var, Var, Var),
    Conv2d(Var, Var, ConvGeom),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        mode: BnMode,
    },
    Linear(Var, Var, Option<Var>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    CrossEntropy(Var, Vec<usize>, Vec<f32>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode gradient record.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and [`Tape::backward`] visits each node once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    surrogate: Surrogate,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Split `shape` around `axis` into (outer, dim, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Broadcast layout of a per-layer (1) or per-channel (axis 1) parameter.
#[derive(Clone, Copy)]
struct Bcast {
    channels: usize,
    inner: usize,
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        if self.channels == 1 {
            0
        } else {
            (i / self.inner) % self.channels
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_surrogate(Surrogate::default())
    }

    pub fn with_surrogate(surrogate: Surrogate) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            surrogate,
            backward_done: false,
        }
    }

    pub fn surrogate(&self) -> Surrogate {
        self.surrogate
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record an input value. Gradients are kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn bcast(&self, x: Var, p: Var, what: &str) -> Result<Bcast> {
        let shape = self.shape(x);
        let n = self.nodes[p.0].value.numel();
        if n == 1 {
            return Ok(Bcast {
                channels: 1,
                inner: 1,
            });
        }
        if shape.len() >= 2 && shape[1] == n {
            return Ok(Bcast {
                channels: n,
                inner: shape[2..].iter().product(),
            });
        }
        Err(Error::shape(format!(
            "{what}: parameter of length {n} does not broadcast over {shape:?}"
        )))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data).expect("shape preserved");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x), data).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        self.map(x, Op::Affine(x, scale), |v| scale * v + shift)
    }

    /// Multiply by a scalar (`[1]`) or per-channel (`[C]`, axis 1) parameter.
    pub fn mul_bcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let b = self.bcast(x, p, "mul_bcast")?;
        let pd = self.data(p);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * pd[b.index(i)])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, p]);
        Ok(self.push(value, Op::MulBcast(x, p), rg))
    }

    /// `x + sign·p` with `p` broadcast like [`Tape::mul_bcast`].
    pub fn add_bcast(&mut self, x: Var, p: Var, sign: f32) -> Result<Var> {
        let b = self.bcast(x, p, "add_bcast")?;
        let pd = self.data(p);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + sign * pd[b.index(i)])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, p]);
        Ok(self.push(value, Op::AddBcast(x, p, sign), rg))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f32>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape("mul_const: mask length"));
        }
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst(x, mask), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f32::tanh)
    }

    /// Heaviside step `v ≥ threshold` with the surrogate derivative on the way back.
    pub fn spike(&mut self, v: Var, threshold: f32) -> Var {
        self.map(v, Op::Spike(v, threshold), |x| {
            if x >= threshold {
                1.0
            } else {
                0.0
            }
        })
    }

    /// `v · (1 − s)`.
    pub fn reset(&mut self, v: Var, s: Var) -> Result<Var> {
        self.same_shape(v, s, "reset")?;
        Ok(self.zip(v, s, Op::Reset(v, s), |a, b| a * (1.0 - b)))
    }

    /// `decay·prev + (1 − decay)·input`, decay broadcast like [`Tape::mul_bcast`].
    pub fn leaky(&mut self, prev: Var, input: Var, decay: Var) -> Result<Var> {
        self.same_shape(prev, input, "leaky")?;
        let b = self.bcast(prev, decay, "leaky")?;
        let d = self.data(decay);
        let data = self
            .data(prev)
            .iter()
            .zip(self.data(input))
            .enumerate()
            .map(|(i, (&p, &x))| {
                let a = d[b.index(i)];
                a * p + (1.0 - a) * x
            })
            .collect();
        let value = Tensor::new(self.shape(prev), data)?;
        let rg = self.rg(&[prev, input, decay]);
        Ok(self.push(value, Op::Leaky(prev, input, decay), rg))
    }

    /// 2-D cross-correlation of `[N, C, H, W]` with `[C_out, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d: stride must be positive"));
        }
        let g = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, padding).ok_or_else(|| {
            Error::shape(format!("conv2d: kernel {} larger than padded input", ws[2]))
        })?;
        let (n, c_out) = (xs[0], ws[0]);
        let plane = g.out_plane();
        let in_len = g.c_in * g.h * g.w;
        let mut out = vec![0.0f32; n * c_out * plane];
        let mut cols = Vec::new();
        let mut out_t = Vec::new();
        let xd = self.data(x);
        let wd = self.data(w);
        let mut wt = vec![0.0f32; wd.len()];
        transpose(wd, c_out, g.patch_len(), &mut wt);
        for s in 0..n {
            let img = &xd[s * in_len..(s + 1) * in_len];
            let dst = &mut out[s * c_out * plane..(s + 1) * c_out * plane];
            if img.iter().all(|&v| v == 0.0) {
                continue;
            }
            if is_sparse(img) {
                out_t.resize(plane * c_out, 0.0);
                conv_scatter(&g, img, &wt, c_out, &mut out_t);
                transpose(&out_t, plane, c_out, dst);
            } else {
                cols.resize(g.patch_len() * plane, 0.0);
                im2col(&g, img, &mut cols);
                gemm(c_out, g.patch_len(), plane, wd, false, &cols, false, dst, 0.0);
            }
        }
        let value = Tensor::new(&[n, c_out, g.h_out, g.w_out], out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d(x, w, g), rg))
    }

    /// Batch normalization over every axis except 1.
    ///
    /// In train mode the statistics come from the batch and the running
    /// statistics are updated by momentum; in eval mode the running
    /// statistics are used as-is.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm: input needs a channel axis"));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let outer = shape[0];
        if self.value(gamma).numel() != c
            || self.value(beta).numel() != c
            || stats.mean.len() != c
            || stats.var.len() != c
        {
            return Err(Error::shape(format!(
                "batch_norm: parameters do not match {c} channels"
            )));
        }
        let xd = self.data(x);
        let count = (outer * inner) as f64;
        let (mean, var): (Vec<f32>, Vec<f32>) = match mode {
            BnMode::Eval => (stats.mean.clone(), stats.var.clone()),
            BnMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut sq = vec![0.0f64; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for &v in &xd[base..base + inner] {
                            mean[ch] += v as f64;
                            sq[ch] += (v as f64) * (v as f64);
                        }
                    }
                }
                let mut m32 = vec![0.0f32; c];
                let mut v32 = vec![0.0f32; c];
                for ch in 0..c {
                    let m = mean[ch] / count;
                    let v = (sq[ch] / count - m * m).max(0.0);
                    m32[ch] = m as f32;
                    v32[ch] = v as f32;
                    let unbiased = if count > 1.0 { v * count / (count - 1.0) } else { v };
                    stats.mean[ch] =
                        (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * m as f32;
                    stats.var[ch] =
                        (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased as f32;
                }
                (m32, v32)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        if !rg {
            xhat = Vec::new();
        }
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            rg,
        ))
    }

    /// `x·Wᵀ + b` for `x: [N, F_in]`, `W: [F_out, F_in]`, `b: [F_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, f_in, f_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0f32; n * f_out];
        if let Some(b) = b {
            let bd = self.data(b);
            if bd.len() != f_out {
                return Err(Error::shape("linear: bias length"));
            }
            for row in out.chunks_mut(f_out) {
                row.copy_from_slice(bd);
            }
        }
        gemm(n, f_in, f_out, self.data(x), false, self.data(w), true, &mut out, 1.0);
        let value = Tensor::new(&[n, f_out], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(value, Op::Linear(x, w, b), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::arg("concat: no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat: axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!("concat: {:?} vs {base:?}", s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let d = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * d..(o + 1) * d]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), rg))
    }

    /// Slice `[start, start + len)` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow_rows(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow(x, start, len), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reduce: axis out of range"));
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let src = &xd[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            let s = 1.0 / dim as f32;
            out.iter_mut().for_each(|v| *v *= s);
        }
        let mut oshape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let value = Tensor::new(&oshape, out)?;
        let rg = self.rg(&[x]);
        let op = if mean { Op::Mean(x, axis) } else { Op::Sum(x, axis) };
        Ok(self.push(value, op, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f32 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Gradient barrier: copies the value into a fresh constant.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Softmax cross-entropy of `[N, C]` logits, averaged over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} with {} labels",
                labels.len()
            )));
        }
        let c = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0f32; ld.len()];
        let mut loss = 0.0f64;
        for (n, &y) in labels.iter().enumerate() {
            let row = &ld[n * c..(n + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            for (p, &v) in probs[n * c..(n + 1) * c].iter_mut().zip(row) {
                *p = ((v as f64 - m).exp() / z) as f32;
            }
            loss += z.ln() + m - row[y] as f64;
        }
        let value = Tensor::scalar((loss / labels.len() as f64) as f32);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy(logits, labels.to_vec(), probs),
            rg,
        ))
    }

    /// Backpropagate from a scalar. Gradients of `requires_grad` leaves are kept.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call zero_grads first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    /// Clear gradients so [`Tape::backward`] may run again.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        let Tape { nodes, grads, surrogate, .. } = self;
        let nodes: &Vec<Node> = nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.numel();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(slot);
            }
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| axpy(ga, g, 1.0));
                acc(*b, &mut |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((s, &gi), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *s += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((s, &gi), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *s += gi * x;
                    }
                });
            }
            Op::Affine(x, scale) => acc(*x, &mut |gx| axpy(gx, g, *scale)),
            Op::MulBcast(x, p) => {
                let b = bcast_of(nodes, *x, *p);
                let (xd, pd) = (val(*x), val(*p));
                acc(*x, &mut |gx| {
                    for (j, (s, &gi)) in gx.iter_mut().zip(g).enumerate() {
                        *s += gi * pd[b.index(j)];
                    }
                });
                acc(*p, &mut |gp| {
                    for (j, (&gi, &xv)) in g.iter().zip(xd).enumerate() {
                        gp[b.index(j)] += gi * xv;
                    }
                });
            }
            Op::AddBcast(x, p, sign) => {
                let b = bcast_of(nodes, *x, *p);
                acc(*x, &mut |gx| axpy(gx, g, 1.0));
                acc(*p, &mut |gp| {
                    for (j, &gi) in g.iter().enumerate() {
                        gp[b.index(j)] += sign * gi;
                    }
                });
            }
            Op::MulConst(x, mask) => acc(*x, &mut |gx| {
                for ((s, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *s += gi * m;
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((s, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    *s += gi * y * (1.0 - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((s, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    *s += gi * (1.0 - y * y);
                }
            }),
            Op::Spike(v, thr) => {
                let vd = val(*v);
                let sg = *surrogate;
                acc(*v, &mut |gv| {
                    for ((s, &gi), &x) in gv.iter_mut().zip(g).zip(vd) {
                        *s += gi * sg.grad(x - thr);
                    }
                });
            }
            Op::Reset(v, sp) => {
                let (vd, sd) = (val(*v), val(*sp));
                acc(*v, &mut |gv| {
                    for ((s, &gi), &k) in gv.iter_mut().zip(g).zip(sd) {
                        *s += gi * (1.0 - k);
                    }
                });
                acc(*sp, &mut |gs| {
                    for ((s, &gi), &x) in gs.iter_mut().zip(g).zip(vd) {
                        *s -= gi * x;
                    }
                });
            }
            Op::Leaky(prev, input, decay) => {
                let b = bcast_of(nodes, *prev, *decay);
                let (pd, xd, dd) = (val(*prev), val(*input), val(*decay));
                acc(*prev, &mut |gp| {
                    for (j, (s, &gi)) in gp.iter_mut().zip(g).enumerate() {
                        *s += gi * dd[b.index(j)];
                    }
                });
                acc(*input, &mut |gx| {
                    for (j, (s, &gi)) in gx.iter_mut().zip(g).enumerate() {
                        *s += gi * (1.0 - dd[b.index(j)]);
                    }
                });
                acc(*decay, &mut |ga| {
                    for (j, &gi) in g.iter().enumerate() {
                        ga[b.index(j)] += gi * (pd[j] - xd[j]);
                    }
                });
            }
            Op::Conv2d(x, w, geom) => {
                let geom = *geom;
                let c_out = nodes[w.0].value.shape()[0];
                let n = nodes[x.0].value.shape()[0];
                let plane = geom.out_plane();
                let in_len = geom.c_in * geom.h * geom.w;
                let k = geom.patch_len();
                let (xd, wd) = (val(*x), val(*w));
                let mut cols = vec![0.0f32; k * plane];
                acc(*w, &mut |gw| {
                    let mut gw_t = vec![0.0f32; k * c_out];
                    let mut go_t = vec![0.0f32; plane * c_out];
                    for s in 0..n {
                        let img = &xd[s * in_len..(s + 1) * in_len];
                        if img.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let go = &g[s * c_out * plane..(s + 1) * c_out * plane];
                        if is_sparse(img) {
                            transpose(go, c_out, plane, &mut go_t);
                            conv_weight_grad_scatter(&geom, img, &go_t, c_out, &mut gw_t);
                        } else {
                            im2col(&geom, img, &mut cols);
                            gemm(c_out, plane, k, go, false, &cols, true, gw, 1.0);
                        }
                    }
                    for (row, chunk) in gw_t.chunks(c_out).enumerate() {
                        for (co, &v) in chunk.iter().enumerate() {
                            gw[co * k + row] += v;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for s in 0..n {
                        let go = &g[s * c_out * plane..(s + 1) * c_out * plane];
                        gemm(k, c_out, plane, wd, true, go, false, &mut cols, 0.0);
                        col2im(&geom, &cols, &mut gx[s * in_len..(s + 1) * in_len]);
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let shape = nodes[x.0].value.shape();
                let (outer, c, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            sum_g[ch] += g[j] as f64;
                            sum_gx[ch] += (g[j] * xhat[j]) as f64;
                        }
                    }
                }
                let gd = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch] as f32;
                    }
                });
                acc(*beta, &mut |gb| {
                    for ch in 0..c {
                        gb[ch] += sum_g[ch] as f32;
                    }
                });
                let m = (outer * inner) as f32;
                let mode = *mode;
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let scale = gd[ch] * inv_std[ch];
                            match mode {
                                BnMode::Eval => {
                                    for j in base..base + inner {
                                        gx[j] += scale * g[j];
                                    }
                                }
                                BnMode::Train => {
                                    let mg = sum_g[ch] as f32 / m;
                                    let mgx = sum_gx[ch] as f32 / m;
                                    for j in base..base + inner {
                                        gx[j] += scale * (g[j] - mg - xhat[j] * mgx);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Linear(x, w, b) => {
                let xs = nodes[x.0].value.shape();
                let (n, f_in) = (xs[0], xs[1]);
                let f_out = nodes[w.0].value.shape()[0];
                let (xd, wd) = (val(*x), val(*w));
                acc(*x, &mut |gx| gemm(n, f_out, f_in, g, false, wd, false, gx, 1.0));
                acc(*w, &mut |gw| gemm(f_out, n, f_in, g, true, xd, false, gw, 1.0));
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for row in g.chunks(f_out) {
                            axpy(gb, row, 1.0);
                        }
                    });
                }
            }
            Op::Concat(inputs, axis) => {
                let shape = nodes[i].value.shape();
                let (outer, total, inner) = axis_split(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = nodes[v.0].value.shape()[*axis] * inner;
                    acc(v, &mut |gv| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + d];
                            axpy(&mut gv[o * d..(o + 1) * d], src, 1.0);
                        }
                    });
                    offset += d;
                }
            }
            Op::Narrow(x, start, len) => {
                let rows = nodes[x.0].value.shape()[0];
                let inner = nodes[x.0].value.numel() / rows;
                let (start, len) = (*start, *len);
                acc(*x, &mut |gx| {
                    axpy(&mut gx[start * inner..(start + len) * inner], g, 1.0)
                });
            }
            Op::Reshape(x) => acc(*x, &mut |gx| axpy(gx, g, 1.0)),
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let shape = nodes[x.0].value.shape();
                let (outer, dim, inner) = axis_split(shape, *axis);
                let scale = if matches!(nodes[i].op, Op::Mean(..)) {
                    1.0 / dim as f32
                } else {
                    1.0
                };
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            axpy(&mut gx[base..base + inner], src, scale);
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|s| *s += g[0])),
            Op::CrossEntropy(logits, labels, probs) => {
                let c = nodes[logits.0].value.shape()[1];
                let scale = g[0] / labels.len() as f32;
                acc(*logits, &mut |gl| {
                    for (n, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[n * c + j] += scale * (probs[n * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn bcast_of(nodes: &[Node], x: Var, p: Var) -> Bcast {
    let n = nodes[p.0].value.numel();
    if n == 1 {
        Bcast {
            channels: 1,
            inner: 1,
        }
    } else {
        Bcast {
            channels: n,
            inner: nodes[x.0].value.shape()[2..].iter().product(),
        }
    }
}

#[inline]
fn axpy(dst: &mut [f32], src: &[f32], a: f32) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}
