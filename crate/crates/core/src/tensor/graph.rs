// Reverse-mode tape.
//
// Nodes are appended in evaluation order, so node indices are a topological
// order by construction. `backward` walks indices downward from the loss and
// visits each node once.

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

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
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        // im2col buffers, one [C*kh*kw, OH*OW] block per batch entry
        cols: Vec<f64>,
    },
    Relu(Var),
    AvgPool2d { input: Var, size: usize },
    GlobalAvgPool(Var),
    Linear { input: Var, weight: Var, bias: Var },
    ChannelAffine { input: Var, scale: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gather { input: Var, index: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LogSumExp(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only computation graph with reverse-mode differentiation.
///
/// `requires_grad` propagates from inputs to outputs. After [`Graph::backward`]
/// every node that requires grad carries an accumulated gradient, including
/// intermediate nodes. Gradients add up across repeated `backward` calls
/// until [`Graph::reset_grads`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(d, s)| *d += s),
        None => *dst = Some(src),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite() || !self.all_inputs_finite(&op));
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn all_inputs_finite(&self, op: &Op) -> bool {
        op_inputs(op).iter().all(|v| self.nodes[v.0].value.all_finite())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Adds a leaf node.
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if `backward` has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Cross-correlation of `[N,C,H,W]` with `[K,C,kh,kw]` plus per-channel bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let x = self.value(input);
        let w = self.value(kernel);
        let b = self.value(bias);
        let (n, c, h, wd) = x.dims4()?;
        let (k, kc, kh, kw) = w.dims4()?;
        if kc != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels, kernel expects {kc}")));
        }
        if b.shape() != [k] {
            return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{k}]", b.shape())));
        }
        let (hp, wp) = (h + 2 * padding, wd + 2 * padding);
        if kh > hp || kw > wp {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {hp}x{wp}")));
        }
        if (hp - kh) % stride != 0 || (wp - kw) % stride != 0 {
            return Err(Error::shape("conv2d", "output size is not integral for this stride"));
        }
        let (oh, ow) = ((hp - kh) / stride + 1, (wp - kw) / stride + 1);
        let ckk = c * kh * kw;
        let ohw = oh * ow;
        let mut cols = vec![0.0; n * ckk * ohw];
        let mut out = vec![0.0; n * k * ohw];
        let xd = x.data();
        for bi in 0..n {
            let col = &mut cols[bi * ckk * ohw..(bi + 1) * ckk * ohw];
            im2col(&xd[bi * c * h * wd..(bi + 1) * c * h * wd], (c, h, wd), (kh, kw), stride, padding, (oh, ow), col);
            let o = &mut out[bi * k * ohw..(bi + 1) * k * ohw];
            for (ki, row) in o.chunks_mut(ohw).enumerate() {
                row.fill(b.data()[ki]);
            }
            gemm(k, ckk, ohw, Mat::n(w.data()), Mat::n(col), 1.0, o);
        }
        let value = Tensor::new(vec![n, k, oh, ow], out)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, stride, padding, cols }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.rg(&[input]);
        self.push(value, Op::Relu(input), rg)
    }

    /// Non-overlapping average pooling with a square `size` window.
    pub fn avgpool2d(&mut self, input: Var, size: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::shape("avgpool2d", format!("{h}x{w} not divisible by window {size}")));
        }
        let (oh, ow) = (h / size, w / size);
        let inv = 1.0 / (size * size) as f64;
        let xd = x.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / size) * ow + j / size] += src[i * w + j];
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::AvgPool2d { input, size }, rg))
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::GlobalAvgPool(input), rg))
    }

    /// `input · weightᵀ + bias` with `input: [N,D]`, `weight: [C,D]`, `bias: [C]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, d) = x.dims2()?;
        let (c, wd) = w.dims2()?;
        if wd != d || b.shape() != [c] {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        gemm(n, d, c, Mat::n(x.data()), Mat::t(w.data()), 1.0, &mut out);
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Fixed per-channel affine map `x * scale[c] + shift[c]` on `[N,C,H,W]`.
    pub fn channel_affine(&mut self, input: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::shape("channel_affine", format!("{c} channels, {} scales, {} shifts", scale.len(), shift.len())));
        }
        let mut out = x.data().to_vec();
        for (p, plane) in out.chunks_mut(h * w).enumerate() {
            let ch = p % c;
            plane.iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::ChannelAffine { input, scale: scale.to_vec() }, rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(op, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Picks `input[n, index[n]]` from a `[N,C]` tensor, giving `[N]`.
    pub fn gather(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let (n, c) = x.dims2()?;
        if index.len() != n {
            return Err(Error::shape("gather", format!("{} indices for {n} rows", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::InvalidArgument(format!("gather: index {bad} out of range [0, {c})")));
        }
        let out = index.iter().enumerate().map(|(r, &i)| x.data()[r * c + i]).collect();
        let value = Tensor::new(vec![n], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Gather { input, index: index.to_vec() }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Row-wise softmax of a `[N,C]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c) = x.dims2()?;
        let out: Vec<f64> = x.rows().flat_map(super::softmax).collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::Softmax(input), rg))
    }

    /// Row-wise log-sum-exp of a `[N,C]` tensor, giving `[N]`.
    pub fn logsumexp(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, _) = x.dims2()?;
        let out = x.rows().map(super::logsumexp).collect();
        let value = Tensor::new(vec![n], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Op::LogSumExp(input), rg))
    }

    /// Mean over the batch of `logsumexp(logits_n) - logits_n[label_n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, c) = x.dims2()?;
        if labels.is_empty() {
            return Err(Error::InvalidArgument("cross_entropy: empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("cross_entropy: label {bad} out of range [0, {c})")));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(n * c);
        for (row, &l) in x.rows().zip(labels) {
            loss += super::logsumexp(row) - row[l];
            probs.extend(super::softmax(row));
        }
        let value = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Back-propagates from a single-element `loss`, adding into `grad` of
    /// every node that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local)?;
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride, padding, cols } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let wt = self.value(*kernel);
                let (k, _, kh, kw) = wt.dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let (ckk, ohw) = (c * kh * kw, oh * ow);
                if needs(bias) {
                    let mut db = vec![0.0; k];
                    for (p, plane) in g.chunks(ohw).enumerate() {
                        db[p % k] += plane.iter().sum::<f64>();
                    }
                    add_owned(&mut local[bias.0], db);
                }
                if needs(kernel) {
                    let mut dw = vec![0.0; k * ckk];
                    for bi in 0..n {
                        let go = &g[bi * k * ohw..(bi + 1) * k * ohw];
                        let col = &cols[bi * ckk * ohw..(bi + 1) * ckk * ohw];
                        gemm(k, ohw, ckk, Mat::n(go), Mat::t(col), 1.0, &mut dw);
                    }
                    add_owned(&mut local[kernel.0], dw);
                }
                if needs(input) {
                    let mut dx = vec![0.0; n * c * h * w];
                    let mut dcol = vec![0.0; ckk * ohw];
                    for bi in 0..n {
                        let go = &g[bi * k * ohw..(bi + 1) * k * ohw];
                        gemm(ckk, k, ohw, Mat::t(wt.data()), Mat::n(go), 0.0, &mut dcol);
                        col2im(&dcol, (c, h, w), (kh, kw), *stride, *padding, (oh, ow), &mut dx[bi * c * h * w..(bi + 1) * c * h * w]);
                    }
                    add_owned(&mut local[input.0], dx);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = g.iter().zip(x).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect();
                add_owned(&mut local[a.0], d);
            }
            Op::AvgPool2d { input, size } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let (oh, ow) = (h / size, w / size);
                let inv = 1.0 / (size * size) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let go = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            dst[i * w + j] = go[(i / size) * ow + j / size] * inv;
                        }
                    }
                }
                add_owned(&mut local[input.0], dx);
            }
            Op::GlobalAvgPool(a) => {
                let (_, _, h, w) = self.value(*a).dims4()?;
                let inv = 1.0 / (h * w) as f64;
                let dx = g.iter().flat_map(|&v| std::iter::repeat(v * inv).take(h * w)).collect();
                add_owned(&mut local[a.0], dx);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d) = x.dims2()?;
                let (c, _) = wt.dims2()?;
                if needs(bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    add_owned(&mut local[bias.0], db);
                }
                if needs(weight) {
                    let mut dw = vec![0.0; c * d];
                    gemm(c, n, d, Mat::t(g), Mat::n(x.data()), 0.0, &mut dw);
                    add_owned(&mut local[weight.0], dw);
                }
                if needs(input) {
                    let mut dx = vec![0.0; n * d];
                    gemm(n, c, d, Mat::n(g), Mat::n(wt.data()), 0.0, &mut dx);
                    add_owned(&mut local[input.0], dx);
                }
            }
            Op::ChannelAffine { input, scale } => {
                let (_, c, h, w) = self.value(*input).dims4()?;
                let mut dx = g.to_vec();
                for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                    let s = scale[p % c];
                    plane.iter_mut().for_each(|v| *v *= s);
                }
                add_owned(&mut local[input.0], dx);
            }
            Op::Add(a, b) => {
                if needs(a) {
                    add_into(&mut local[a.0], g);
                }
                if needs(b) {
                    add_into(&mut local[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_into(&mut local[a.0], g);
                }
                if needs(b) {
                    add_owned(&mut local[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if needs(a) {
                    add_owned(&mut local[a.0], g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                if needs(b) {
                    add_owned(&mut local[b.0], g.iter().zip(x).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => add_owned(&mut local[a.0], g.iter().map(|v| v * f).collect()),
            Op::Sum(a) => add_owned(&mut local[a.0], vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let m = self.value(*a).numel();
                add_owned(&mut local[a.0], vec![g[0] / m as f64; m]);
            }
            Op::Gather { input, index } => {
                let (n, c) = self.value(*input).dims2()?;
                let mut dx = vec![0.0; n * c];
                for (r, &i) in index.iter().enumerate() {
                    dx[r * c + i] = g[r];
                }
                add_owned(&mut local[input.0], dx);
            }
            Op::Reshape(a) => add_into(&mut local[a.0], g),
            Op::Softmax(a) => {
                let (_, c) = node.value.dims2()?;
                let mut dx = Vec::with_capacity(g.len());
                for (y, gr) in node.value.data().chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    dx.extend(y.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                add_owned(&mut local[a.0], dx);
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a);
                let mut dx = Vec::with_capacity(x.numel());
                for (row, &gr) in x.rows().zip(g) {
                    dx.extend(super::softmax(row).into_iter().map(|p| p * gr));
                }
                add_owned(&mut local[a.0], dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (n, c) = self.value(*logits).dims2()?;
                let s = g[0] / n as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dx[r * c + l] -= s;
                }
                add_owned(&mut local[logits.0], dx);
            }
        }
        Ok(())
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { input, kernel, bias, .. } => vec![*input, *kernel, *bias],
        Op::Linear { input, weight, bias } => vec![*input, *weight, *bias],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Relu(a)
        | Op::GlobalAvgPool(a)
        | Op::Scale(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a)
        | Op::Softmax(a)
        | Op::LogSumExp(a) => vec![*a],
        Op::AvgPool2d { input, .. } | Op::ChannelAffine { input, .. } | Op::Gather { input, .. } => vec![*input],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    col: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = &mut col[((ci * kh + a) * kw + b) * ohw..][..ohw];
                for oi in 0..oh {
                    let ii = (oi * stride + a) as isize - pad as isize;
                    let dst = &mut row[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..][..w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + b) as isize - pad as isize;
                        *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    dx: &mut [f64],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = &col[((ci * kh + a) * kw + b) * ohw..][..ohw];
                for oi in 0..oh {
                    let ii = (oi * stride + a) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(ci * h + ii as usize) * w..][..w];
                    for oj in 0..ow {
                        let jj = (oj * stride + b) as isize - pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += row[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}
