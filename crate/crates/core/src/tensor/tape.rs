//! Wengert-list reverse-mode autodiff.
//!
//! Every op evaluates eagerly, stores its output on the tape and records
//! enough context to run its adjoint. Gradients are accumulated in reverse
//! insertion order with a fixed summation order.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch mean and biased variance.
pub type BatchMoments<T> = (Vec<T>, Vec<T>);

/// Statistics source for a batch-norm node.
#[derive(Clone, Debug)]
pub enum NormStats<'a, T> {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Fixed {
        mean: &'a [T],
        var: &'a [T],
        eps: f64,
    },
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
    Linear {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Add(Var, Var),
    ChannelScale {
        scale: Var,
        input: Var,
    },
    GlobalAvgPool(Var),
    ChannelMean(Var),
    Relu(Var),
    Sigmoid(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Concat(Var, Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<(usize, usize)>,
        lambda: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::ChannelScale { .. } => "channel_scale",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::ChannelMean(_) => "channel_mean",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a = *a + c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = self.requires(parents);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(kernel), stride, pad)?;
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(kernel).data());
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        self.push(value, Op::Conv2d { x, kernel, geom }, &[x, kernel])
    }

    /// `y = x·Wᵀ + b` with `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (batch, fin) = self.value(x).dims2("linear input")?;
        let (fout, win) = self.value(weight).dims2("linear weight")?;
        if fin != win {
            return Err(Error::dim("linear", "in_features", win, fin));
        }
        let mut out = vec![T::zero(); batch * fout];
        kernels::gemm_nt(
            batch,
            fout,
            fin,
            self.value(x).data(),
            self.value(weight).data(),
            &mut out,
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.len() != fout {
                return Err(Error::dim("linear", "bias", fout, bv.len()));
            }
            for row in out.chunks_exact_mut(fout) {
                for (y, &bb) in row.iter_mut().zip(bv.data()) {
                    *y = *y + bb;
                }
            }
        }
        let value = Tensor::new(vec![batch, fout], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(value, Op::Linear { x, weight, bias }, &parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_mismatch("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Multiplies every spatial position of channel `c` by `scale[n, c]`.
    pub fn channel_scale(&mut self, scale: Var, input: Var) -> Result<Var> {
        let (n, h, w, c) = self.value(input).dims4("channel_scale")?;
        let (sn, sc) = self.value(scale).dims2("channel_scale factors")?;
        if sn != n {
            return Err(Error::dim("channel_scale", "batch", n, sn));
        }
        if sc != c {
            return Err(Error::dim("channel_scale", "channels", c, sc));
        }
        let s = self.value(scale).data();
        let u = self.value(input).data();
        let mut out = Vec::with_capacity(u.len());
        for b in 0..n {
            let sb = &s[b * c..(b + 1) * c];
            for row in u[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                out.extend(row.iter().zip(sb).map(|(&x, &f)| f * x));
            }
        }
        let value = Tensor::new(vec![n, h, w, c], out)?;
        self.push(value, Op::ChannelScale { scale, input }, &[scale, input])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, h, w, c) = self.value(x).dims4("global_avg_pool")?;
        let out = kernels::global_avg_pool(n, h, w, c, self.value(x).data())?;
        let value = Tensor::new(vec![n, c], out)?;
        self.push(value, Op::GlobalAvgPool(x), &[x])
    }

    /// Mean over the last axis; the last extent becomes 1.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap_or(&1);
        let inv = T::one() / T::of(k as f64);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks_exact(k)
            .map(|row| row.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::ChannelMean(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Batch normalization over the last (channel) axis. Returns the output
    /// and, for batch statistics, the biased batch mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let c = *self.shape(x).last().unwrap();
        for (p, axis) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(p).len() != c {
                return Err(Error::dim("batch_norm", axis, c, self.value(p).len()));
            }
        }
        let xv = self.value(x).data();
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let (m, v) = kernels::channel_moments(xv, c);
                (m, v, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm", "running stats", c, mean.len()));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(g[ch] * h + b[ch]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Concatenates two `[batch, f]` matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, fa) = self.value(a).dims2("concat")?;
        let (nb, fb) = self.value(b).dims2("concat")?;
        if na != nb {
            return Err(Error::dim("concat", "batch", na, nb));
        }
        let mut data = Vec::with_capacity(na * (fa + fb));
        for i in 0..na {
            data.extend_from_slice(&self.value(a).data()[i * fa..(i + 1) * fa]);
            data.extend_from_slice(&self.value(b).data()[i * fb..(i + 1) * fb]);
        }
        let value = Tensor::new(vec![na, fa + fb], data)?;
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Per-sample gather: `out[n, i] = x[n, index[i]]` over the flattened
    /// non-batch axes. `shape` excludes the batch axis.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.shape(x)[0];
        let per = self.value(x).len() / n;
        let out_per: usize = shape.iter().product();
        if out_per != index.len() {
            return Err(Error::dim("gather", "index", out_per, index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= per) {
            return Err(Error::dim("gather", "source", per, bad + 1));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * out_per);
        for b in 0..n {
            let row = &src[b * per..(b + 1) * per];
            data.extend(index.iter().map(|&i| row[i]));
        }
        let mut full = vec![n];
        full.extend_from_slice(shape);
        let value = Tensor::new(full, data)?;
        self.push(value, Op::Gather { x, index }, &[x])
    }

    /// `Σ x_i · w_i` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::dim(
                "weighted_sum",
                "weights",
                self.value(x).len(),
                weights.len(),
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x])
    }

    /// Mean softmax cross-entropy. With mixup each sample contributes
    /// `λ·CE(target_a) + (1−λ)·CE(target_b)`; plain training passes
    /// identical targets and `λ = 1`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[(usize, usize)],
        lambda: T,
    ) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", "targets", n, targets.len()));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (row, &(ta, tb)) in z.chunks_exact(k).zip(targets) {
            if ta >= k || tb >= k {
                return Err(Error::dim("cross_entropy", "class", k, ta.max(tb) + 1));
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp());
            let log_sum = sum.ln() + max;
            probs.extend(row.iter().map(|&v| (v - log_sum).exp()));
            let ce_a = log_sum - row[ta];
            let ce_b = log_sum - row[tb];
            total = total + lambda * ce_a + (T::one() - lambda) * ce_b;
        }
        let loss = total / T::of(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                lambda,
            },
            &[logits],
        )
    }

    /// Runs the adjoint sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward", "root", 1, self.value(root).len()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", node.op.name())));
            }
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, kernel, geom } => {
                let mut dx = self
                    .wants(*x)
                    .then(|| vec![T::zero(); self.value(*x).len()]);
                let mut dk = self
                    .wants(*kernel)
                    .then(|| vec![T::zero(); self.value(*kernel).len()]);
                kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    dy,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dk) = dk {
                    accumulate(&mut grads[kernel.0], dk);
                }
            }
            Op::Linear { x, weight, bias } => {
                let (batch, fin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fout = self.shape(*weight)[0];
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * fin];
                    kernels::gemm_nn(batch, fout, fin, dy, self.value(*weight).data(), &mut dx);
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); fout * fin];
                    kernels::gemm_tn(batch, fout, fin, dy, self.value(*x).data(), &mut dw);
                    accumulate(&mut grads[weight.0], dw);
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let mut db = vec![T::zero(); fout];
                    for row in dy.chunks_exact(fout) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.0], dy.to_vec());
                    }
                }
            }
            Op::ChannelScale { scale, input } => {
                let (n, h, w, c) = self.value(*input).dims4("channel_scale").unwrap();
                let s = self.value(*scale).data();
                let u = self.value(*input).data();
                if self.wants(*scale) {
                    let mut ds = vec![T::zero(); n * c];
                    for b in 0..n {
                        let acc = &mut ds[b * c..(b + 1) * c];
                        let span = b * h * w * c..(b + 1) * h * w * c;
                        for (urow, drow) in u[span.clone()]
                            .chunks_exact(c)
                            .zip(dy[span].chunks_exact(c))
                        {
                            for ((a, &uv), &dv) in acc.iter_mut().zip(urow).zip(drow) {
                                *a = *a + uv * dv;
                            }
                        }
                    }
                    accumulate(&mut grads[scale.0], ds);
                }
                if self.wants(*input) {
                    let mut du = Vec::with_capacity(u.len());
                    for b in 0..n {
                        let sb = &s[b * c..(b + 1) * c];
                        for drow in dy[b * h * w * c..(b + 1) * h * w * c].chunks_exact(c) {
                            du.extend(drow.iter().zip(sb).map(|(&d, &f)| d * f));
                        }
                    }
                    accumulate(&mut grads[input.0], du);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let (n, h, w, c) = self.value(*x).dims4("global_avg_pool").unwrap();
                    let scale = T::one() / T::of((h * w) as f64);
                    let mut dx = Vec::with_capacity(n * h * w * c);
                    for b in 0..n {
                        let g = &dy[b * c..(b + 1) * c];
                        for _ in 0..h * w {
                            dx.extend(g.iter().map(|&v| v * scale));
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::ChannelMean(x) => {
                if self.wants(*x) {
                    let k = *self.shape(*x).last().unwrap();
                    let inv = T::one() / T::of(k as f64);
                    let dx = dy
                        .iter()
                        .flat_map(|&g| std::iter::repeat_n(g * inv, k))
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(dy)
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy[ch] = sum_dy[ch] + drow[ch];
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + drow[ch] * hrow[ch];
                    }
                }
                if self.wants(*gamma) {
                    accumulate(&mut grads[gamma.0], sum_dy_xhat.clone());
                }
                if self.wants(*beta) {
                    accumulate(&mut grads[beta.0], sum_dy.clone());
                }
                if self.wants(*x) {
                    let g = self.value(*gamma).data();
                    let m = T::of(rows as f64);
                    let mut dx = Vec::with_capacity(xhat.len());
                    for (drow, hrow) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            let d = if *batch_stats {
                                scale / m * (m * drow[ch] - sum_dy[ch] - hrow[ch] * sum_dy_xhat[ch])
                            } else {
                                scale * drow[ch]
                            };
                            dx.push(d);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Concat(a, b) => {
                let (n, fa) = (self.shape(*a)[0], self.shape(*a)[1]);
                let fb = self.shape(*b)[1];
                if self.wants(*a) {
                    let da = (0..n)
                        .flat_map(|i| dy[i * (fa + fb)..i * (fa + fb) + fa].iter().copied())
                        .collect();
                    accumulate(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let db = (0..n)
                        .flat_map(|i| dy[i * (fa + fb) + fa..(i + 1) * (fa + fb)].iter().copied())
                        .collect();
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dy.to_vec());
                }
            }
            Op::Gather { x, index } => {
                if self.wants(*x) {
                    let n = self.shape(*x)[0];
                    let per = self.value(*x).len() / n;
                    let mut dx = vec![T::zero(); n * per];
                    for b in 0..n {
                        let drow = &dy[b * index.len()..(b + 1) * index.len()];
                        let xrow = &mut dx[b * per..(b + 1) * per];
                        for (&i, &g) in index.iter().zip(drow) {
                            xrow[i] = xrow[i] + g;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let dx = weights.iter().map(|&w| w * dy[0]).collect();
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                lambda,
            } => {
                if self.wants(*logits) {
                    let k = self.shape(*logits)[1];
                    let n = targets.len();
                    let scale = dy[0] / T::of(n as f64);
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &(ta, tb)) in targets.iter().enumerate() {
                        dz[i * k + ta] = dz[i * k + ta] - *lambda * scale;
                        dz[i * k + tb] = dz[i * k + tb] - (T::one() - *lambda) * scale;
                    }
                    accumulate(&mut grads[logits.0], dz);
                }
            }
        }
    }
}

fn shape_mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    if a.len() != b.len() {
        return Error::Rank {
            op,
            expected: a.len(),
            found: b.len(),
        };
    }
    const AXES: [&str; 4] = ["batch", "height", "width", "channels"];
    let axis = a.iter().zip(b).position(|(x, y)| x != y).unwrap_or(0);
    let name = if a.len() == 4 { AXES[axis] } else { "features" };
    Error::dim(op, name, a[axis], b[axis])
}
