//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op appended to it; [`Var`] handles index into the
//! tape. Nodes are appended in evaluation order, so walking the tape backwards
//! is a valid reverse topological order. A graph supports exactly one
//! [`Graph::backward`] call, after which its recorded values are dropped.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    ScalePerSample(Var, Var),
    Relu(Var),
    Upsample2x(Var),
    Concat(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    SoftmaxChannel(Var),
    CrossEntropy {
        logits: Var,
        /// `d loss / d logits` for an upstream gradient of one.
        dlogits: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics from a training-mode normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

pub enum NormMode<'a> {
    Train { eps: f64 },
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
        eps: f64,
    },
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("shape preserved")
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

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "graph already consumed by backward; run a new forward pass".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by graph op");
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant copy of `v`'s value, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise division; any zero in the denominator is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y)?;
        if y.data().contains(&0.0) {
            return Err(Error::Degenerate("division by zero".into()));
        }
        let out = zip_map(x, y, |p, q| p / q);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums everything but the leading axis: `(N, ...) -> (N)`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::Invalid("sum_per_sample on a scalar".into()))?;
        let inner = x.len() / n;
        let data = x.data().chunks(inner).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(vec![n], data)?;
        Ok(self.push(out, Op::SumPerSample(a), &[a]))
    }

    /// `x[n, ...] * s[n]` for `x: (N, ...)`, `s: (N)`.
    pub fn scale_per_sample(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let n = xv.shape().first().copied().unwrap_or(0);
        if sv.shape() != [n] {
            return Err(Error::shape(xv.shape(), sv.shape()));
        }
        let inner = xv.len() / n;
        let data = xv
            .data()
            .chunks(inner)
            .zip(sv.data())
            .flat_map(|(c, &k)| c.iter().map(move |&v| v * k))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScalePerSample(x, s), &[x, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Nearest-neighbour 2× upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let [n, c, h, w] = x.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; n * c * h2 * w2];
        for (p, plane) in x.data().chunks(h * w).enumerate() {
            let dst = &mut data[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![n, c, h2, w2], data)?;
        Ok(self.push(out, Op::Upsample2x(a), &[a]))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Invalid("empty concat".into()))?)
            .dims4()?;
        let [n, _, h, w] = first;
        let mut channels = 0;
        for &p in parts {
            let d = self.value(p).dims4()?;
            if d[0] != n || d[2] != h || d[3] != w {
                return Err(Error::shape(&first, &d));
            }
            channels += d[1];
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for b in 0..n {
            for &p in parts {
                let x = self.value(p);
                let per = x.len() / n;
                data.extend_from_slice(&x.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::new(vec![n, channels, h, w], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// 2-D cross-correlation with square kernels.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [n, ci, h, w] = self.value(input).dims4()?;
        let [co, wci, kh, kw] = self.value(weight).dims4()?;
        if wci != ci || kh != kw {
            return Err(Error::shape(&[n, ci, h, w], self.value(weight).shape()));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [co] {
                return Err(Error::shape(&[co], self.value(b).shape()));
            }
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Invalid(format!(
                "conv geometry: {h}x{w} input, kernel {kh}, stride {stride}, pad {pad}"
            )));
        }
        let geom = ConvGeom {
            batch: n,
            in_channels: ci,
            height: h,
            width: w,
            out_channels: co,
            kernel: kh,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(vec![n, co, geom.out_height(), geom.out_width()], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        ))
    }

    /// Per-channel normalisation with learned scale and shift.
    ///
    /// Training mode standardises with batch statistics (biased variance) and
    /// returns them (with unbiased variance) for running-average updates.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let dims = x.dims4()?;
        let [n, c, h, w] = dims;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape(&[c], self.value(p).shape()));
            }
        }
        let count = (n * h * w) as f64;
        let (mean, var_biased, eps, training) = match mode {
            NormMode::Train { eps } => {
                if n * h * w < 2 {
                    return Err(Error::Invalid(
                        "training-mode normalisation needs at least 2 values per channel".into(),
                    ));
                }
                if n < 2 {
                    return Err(Error::Invalid(
                        "training-mode normalisation needs a batch of at least 2".into(),
                    ));
                }
                let mean: Vec<f64> = kernels::channel_sums(x.data(), dims, |_, v| v)
                    .into_iter()
                    .map(|s| s / count)
                    .collect();
                let var: Vec<f64> = kernels::channel_sums(x.data(), dims, |i, v| {
                    let d = v - mean[(i / (h * w)) % c];
                    d * d
                })
                .into_iter()
                .map(|s| s / count)
                .collect();
                (mean, var, eps, true)
            }
            NormMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::shape(&[c], &[running_mean.len()]));
                }
                (running_mean.to_vec(), running_var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for (i, (&v, (xh, o))) in x.data().iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / (h * w)) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xh + b[ch];
        }
        let stats = training.then(|| BatchStats {
            var: var_biased.iter().map(|v| v * count / (count - 1.0)).collect(),
            mean: mean.clone(),
        });
        let out = Tensor::new(dims.to_vec(), out)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[input, gamma, beta],
        );
        Ok((v, stats))
    }

    /// Softmax over the channel axis of an NCHW tensor, per pixel.
    pub fn softmax_channel(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let [n, c, h, w] = x.dims4()?;
        let out = softmax_nchw(x.data(), n, c, h * w);
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(out, Op::SoftmaxChannel(a), &[a]))
    }

    /// Class-weighted cross entropy over all pixels of an NCHW logit tensor:
    /// `-(Σ_x w[l(x)] log p_x[l(x)]) / Σ_x w[l(x)]`.
    ///
    /// `labels` is `N·H·W` long. Pixels whose class weight is zero do not count.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], class_weights: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::shape(&[n, h, w], &[labels.len()]));
        }
        if class_weights.len() != c {
            return Err(Error::shape(&[c], &[class_weights.len()]));
        }
        if class_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("class weights must be finite and non-negative".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::LabelRange {
                label: l as usize,
                num_classes: c,
            });
        }
        let probs = softmax_nchw(x.data(), n, c, plane);
        let log_floor = 1e-12f64.ln();
        let mut total_w = 0.0;
        let mut acc = 0.0;
        for b in 0..n {
            for p in 0..plane {
                let l = labels[b * plane + p] as usize;
                let wt = class_weights[l];
                if wt == 0.0 {
                    continue;
                }
                let logits_px = (0..c).map(|k| x.data()[(b * c + k) * plane + p]);
                let max = logits_px.clone().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits_px.map(|z| (z - max).exp()).sum::<f64>().ln();
                let logp = (x.data()[(b * c + l) * plane + p] - lse).max(log_floor);
                acc += wt * logp;
                total_w += wt;
            }
        }
        if total_w == 0.0 {
            return Err(Error::Degenerate(
                "cross entropy over pixels whose classes all have zero weight".into(),
            ));
        }
        let loss = -acc / total_w;
        let mut dlogits = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..plane {
                let l = labels[b * plane + p] as usize;
                let wt = class_weights[l];
                if wt == 0.0 {
                    continue;
                }
                let pl = probs[(b * c + l) * plane + p];
                if pl.ln() < log_floor {
                    continue;
                }
                let k = wt / total_w;
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    dlogits[i] = k * (probs[i] - if ch == l { 1.0 } else { 0.0 });
                }
            }
        }
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, dlogits }, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check_live()?;
        let node = self.nodes.get(loss.0).ok_or_else(|| {
            Error::Graph(format!("variable {} was not recorded on this graph", loss.0))
        })?;
        if node.value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(node.value.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(node, &g)?;
            grads[i] = Some(g);
            for (parent, delta) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                            *a += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        // only leaves keep their gradients
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(*b), |g, y| g * y)),
                (*b, zip_map(g, val(*a), |g, x| g * x)),
            ],
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = zip_map(g, y, |g, y| g / y);
                let gb = Tensor::new(
                    y.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect(),
                )?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, map(g, |x| x * s))],
            Op::Square(a) => vec![(*a, zip_map(g, val(*a), |g, x| 2.0 * x * g))],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.item() / x.len() as f64))]
            }
            Op::SumPerSample(a) => {
                let x = val(*a);
                let inner = x.len() / g.len();
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, inner))
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::ScalePerSample(x, s) => {
                let (xv, sv) = (val(*x), val(*s));
                let inner = xv.len() / sv.len();
                let gx = g
                    .data()
                    .chunks(inner)
                    .zip(sv.data())
                    .flat_map(|(c, &k)| c.iter().map(move |&v| v * k))
                    .collect();
                let gs = g
                    .data()
                    .chunks(inner)
                    .zip(xv.data().chunks(inner))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                vec![
                    (*x, Tensor::new(xv.shape().to_vec(), gx)?),
                    (*s, Tensor::new(sv.shape().to_vec(), gs)?),
                ]
            }
            Op::Relu(a) => vec![(*a, zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
            Op::Upsample2x(a) => {
                let x = val(*a);
                let [_, _, h, w] = x.dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut data = vec![0.0; x.len()];
                for (p, plane) in data.chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            plane[(y / 2) * w + xx / 2] += src[y * w2 + xx];
                        }
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Concat(parts) => {
                let n = g.shape()[0];
                let per_out = g.len() / n;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let x = val(p);
                    let per = x.len() / n;
                    let mut data = Vec::with_capacity(x.len());
                    for b in 0..n {
                        let start = b * per_out + offset;
                        data.extend_from_slice(&g.data()[start..start + per]);
                    }
                    offset += per;
                    res.push((p, Tensor::new(x.shape().to_vec(), data)?));
                }
                res
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    val(*input).data(),
                    val(*weight).data(),
                    g.data(),
                    needs(*input),
                );
                let mut res = vec![(*weight, Tensor::new(val(*weight).shape().to_vec(), grads.weight)?)];
                if let Some(dx) = grads.input {
                    res.push((*input, Tensor::new(val(*input).shape().to_vec(), dx)?));
                }
                if let Some(b) = bias {
                    res.push((*b, Tensor::new(vec![geom.out_channels], grads.bias)?));
                }
                res
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let x = val(*input);
                let dims = x.dims4()?;
                let [n, c, h, w] = dims;
                let plane = h * w;
                let count = (n * plane) as f64;
                let gam = val(*gamma).data();
                let dbeta = kernels::channel_sums(g.data(), dims, |_, v| v);
                let dgamma = kernels::channel_sums(g.data(), dims, |i, v| v * xhat[i]);
                let mut dx = vec![0.0; x.len()];
                for (i, d) in dx.iter_mut().enumerate() {
                    let ch = (i / plane) % c;
                    *d = if *training {
                        gam[ch] * inv_std[ch] / count
                            * (count * g.data()[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    } else {
                        gam[ch] * inv_std[ch] * g.data()[i]
                    };
                }
                vec![
                    (*input, Tensor::new(dims.to_vec(), dx)?),
                    (*gamma, Tensor::new(vec![c], dgamma)?),
                    (*beta, Tensor::new(vec![c], dbeta)?),
                ]
            }
            Op::SoftmaxChannel(a) => {
                let p = &node.value;
                let [n, c, h, w] = p.dims4()?;
                let plane = h * w;
                let mut dx = vec![0.0; p.len()];
                for b in 0..n {
                    for px in 0..plane {
                        let idx = |ch: usize| (b * c + ch) * plane + px;
                        let dot: f64 = (0..c).map(|ch| g.data()[idx(ch)] * p.data()[idx(ch)]).sum();
                        for ch in 0..c {
                            dx[idx(ch)] = p.data()[idx(ch)] * (g.data()[idx(ch)] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::new(p.shape().to_vec(), dx)?)]
            }
            Op::CrossEntropy { logits, dlogits } => {
                let k = g.item();
                let x = val(*logits);
                vec![(
                    *logits,
                    Tensor::new(x.shape().to_vec(), dlogits.iter().map(|d| d * k).collect())?,
                )]
            }
        };
        Ok(out)
    }
}

pub(crate) fn softmax_nchw(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for p in 0..plane {
            let idx = |ch: usize| (b * c + ch) * plane + p;
            let max = (0..c).map(|ch| x[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ch in 0..c {
                let e = (x[idx(ch)] - max).exp();
                out[idx(ch)] = e;
                total += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= total;
            }
        }
    }
    out
}
