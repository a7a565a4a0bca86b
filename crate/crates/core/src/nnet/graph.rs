//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its forward value and whatever it needs
//! for the backward rule. Nodes only ever reference earlier nodes, so a
//! single reverse sweep over the tape visits each node after all of its
//! consumers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output cotangent. `None` means the
    /// op does not propagate into that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannels {
        x: Var,
        shift: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
    },
    Downsample {
        x: Var,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    WeightedSqErr {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The tape.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    circuit_evals: Arc<AtomicU64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    /// A tape that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            circuit_evals: Arc::new(AtomicU64::new(0)),
        }
    }

    /// A tape for forward-only evaluation. Ops skip saving backward state
    /// and [`Graph::backward`] is an error.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Shared counter of quantum circuit simulations performed by ops on this
    /// tape (forward and backward).
    pub fn circuit_counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.circuit_evals)
    }

    pub fn circuit_evals(&self) -> u64 {
        self.circuit_evals.load(Ordering::Relaxed)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: self.recording,
        });
        Var(self.nodes.len() - 1)
    }

    /// A fixed input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers the result of an externally computed op.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// 2-d convolution, NHWC input `[B,H,W,Cin]`, weight `[k,k,Cin,Cout]`
    /// (odd `k`), bias `[Cout]`, stride 1, zero "same" padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, h, wd, cin) = self.value(x).nhwc()?;
        let ws = self.shape(w).to_vec();
        let bshape = self.shape(b).to_vec();
        let (k, cout) = match ws[..] {
            [k1, k2, ci, co] if k1 == k2 && k1 % 2 == 1 && ci == cin => (k1, co),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {:?} vs weight {ws:?}", self.shape(x)),
                ))
            }
        };
        if bshape != [cout] {
            return Err(Error::shape("conv2d", format!("bias {bshape:?} vs Cout {cout}")));
        }
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bs * h * wd * cout];
        for n in 0..bs {
            for oy in 0..h {
                for ox in 0..wd {
                    let o = ((n * h + oy) * wd + ox) * cout;
                    let orow = &mut out[o..o + cout];
                    orow.copy_from_slice(bv);
                    for ky in 0..k {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = ((n * h + iy as usize) * wd + ix as usize) * cin;
                            let wbase = (ky * k + kx) * cin * cout;
                            for ci in 0..cin {
                                let xval = xv[xi + ci];
                                let wrow = &wv[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (o, &wc) in orow.iter_mut().zip(wrow) {
                                    *o += xval * wc;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[bs, h, wd, cout], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// `x @ w + b` with `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bsh) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, din, dout) = match (xs, ws, bsh) {
            ([n, i], [i2, o], [o2]) if i == i2 && o == o2 => (*n, *i, *o),
            _ => {
                return Err(Error::shape(
                    "linear",
                    format!("x {xs:?}, w {ws:?}, b {bsh:?}"),
                ))
            }
        };
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * dout];
        for r in 0..n {
            let orow = &mut out[r * dout..(r + 1) * dout];
            orow.copy_from_slice(bv);
            for i in 0..din {
                let xval = xv[r * din + i];
                for (o, &wc) in orow.iter_mut().zip(&wv[i * dout..(i + 1) * dout]) {
                    *o += xval * wc;
                }
            }
        }
        let value = Tensor::new(&[n, dout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Group normalization over `[B,H,W,C]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (bs, h, w, c) = self.value(x).nhwc()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "affine shapes {:?}/{:?} vs {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let cg = c / groups;
        let count = (h * w * cg) as f64;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; bs * groups];
        let mut out = vec![0.0; xv.len()];
        let hw = h * w;
        for n in 0..bs {
            for g in 0..groups {
                let mut mean = 0.0;
                for p in 0..hw {
                    let base = (n * hw + p) * c + g * cg;
                    mean += xv[base..base + cg].iter().sum::<f64>();
                }
                mean /= count;
                let mut var = 0.0;
                for p in 0..hw {
                    let base = (n * hw + p) * c + g * cg;
                    var += xv[base..base + cg]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                var /= count;
                let r = 1.0 / (var + EPS).sqrt();
                rstd[n * groups + g] = r;
                for p in 0..hw {
                    let base = (n * hw + p) * c + g * cg;
                    for ci in 0..cg {
                        let idx = base + ci;
                        let xh = (xv[idx] - mean) * r;
                        xhat[idx] = xh;
                        out[idx] = xh * gv[g * cg + ci] + bv[g * cg + ci];
                    }
                }
            }
        }
        let value = Tensor::new(&[bs, h, w, c], out)?;
        let (xhat, rstd) = if self.recording {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let value = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(value, Op::Silu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a per-item, per-channel shift `[B,C]` to `[B,H,W,C]`.
    pub fn add_channels(&mut self, x: Var, shift: Var) -> Result<Var> {
        let (bs, h, w, c) = self.value(x).nhwc()?;
        if self.shape(shift) != [bs, c] {
            return Err(Error::shape(
                "add_channels",
                format!("x {:?} vs shift {:?}", self.shape(x), self.shape(shift)),
            ));
        }
        let sv = self.value(shift).data();
        let mut out = self.value(x).data().to_vec();
        for n in 0..bs {
            let s = &sv[n * c..(n + 1) * c];
            for p in 0..h * w {
                let base = (n * h * w + p) * c;
                for (o, v) in out[base..base + c].iter_mut().zip(s) {
                    *o += v;
                }
            }
        }
        let value = Tensor::new(&[bs, h, w, c], out)?;
        Ok(self.push(value, Op::AddChannels { x, shift }, &[x, shift]))
    }

    /// Channel concatenation of two `[B,H,W,·]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, h, w, ca) = self.value(a).nhwc()?;
        let (bs2, h2, w2, cb) = self.value(b).nhwc()?;
        if (bs, h, w) != (bs2, h2, w2) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let c = ca + cb;
        let mut out = Vec::with_capacity(bs * h * w * c);
        for p in 0..bs * h * w {
            out.extend_from_slice(&av[p * ca..(p + 1) * ca]);
            out.extend_from_slice(&bv[p * cb..(p + 1) * cb]);
        }
        let value = Tensor::new(&[bs, h, w, c], out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `start..start+len` of `[B,H,W,C]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (bs, h, w, c) = self.value(x).nhwc()?;
        if start + len > c || len == 0 {
            return Err(Error::shape(
                "slice_channels",
                format!("channels {start}..{} of {c}", start + len),
            ));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bs * h * w * len);
        for p in 0..bs * h * w {
            out.extend_from_slice(&xv[p * c + start..p * c + start + len]);
        }
        let value = Tensor::new(&[bs, h, w, len], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest(&mut self, x: Var) -> Result<Var> {
        let (bs, h, w, c) = self.value(x).nhwc()?;
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; bs * h2 * w2 * c];
        for n in 0..bs {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = ((n * h + y / 2) * w + xx / 2) * c;
                    let dst = ((n * h2 + y) * w2 + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let value = Tensor::new(&[bs, h2, w2, c], out)?;
        Ok(self.push(value, Op::Upsample { x }, &[x]))
    }

    /// 2×2 average pooling.
    pub fn downsample_avg(&mut self, x: Var) -> Result<Var> {
        let (bs, h, w, c) = self.value(x).nhwc()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "downsample_avg",
                format!("spatial size {h}x{w} is not even"),
            ));
        }
        let xv = self.value(x).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; bs * h2 * w2 * c];
        for n in 0..bs {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((n * h + y) * w + xx) * c;
                    let dst = ((n * h2 + y / 2) * w2 + xx / 2) * c;
                    for ci in 0..c {
                        out[dst + ci] += 0.25 * xv[src + ci];
                    }
                }
            }
        }
        let value = Tensor::new(&[bs, h2, w2, c], out)?;
        Ok(self.push(value, Op::Downsample { x }, &[x]))
    }

    /// Rows of `table: [N, D]` selected by `ids`, giving `[len(ids), D]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = match self.shape(table) {
            [r, d] => (*r, *d),
            s => return Err(Error::shape("embed_lookup", format!("table {s:?} is not 2-d"))),
        };
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `[B, …] → [B, prod(…)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let b = t.shape()[0];
        let value = t.clone().reshape(&[b, t.len() / b.max(1)]).expect("same size");
        self.push(value, Op::Reshape { x }, &[x])
    }

    /// Same data, new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// `(1/B) Σ_b w_b ‖pred_b − target_b‖²`, a scalar.
    pub fn weighted_sq_err(&mut self, pred: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape()[0] != weights.len() {
            return Err(Error::shape(
                "weighted_sq_err",
                format!(
                    "pred {:?}, target {:?}, {} weights",
                    p.shape(),
                    target.shape(),
                    weights.len()
                ),
            ));
        }
        let b = weights.len();
        let per = p.len() / b.max(1);
        let mut loss = 0.0;
        for (n, w) in weights.iter().enumerate() {
            let s: f64 = p.data()[n * per..(n + 1) * per]
                .iter()
                .zip(&target.data()[n * per..(n + 1) * per])
                .map(|(a, t)| (a - t) * (a - t))
                .sum();
            loss += w * s;
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedSqErr {
                pred,
                target: target.data().to_vec(),
                weights: weights.to_vec(),
            },
            &[pred],
        ))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = match self.shape(logits) {
            [b, c] => (*b, *c),
            s => return Err(Error::shape("softmax_cross_entropy", format!("logits {s:?}"))),
        };
        if labels.len() != b {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{b} rows vs {} labels", labels.len()),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for n in 0..b {
            if labels[n] >= c {
                return Err(Error::OutOfRange {
                    what: "class labels",
                    index: labels[n],
                    size: c,
                });
            }
            let row = &lv[n * c..(n + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for k in 0..c {
                probs[n * c + k] = (row[k] - m).exp() / z;
            }
            loss -= row[labels[n]] - m - z.ln();
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::invalid("backward called on an inference-only graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let xt = self.value(*x);
                let (bs, h, wd, cin) = xt.nhwc().expect("checked in forward");
                let ws = self.shape(*w);
                let (k, cout) = (ws[0], ws[3]);
                let pad = k / 2;
                let (xv, wv) = (xt.data(), self.value(*w).data());
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                let mut db = vec![0.0; cout];
                for n in 0..bs {
                    for oy in 0..h {
                        for ox in 0..wd {
                            let o = ((n * h + oy) * wd + ox) * cout;
                            let grow = &g[o..o + cout];
                            for (d, gv) in db.iter_mut().zip(grow) {
                                *d += gv;
                            }
                            for ky in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((n * h + iy as usize) * wd + ix as usize) * cin;
                                    let wbase = (ky * k + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let wrow = &wv[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        let dwrow =
                                            &mut dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        let xval = xv[xi + ci];
                                        let mut sx = 0.0;
                                        for co in 0..cout {
                                            sx += grow[co] * wrow[co];
                                            dwrow[co] += xval * grow[co];
                                        }
                                        dx[xi + ci] += sx;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    acc(grads, *w, dw);
                }
                if self.needs(*b) {
                    acc(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, din) = (xs[0], xs[1]);
                let dout = self.shape(*w)[1];
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = vec![0.0; n * din];
                let mut dw = vec![0.0; din * dout];
                let mut db = vec![0.0; dout];
                for r in 0..n {
                    let grow = &g[r * dout..(r + 1) * dout];
                    for (d, gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                    for i in 0..din {
                        let wrow = &wv[i * dout..(i + 1) * dout];
                        dx[r * din + i] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        let xval = xv[r * din + i];
                        for (d, gv) in dw[i * dout..(i + 1) * dout].iter_mut().zip(grow) {
                            *d += xval * gv;
                        }
                    }
                }
                if self.needs(*x) {
                    acc(grads, *x, dx);
                }
                if self.needs(*w) {
                    acc(grads, *w, dw);
                }
                if self.needs(*b) {
                    acc(grads, *b, db);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (bs, h, w, c) = self.value(*x).nhwc().expect("checked in forward");
                let groups = *groups;
                let cg = c / groups;
                let hw = h * w;
                let count = (hw * cg) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for n in 0..bs {
                    for gi in 0..groups {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for p in 0..hw {
                            let base = (n * hw + p) * c + gi * cg;
                            for ci in 0..cg {
                                let idx = base + ci;
                                let ch = gi * cg + ci;
                                dgamma[ch] += g[idx] * xhat[idx];
                                dbeta[ch] += g[idx];
                                let dxh = g[idx] * gv[ch];
                                s1 += dxh;
                                s2 += dxh * xhat[idx];
                            }
                        }
                        let r = rstd[n * groups + gi];
                        for p in 0..hw {
                            let base = (n * hw + p) * c + gi * cg;
                            for ci in 0..cg {
                                let idx = base + ci;
                                let dxh = g[idx] * gv[gi * cg + ci];
                                dx[idx] = r / count * (count * dxh - s1 - xhat[idx] * s2);
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    acc(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Op::Silu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                acc(grads, *x, dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::AddChannels { x, shift } => {
                if self.needs(*x) {
                    acc(grads, *x, g.to_vec());
                }
                if self.needs(*shift) {
                    let (bs, h, w, c) = self.value(*x).nhwc().expect("checked in forward");
                    let mut ds = vec![0.0; bs * c];
                    for n in 0..bs {
                        for p in 0..h * w {
                            let base = (n * h * w + p) * c;
                            for ci in 0..c {
                                ds[n * c + ci] += g[base + ci];
                            }
                        }
                    }
                    acc(grads, *shift, ds);
                }
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a)[3];
                let cb = self.shape(*b)[3];
                let c = ca + cb;
                let pixels = g.len() / c;
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(pixels * ca);
                    for p in 0..pixels {
                        da.extend_from_slice(&g[p * c..p * c + ca]);
                    }
                    acc(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(pixels * cb);
                    for p in 0..pixels {
                        db.extend_from_slice(&g[p * c + ca..(p + 1) * c]);
                    }
                    acc(grads, *b, db);
                }
            }
            Op::SliceChannels { x, start } => {
                let c = self.shape(*x)[3];
                let len = node.value.shape()[3];
                let pixels = g.len() / len;
                let mut dx = vec![0.0; pixels * c];
                for p in 0..pixels {
                    dx[p * c + start..p * c + start + len].copy_from_slice(&g[p * len..(p + 1) * len]);
                }
                acc(grads, *x, dx);
            }
            Op::Upsample { x } => {
                let (bs, h, w, c) = self.value(*x).nhwc().expect("checked in forward");
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; bs * h * w * c];
                for n in 0..bs {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let dst = ((n * h + y / 2) * w + xx / 2) * c;
                            let src = ((n * h2 + y) * w2 + xx) * c;
                            for ci in 0..c {
                                dx[dst + ci] += g[src + ci];
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Downsample { x } => {
                let (bs, h, w, c) = self.value(*x).nhwc().expect("checked in forward");
                let (h2, w2) = (h / 2, w / 2);
                let mut dx = vec![0.0; bs * h * w * c];
                for n in 0..bs {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((n * h + y) * w + xx) * c;
                            let src = ((n * h2 + y / 2) * w2 + xx / 2) * c;
                            for ci in 0..c {
                                dx[dst + ci] = 0.25 * g[src + ci];
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Embed { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        dt[id * d + k] += g[r * d + k];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::Reshape { x } => acc(grads, *x, g.to_vec()),
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            } => {
                let pv = self.value(*pred).data();
                let b = weights.len();
                let per = pv.len() / b;
                let mut dp = vec![0.0; pv.len()];
                for (n, w) in weights.iter().enumerate() {
                    let scale = g[0] * 2.0 * w / b as f64;
                    for k in n * per..(n + 1) * per {
                        dp[k] = scale * (pv[k] - target[k]);
                    }
                }
                acc(grads, *pred, dp);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let b = labels.len();
                let mut dl = probs.clone();
                for (n, &y) in labels.iter().enumerate() {
                    dl[n * c + y] -= 1.0;
                }
                for v in dl.iter_mut() {
                    *v *= g[0] / b as f64;
                }
                acc(grads, *logits, dl);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                for (v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        if self.needs(*v) {
                            acc(grads, *v, d);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks every input gradient of `build` against central differences of
    /// `L = Σ r·out` for a random projection `r`.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::inference();
            let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vs);
            rand_tensor(g.shape(out), &mut rng)
        };
        let loss = |g: &mut Graph, out: Var| {
            let o = g.value(out).data();
            o.iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vs);
        struct Dot(Vec<f64>);
        impl CustomOp for Dot {
            fn name(&self) -> &'static str {
                "dot"
            }
            fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
                vec![Some(self.0.iter().map(|r| r * g[0]).collect())]
            }
        }
        let value = Tensor::scalar(loss(&mut g, out));
        let l = g.custom(&[out], value, Box::new(Dot(probe.data().to_vec())));
        let grads = g.backward(l).unwrap();
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let an = grads.get(vs[k]).expect("gradient reaches input");
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::inference();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == k {
                                t.data_mut()[i] += delta;
                            }
                            g.constant(t)
                        })
                        .collect();
                    let out = build(&mut g, &vs);
                    loss(&mut g, out)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(
                    (fd - an[i]).abs() <= 1e-5_f64.max(1e-3 * fd.abs()),
                    "input {k}[{i}]: fd {fd} vs {}",
                    an[i]
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[1, 4, 4, 3], &mut rng);
        let w = rand_tensor(&[3, 3, 3, 2], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2]).unwrap());
        let x = rand_tensor(&[2, 2, 2, 2], &mut rng);
        let w = rand_tensor(&[1, 1, 2, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn linear_gradients_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[3, 4], &mut rng);
        check(
            vec![x.clone(), rand_tensor(&[4, 2], &mut rng), rand_tensor(&[2], &mut rng)],
            |g, v| g.linear(v[0], v[1], v[2]).unwrap(),
        );
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let mut g = Graph::inference();
        let (xv, w, b) = (g.constant(x.clone()), g.constant(eye), g.constant(Tensor::zeros(&[4])));
        let y = g.linear(xv, w, b).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn group_norm_gradients_and_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 2, 2, 6], &mut rng);
        let gamma = rand_tensor(&[6], &mut rng);
        let beta = rand_tensor(&[6], &mut rng);
        check(vec![x.clone(), gamma, beta], |g, v| g.group_norm(v[0], v[1], v[2], 3).unwrap());
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let (ga, be) = (g.constant(Tensor::full(&[6], 1.0)), g.constant(Tensor::zeros(&[6])));
        let y = g.group_norm(xv, ga, be, 3).unwrap();
        let d = g.value(y).data();
        for n in 0..2 {
            for grp in 0..3 {
                let vals: Vec<f64> = (0..4)
                    .flat_map(|p| {
                        let base = (n * 4 + p) * 6 + grp * 2;
                        d[base..base + 2].to_vec()
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / 8.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn elementwise_and_layout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&[2, 2, 2, 3], &mut rng);
        let b = rand_tensor(&[2, 2, 2, 3], &mut rng);
        check(vec![a.clone()], |g, v| g.silu(v[0]));
        check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
        check(vec![a.clone(), rand_tensor(&[2, 3], &mut rng)], |g, v| {
            g.add_channels(v[0], v[1]).unwrap()
        });
        check(vec![a.clone(), rand_tensor(&[2, 2, 2, 2], &mut rng)], |g, v| {
            g.concat_channels(v[0], v[1]).unwrap()
        });
        check(vec![a.clone()], |g, v| g.slice_channels(v[0], 1, 2).unwrap());
        check(vec![a.clone()], |g, v| g.upsample_nearest(v[0]).unwrap());
        check(vec![rand_tensor(&[1, 4, 4, 2], &mut rng)], |g, v| {
            g.downsample_avg(v[0]).unwrap()
        });
        check(vec![a.clone()], |g, v| g.flatten(v[0]));
        check(vec![a], |g, v| g.reshape(v[0], &[4, 6]).unwrap());
        check(vec![rand_tensor(&[4, 3], &mut rng)], |g, v| {
            g.embed_lookup(v[0], &[2, 0, 2]).unwrap()
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = rand_tensor(&[2, 3], &mut rng);
        check(vec![rand_tensor(&[2, 3], &mut rng)], |g, v| {
            g.weighted_sq_err(v[0], &target, &[0.3, 1.7]).unwrap()
        });
        check(vec![rand_tensor(&[3, 4], &mut rng)], |g, v| {
            g.softmax_cross_entropy(v[0], &[3, 0, 1]).unwrap()
        });
    }

    #[test]
    fn shape_errors_name_operands() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 2, 3]));
        let b = g.constant(Tensor::zeros(&[1, 2, 2, 4]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 2, 3]") && err.contains("[1, 2, 2, 4]"), "{err}");
        let w = g.constant(Tensor::zeros(&[3, 3, 4, 2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        assert!(g.conv2d(a, w, bias).is_err());
        assert!(g.embed_lookup(w, &[0]).is_err());
        assert!(g.group_norm(b, bias, bias, 3).is_err());
    }

    #[test]
    fn inference_graph_refuses_backward() {
        let mut g = Graph::inference();
        let a = g.param(Tensor::scalar(1.0));
        assert!(g.backward(a).is_err());
    }
}
