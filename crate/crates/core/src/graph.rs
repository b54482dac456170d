//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates eagerly, stores its
//! output, and records what it needs for the backward pass. Because nodes are only ever appended,
//! arena order is already a topological order, so [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use aualign::graph::Graph;
//! use aualign::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::new(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
//! let y = g.relu(x);
//! let loss = g.weighted_sum(y, vec![1.0, 1.0]).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::losses;
use crate::ops::conv::{self, ConvDims, ConvRegion, Rect};
use crate::ops::norm::{self, BatchStats};
use crate::ops::{interp, pool};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{ConvSpec, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How batch normalization picks its statistics.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize by the statistics of the current batch.
    Train,
    /// Normalize by fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        dims: ConvDims,
        regions: Vec<ConvRegion>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_statistics: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Mul {
        a: Var,
        b: Var,
    },
    Add(Var, Var),
    Resize {
        x: Var,
        from: (usize, usize),
    },
    Crop {
        x: Var,
        from: (usize, usize),
        origin: (usize, usize),
    },
    GradScale {
        x: Var,
        factor: f64,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    PairSoftmax(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Combine(Vec<(Var, f64)>),
    /// Any loss whose input gradient was computed during the forward pass.
    Loss {
        x: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free variable whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        self.nodes[v.0].value.dims4(op)
    }

    /// Plain 2-D cross-correlation. `w` is `[O, C, kh, kw]`, `b` is `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let (_, _, h, wd) = self.dims4(x, "conv2d")?;
        let (oh, ow) = spec.output_size(h, wd)?;
        let region = ConvRegion {
            input: Rect {
                y0: 0,
                x0: 0,
                h,
                w: wd,
            },
            output: Rect {
                y0: 0,
                x0: 0,
                h: oh,
                w: ow,
            },
        };
        self.conv_regions(x, w, b, spec, vec![region], (oh, ow))
    }

    /// Convolution with an independent weight set per region.
    ///
    /// `w` is `[R, O, C, kh, kw]` (or `[O, C, kh, kw]` when `R == 1`) and `b` is `[R, O]` (or `[O]`).
    pub fn conv_regions(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        regions: Vec<ConvRegion>,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (n, c, h, wd) = self.dims4(x, "conv2d")?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input has {c} channels but the filter expects {}",
                    spec.in_channels
                ),
            ));
        }
        let r = regions.len();
        let wlen = self.value(w).len();
        if wlen != r * spec.weight_count() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weights hold {wlen} values, expected {} regions x {:?}",
                    r,
                    spec.weight_shape()
                ),
            ));
        }
        let blen = self.value(b).len();
        if blen != r * spec.out_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "bias holds {blen} values, expected {} x {}",
                    r, spec.out_channels
                ),
            ));
        }
        let dims = ConvDims {
            batch: n,
            in_h: h,
            in_w: wd,
            out_h: out_hw.0,
            out_w: out_hw.1,
        };
        let out = conv::forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &spec,
            dims,
            &regions,
        );
        let value = Tensor::new(&[n, spec.out_channels, out_hw.0, out_hw.1], out)?;
        Ok(self.derived(
            value,
            Op::Conv {
                x,
                w,
                b,
                spec,
                dims,
                regions,
            },
            &[x, w, b],
        ))
    }

    /// 2x2/2/0 max pooling; both spatial sides must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.dims4(x, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial size {h}x{w} is not even"),
            ));
        }
        self.maxpool2_floor(x)
    }

    /// 2x2/2/0 max pooling that drops a trailing odd row/column.
    pub fn maxpool2_floor(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "maxpool2")?;
        if h < 2 || w < 2 {
            return Err(Error::shape(
                "maxpool2",
                format!("spatial size {h}x{w} below 2x2"),
            ));
        }
        let (out, argmax) = pool::maxpool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        Ok(self.derived(value, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Batch normalization. In training mode the batch statistics are returned so the caller can
    /// fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = self.dims4(x, "batch_norm")?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(Error::shape(
                    "batch_norm",
                    format!(
                        "{name} has {} entries for {c} channels",
                        self.value(v).len()
                    ),
                ));
            }
        }
        let d = norm::Dims { n, c, plane: h * w };
        let xs = self.value(x).data();
        let (stats, mean, var) = match mode {
            BnMode::Train => {
                let s = norm::batch_stats(xs, &d);
                let (m, v) = (s.mean.clone(), s.var.clone());
                (Some(s), m, v)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length"));
                }
                (None, mean.to_vec(), var.to_vec())
            }
        };
        let (out, xhat, inv_std) = norm::normalize(
            xs,
            &d,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(&[n, c, h, w], out)?;
        let batch_statistics = stats.is_some();
        let v = self.derived(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_statistics,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.derived(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.derived(value, Op::Sigmoid(x), &[x])
    }

    /// `x [N, in] -> x W^T + b`, with `W [out, in]` and `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fan_in) = match self.shape(x) {
            &[n, f] => (n, f),
            s => {
                return Err(Error::shape(
                    "fully_connected",
                    format!("input shape {s:?} is not 2-D"),
                ))
            }
        };
        let (fan_out, w_in) = match self.shape(w) {
            &[o, i] => (o, i),
            s => {
                return Err(Error::shape(
                    "fully_connected",
                    format!("weight shape {s:?} is not 2-D"),
                ))
            }
        };
        if w_in != fan_in || self.value(b).len() != fan_out {
            return Err(Error::shape(
                "fully_connected",
                format!(
                    "input width {fan_in}, weight {:?}, bias {}",
                    self.shape(w),
                    self.value(b).len()
                ),
            ));
        }
        let (xs, ws, bs) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(n * fan_out);
        for s in 0..n {
            let row = &xs[s * fan_in..][..fan_in];
            for o in 0..fan_out {
                let wr = &ws[o * fan_in..][..fan_in];
                out.push(bs[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let value = Tensor::new(&[n, fan_out], out)?;
        Ok(self.derived(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(x), &[x]))
    }

    /// `[N, ...] -> [N, prod(...)]` in row-major (channel-major for feature maps) order.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Concatenates `[N, C_i, H, W]` maps along the channel axis, in the given order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("concat_channels", "nothing to concatenate"))?;
        let (n, _, h, w) = self.dims4(first, "concat_channels")?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.dims4(v, "concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} does not match {:?}", self.shape(v), self.shape(first)),
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for s in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[s * c * plane..][..c * plane]);
            }
        }
        let value = Tensor::new(&[n, total_c, h, w], out)?;
        Ok(self.derived(value, Op::Concat(xs.to_vec()), xs))
    }

    /// Element-wise product. `b` may have a single channel, in which case it is broadcast
    /// across the channels of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = sa.len() == 4 && sb.len() == 4 && sb[1] == 1 && sa[1] != 1;
        let same = sa == sb;
        if !(same || (broadcast && sa[0] == sb[0] && sa[2..] == sb[2..])) {
            return Err(Error::shape(
                "elementwise_mul",
                format!("{sa:?} and {sb:?} are not compatible"),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = if same {
            av.iter().zip(bv).map(|(x, y)| x * y).collect()
        } else {
            let (c, plane) = (sa[1], sa[2] * sa[3]);
            av.iter()
                .enumerate()
                .map(|(i, x)| {
                    let n = i / (c * plane);
                    x * bv[n * plane + i % plane]
                })
                .collect()
        };
        let value = Tensor::new(&sa, out)?;
        Ok(self.derived(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "elementwise_sum",
                format!("{:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    /// Bilinear resize to an explicit spatial size.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x, "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("bilinear_resize", "output size below 1"));
        }
        let out = interp::resize_forward(self.value(x).data(), n * c, h, w, out_h, out_w);
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        Ok(self.derived(value, Op::Resize { x, from: (h, w) }, &[x]))
    }

    /// `S(M, alpha)`: bilinear scaling to `round(alpha * size)` per side.
    pub fn bilinear_resize(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!(
                "scale factor must be positive, got {alpha}"
            )));
        }
        let (_, _, h, w) = self.dims4(x, "bilinear_resize")?;
        self.resize(
            x,
            interp::scaled_size(h, alpha),
            interp::scaled_size(w, alpha),
        )
    }

    /// `C(M, beta)`: keeps the centered window of side `round(beta * size)`.
    pub fn center_crop(&mut self, x: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!(
                "crop ratio must lie in (0, 1], got {beta}"
            )));
        }
        let (n, c, h, w) = self.dims4(x, "center_crop")?;
        let (top, ch) = interp::crop_window(h, beta);
        let (left, cw) = interp::crop_window(w, beta);
        if ch == 0 || cw == 0 {
            return Err(Error::shape(
                "center_crop",
                format!("ratio {beta} leaves an empty window"),
            ));
        }
        let out = interp::crop_forward(self.value(x).data(), n * c, (h, w), (top, left), (ch, cw));
        let value = Tensor::new(&[n, c, ch, cw], out)?;
        Ok(self.derived(
            value,
            Op::Crop {
                x,
                from: (h, w),
                origin: (top, left),
            },
            &[x],
        ))
    }

    /// Identity in the forward direction; multiplies the incoming gradient by `factor`.
    pub fn grad_scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).clone();
        self.derived(value, Op::GradScale { x, factor }, &[x])
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.derived(value, Op::Affine { x, scale }, &[x])
    }

    /// Per-pair two-way softmax: `[N, 2K] -> [N, K]`, returning the probability of the second
    /// (occurrence) logit of each pair `(absence_k, occurrence_k)`.
    pub fn pair_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, two_k) = match self.shape(x) {
            &[n, m] if m % 2 == 0 => (n, m),
            s => {
                return Err(Error::shape(
                    "softmax",
                    format!("expected [N, 2K], got {s:?}"),
                ))
            }
        };
        let xs = self.value(x).data();
        let out = (0..n * two_k / 2)
            .map(|i| sigmoid(xs[2 * i + 1] - xs[2 * i]))
            .collect();
        let value = Tensor::new(&[n, two_k / 2], out)?;
        Ok(self.derived(value, Op::PairSoftmax(x), &[x]))
    }

    /// Scalar `sum_i weights_i * x_i`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "weighted_sum",
                "weight count differs from element count",
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.derived(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    /// Scalar linear combination of scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, k) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("combine", "terms must be scalars"));
            }
            s += k * self.value(v).data()[0];
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.derived(Tensor::scalar(s), Op::Combine(terms.to_vec()), &parents))
    }

    fn loss_node(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Var {
        self.derived(Tensor::scalar(value), Op::Loss { x, grad }, &[x])
    }

    fn batch_rows(&self, x: Var, width: usize, op: &'static str) -> Result<usize> {
        match self.shape(x) {
            &[n, k] if k == width => Ok(n),
            s => Err(Error::shape(
                op,
                format!("expected [N, {width}], got {s:?}"),
            )),
        }
    }

    /// Weighted multi-label cross entropy, averaged over the batch.
    pub fn softmax_loss(&mut self, probs: Var, labels: &Tensor, weights: &[f64]) -> Result<Var> {
        let k = weights.len();
        let n = self.batch_rows(probs, k, "softmax_loss")?;
        check_labels(labels, n, k, "softmax_loss")?;
        let (value, grad) = batch_mean(n, k, |s| {
            let p = &self.value(probs).data()[s * k..][..k];
            let t = &labels.data()[s * k..][..k];
            (
                losses::softmax_loss(t, p, weights),
                losses::softmax_loss_grad(t, p, weights),
            )
        });
        Ok(self.loss_node(probs, value, grad))
    }

    /// Weighted multi-label Dice loss, averaged over the batch.
    pub fn dice_loss(
        &mut self,
        probs: Var,
        labels: &Tensor,
        weights: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let k = weights.len();
        let n = self.batch_rows(probs, k, "dice_loss")?;
        check_labels(labels, n, k, "dice_loss")?;
        let (value, grad) = batch_mean(n, k, |s| {
            let p = &self.value(probs).data()[s * k..][..k];
            let t = &labels.data()[s * k..][..k];
            (
                losses::dice_loss(t, p, weights, eps),
                losses::dice_loss_grad(t, p, weights, eps),
            )
        });
        Ok(self.loss_node(probs, value, grad))
    }

    /// Landmark regression loss normalized by per-sample inter-ocular distance, batch mean.
    pub fn align_loss(&mut self, pred: Var, truth: &Tensor, inter_ocular: &[f64]) -> Result<Var> {
        let n = inter_ocular.len();
        let k = truth.len() / n.max(1);
        if self.batch_rows(pred, k, "align_loss")? != n || truth.len() != n * k {
            return Err(Error::shape("align_loss", "batch size mismatch"));
        }
        let mut err = None;
        let (value, grad) = batch_mean(n, k, |s| {
            let p = &self.value(pred).data()[s * k..][..k];
            let t = &truth.data()[s * k..][..k];
            match losses::align_loss(t, p, inter_ocular[s]) {
                Ok(v) => (v, losses::align_loss_grad(t, p, inter_ocular[s])),
                Err(e) => {
                    err = Some(e);
                    (0.0, vec![0.0; k])
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(self.loss_node(pred, value, grad))
    }

    /// Cross entropy between refined maps and fixed initial maps, summed over maps and points,
    /// averaged over the batch.
    pub fn consistency_loss(&mut self, refined: Var, initial: &Tensor) -> Result<Var> {
        if self.shape(refined) != initial.shape() {
            return Err(Error::shape(
                "attention_consistency_loss",
                format!("{:?} vs {:?}", self.shape(refined), initial.shape()),
            ));
        }
        let n = initial.shape()[0];
        let k = initial.len() / n;
        let (value, grad) = batch_mean(n, k, |s| {
            let r = &self.value(refined).data()[s * k..][..k];
            let v = &initial.data()[s * k..][..k];
            (
                losses::attention_consistency_loss(v, r),
                losses::attention_consistency_grad(v, r),
            )
        });
        Ok(self.loss_node(refined, value, grad))
    }

    /// Reverse sweep from a scalar node. Gradients of earlier sweeps are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(&shape, delta).expect("gradient length"));
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let gd = g.data();
        // Work out the parent deltas while borrowing the node immutably, then accumulate.
        let deltas: Vec<(Var, Vec<f64>)> = match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Conv {
                x,
                w,
                b,
                spec,
                dims,
                regions,
            } => {
                let (dx, dw, db) = conv::backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    spec,
                    *dims,
                    regions,
                );
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::MaxPool { x, argmax } => {
                vec![(
                    *x,
                    pool::maxpool2_backward(gd, argmax, self.value(*x).len()),
                )]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_statistics,
            } => {
                let (n, c, h, w) = self.value(*x).dims4("batch_norm")?;
                let d = norm::Dims { n, c, plane: h * w };
                let (dx, dg, db) = norm::backward(
                    gd,
                    xhat,
                    inv_std,
                    self.value(*gamma).data(),
                    &d,
                    *batch_statistics,
                );
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xs)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![(*x, d)]
            }
            Op::Sigmoid(x) => {
                let ys = self.nodes[i].value.data();
                let d = gd.iter().zip(ys).map(|(g, y)| g * y * (1.0 - y)).collect();
                vec![(*x, d)]
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.value(*x).data(), self.value(*w).data());
                let fan_in = self.shape(*x)[1];
                let n = self.shape(*x)[0];
                let fan_out = self.shape(*w)[0];
                let mut dx = vec![0.0; xs.len()];
                let mut dw = vec![0.0; ws.len()];
                let mut db = vec![0.0; fan_out];
                for s in 0..n {
                    let row = &xs[s * fan_in..][..fan_in];
                    let drow = &mut dx[s * fan_in..][..fan_in];
                    for o in 0..fan_out {
                        let go = gd[s * fan_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        let wr = &ws[o * fan_in..][..fan_in];
                        let dwr = &mut dw[o * fan_in..][..fan_in];
                        for j in 0..fan_in {
                            drow[j] += go * wr[j];
                            dwr[j] += go * row[j];
                        }
                    }
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Reshape(x) => vec![(*x, gd.to_vec())],
            Op::Concat(xs) => {
                let s = g.shape();
                let (n, total_c, plane) = (s[0], s[1], s[2] * s[3]);
                let mut out = Vec::new();
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut d = Vec::with_capacity(n * c * plane);
                    for smp in 0..n {
                        d.extend_from_slice(&gd[(smp * total_c + offset) * plane..][..c * plane]);
                    }
                    offset += c;
                    out.push((v, d));
                }
                out
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if av.len() == bv.len() {
                    let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                    let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    vec![(*a, da), (*b, db)]
                } else {
                    let sa = self.shape(*a);
                    let (c, plane) = (sa[1], sa[2] * sa[3]);
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for (idx, gv) in gd.iter().enumerate() {
                        let bi = (idx / (c * plane)) * plane + idx % plane;
                        da[idx] = gv * bv[bi];
                        db[bi] += gv * av[idx];
                    }
                    vec![(*a, da), (*b, db)]
                }
            }
            Op::Add(a, b) => vec![(*a, gd.to_vec()), (*b, gd.to_vec())],
            Op::Resize { x, from } => {
                let s = g.shape();
                let d = interp::resize_backward(gd, s[0] * s[1], from.0, from.1, s[2], s[3]);
                vec![(*x, d)]
            }
            Op::Crop { x, from, origin } => {
                let s = g.shape();
                let d = interp::crop_backward(gd, s[0] * s[1], *from, *origin, (s[2], s[3]));
                vec![(*x, d)]
            }
            Op::GradScale { x, factor } => vec![(*x, gd.iter().map(|v| v * factor).collect())],
            Op::Affine { x, scale } => vec![(*x, gd.iter().map(|v| v * scale).collect())],
            Op::PairSoftmax(x) => {
                let p = self.nodes[i].value.data();
                let mut d = vec![0.0; 2 * p.len()];
                for (k, (&pk, gk)) in p.iter().zip(gd).enumerate() {
                    let t = gk * pk * (1.0 - pk);
                    d[2 * k + 1] = t;
                    d[2 * k] = -t;
                }
                vec![(*x, d)]
            }
            Op::WeightedSum { x, weights } => {
                vec![(*x, weights.iter().map(|w| w * gd[0]).collect())]
            }
            Op::Combine(terms) => terms.iter().map(|&(v, k)| (v, vec![k * gd[0]])).collect(),
            Op::Loss { x, grad } => vec![(*x, grad.iter().map(|v| v * gd[0]).collect())],
        };
        for (v, d) in deltas {
            self.accumulate(v, d);
        }
        Ok(())
    }

    /// Gradient of the last [`backward`](Self::backward) loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter brought onto this tape.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
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

fn check_labels(labels: &Tensor, n: usize, k: usize, op: &'static str) -> Result<()> {
    if labels.len() != n * k {
        return Err(Error::shape(
            op,
            format!(
                "labels hold {} values for {n} samples x {k} units",
                labels.len()
            ),
        ));
    }
    Ok(())
}

/// Averages per-sample `(value, gradient)` pairs over a batch of `n` rows of width `k`.
fn batch_mean(n: usize, k: usize, mut f: impl FnMut(usize) -> (f64, Vec<f64>)) -> (f64, Vec<f64>) {
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for s in 0..n {
        let (v, g) = f(s);
        value += v * scale;
        grad.extend(g.into_iter().map(|x| x * scale));
    }
    (value, grad)
}
