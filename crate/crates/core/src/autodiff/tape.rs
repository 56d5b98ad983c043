use super::kernels::{self, ConvGeom};
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

/// Batch statistics mode for [`Tape::batchnorm2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Running mean/variance buffers owned by a batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    SliceRows {
        input: Var,
        offset: usize,
    },
    PairwiseSqDist {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    SegmentMean {
        input: Var,
        segments: Vec<usize>,
        counts: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
        row_losses: Vec<f32>,
    },
    Sum(Var),
    Square(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of executed operations for one forward pass, replayed in reverse
/// by [`Tape::backward`]. A tape supports exactly one backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op,
            "rank",
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(!self.consumed);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable leaf; its gradient is available after backward.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let mut value = value.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss with respect to `v`, once backward has run.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-row losses recorded by a [`Tape::cross_entropy`] node.
    pub fn row_losses(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { row_losses, .. } => Some(row_losses),
            _ => None,
        }
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1, plus per-filter bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        expect_rank("conv2d", x, 4)?;
        expect_rank("conv2d", k, 4)?;
        expect_rank("conv2d", b, 1)?;
        let (xs, ks) = (x.shape(), k.shape());
        if ks[2] != 3 || ks[3] != 3 {
            return Err(Error::shape(
                "conv2d",
                "kernel spatial",
                format!("kernel must be 3x3, got {}x{}", ks[2], ks[3]),
            ));
        }
        if ks[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                "channel (1)",
                format!("input has {} channels, kernel expects {}", xs[1], ks[1]),
            ));
        }
        if b.len() != ks[0] {
            return Err(Error::shape(
                "conv2d",
                "filter (0)",
                format!("{} filters but {} biases", ks[0], b.len()),
            ));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ks[0],
            height: xs[2],
            width: xs[3],
        };
        let out = kernels::conv2d_forward(&geom, x.data(), k.data(), b.data());
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.height, geom.width], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Per-channel batch normalization over `[B, C, H, W]`.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch mean and unbiased variance into `stats` with momentum 0.1.
    /// Eval mode normalizes with `stats`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let x = self.value(input);
        expect_rank("batchnorm2d", x, 4)?;
        let (batch, ch, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        for (name, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.len() != ch {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("channel (1) vs {name}"),
                    format!("{ch} channels, {name} has {}", t.len()),
                ));
            }
        }
        if stats.mean.len() != ch || stats.var.len() != ch {
            return Err(Error::shape(
                "batchnorm2d",
                "channel (1) vs running stats",
                format!("{ch} channels, stats hold {}", stats.mean.len()),
            ));
        }
        let train = mode == Mode::Train;
        let (mean, inv_std): (Vec<f64>, Vec<f64>) = if train {
            let count = batch * hw;
            if count < 2 {
                return Err(Error::DegenerateVariance { count });
            }
            let (mean, var) = kernels::channel_stats(x.data(), batch, ch, hw);
            let unbias = count as f64 / (count as f64 - 1.0);
            let m = BN_MOMENTUM as f64;
            for c in 0..ch {
                stats.mean[c] = ((1.0 - m) * stats.mean[c] as f64 + m * mean[c]) as f32;
                stats.var[c] = ((1.0 - m) * stats.var[c] as f64 + m * var[c] * unbias) as f32;
            }
            let inv = var.iter().map(|v| 1.0 / (v + BN_EPS as f64).sqrt()).collect();
            (mean, inv)
        } else {
            (
                stats.mean.iter().map(|&m| m as f64).collect(),
                stats
                    .var
                    .iter()
                    .map(|&v| 1.0 / (v as f64 + BN_EPS as f64).sqrt())
                    .collect(),
            )
        };
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; x.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * hw;
                for i in base..base + hw {
                    let xh = ((x.data()[i] as f64 - mean[c]) * inv_std[c]) as f32;
                    out[i] = g[c] * xh + bt[c];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Relu(input), needs)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("maxpool2x2", x, 4)?;
        let s = x.shape();
        let (oh, ow) = (s[2] / 2, s[3] / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(
                "maxpool2x2",
                if oh == 0 { "height (2)" } else { "width (3)" },
                format!("{}x{} input pools to an empty extent", s[2], s[3]),
            ));
        }
        let (out, argmax) = kernels::maxpool2x2_forward(x.data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool { input, argmax }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape(input), needs))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).shape();
        let rows = s[0];
        let cols = s[1..].iter().product();
        self.reshape(input, vec![rows, cols])
    }

    /// `input [M, D] . weight[O, D]^T + bias[O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        expect_rank("linear", x, 2)?;
        expect_rank("linear", w, 2)?;
        let (m, d, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        if w.shape()[1] != d {
            return Err(Error::shape(
                "linear",
                "feature (1)",
                format!("input has {d} features, weight expects {}", w.shape()[1]),
            ));
        }
        if b.len() != o {
            return Err(Error::shape(
                "linear",
                "output (0)",
                format!("{o} outputs but {} biases", b.len()),
            ));
        }
        let mut out = vec![0.0f32; m * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(b.data());
        }
        kernels::gemm(m, d, o, x.data(), false, w.data(), true, 1.0, &mut out);
        let value = Tensor::new(vec![m, o], out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(input);
        let value = x.slice_rows(start, end)?;
        let offset = start * (x.len() / x.shape()[0]);
        let needs = self.needs(input);
        Ok(self.push(value, Op::SliceRows { input, offset }, needs))
    }

    /// Squared Euclidean distances between rows: `[m, D] x [n, D] -> [m, n]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        expect_rank("pairwise_sq_dist", ta, 2)?;
        expect_rank("pairwise_sq_dist", tb, 2)?;
        let d = ta.shape()[1];
        if tb.shape()[1] != d {
            return Err(Error::shape(
                "pairwise_sq_dist",
                "feature (1)",
                format!("{d} vs {}", tb.shape()[1]),
            ));
        }
        let (m, n) = (ta.shape()[0], tb.shape()[0]);
        let mut out = Vec::with_capacity(m * n);
        for ra in ta.data().chunks(d) {
            for rb in tb.data().chunks(d) {
                out.push(ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum::<f32>());
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::PairwiseSqDist { a, b }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Scale { input, factor }, needs)
    }

    /// Mean of the rows of `input [M, D]` sharing a segment id: `-> [S, D]`.
    pub fn segment_mean(&mut self, input: Var, segments: &[usize], n_segments: usize) -> Result<Var> {
        let x = self.value(input);
        expect_rank("segment_mean", x, 2)?;
        let (m, d) = (x.shape()[0], x.shape()[1]);
        if segments.len() != m {
            return Err(Error::shape(
                "segment_mean",
                "row (0)",
                format!("{m} rows but {} segment ids", segments.len()),
            ));
        }
        let mut counts = vec![0usize; n_segments];
        for &s in segments {
            if s >= n_segments {
                return Err(Error::contract(
                    "segment_mean",
                    format!("segment id {s} out of range {n_segments}"),
                ));
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract("segment_mean", format!("segment {empty} is empty")));
        }
        let mut sums = vec![0.0f64; n_segments * d];
        for (row, &s) in x.data().chunks(d).zip(segments) {
            for (acc, v) in sums[s * d..(s + 1) * d].iter_mut().zip(row) {
                *acc += *v as f64;
            }
        }
        let out = sums
            .chunks(d)
            .zip(&counts)
            .flat_map(|(row, &c)| row.iter().map(move |v| (v / c as f64) as f32))
            .collect();
        let value = Tensor::new(vec![n_segments, d], out)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            Op::SegmentMean {
                input,
                segments: segments.to_vec(),
                counts,
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy of `logits [M, K]` against integer targets.
    /// Uses a max-shifted log-sum-exp; per-row losses are kept on the node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        expect_rank("cross_entropy", z, 2)?;
        let (m, k) = (z.shape()[0], z.shape()[1]);
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                "row (0)",
                format!("{m} rows but {} targets", targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(m * k);
        let mut row_losses = Vec::with_capacity(m);
        for (row, &t) in z.data().chunks(k).zip(targets) {
            if t >= k {
                return Err(Error::contract(
                    "cross_entropy",
                    format!("target {t} out of range {k}"),
                ));
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            row_losses.push((lse - row[t] as f64) as f32);
            probs.extend(row.iter().map(|&v| ((v as f64 - lse).exp()) as f32));
        }
        let mean = row_losses.iter().map(|&l| l as f64).sum::<f64>() / m as f64;
        let value = Tensor::scalar(mean as f32);
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                row_losses,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|&v| v as f64).sum::<f64>();
        let needs = self.needs(input);
        self.push(Tensor::scalar(s as f32), Op::Sum(input), needs)
    }

    pub fn square(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * v).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(value, Op::Square(input), needs)
    }

    /// Reverse-mode sweep from a scalar `loss`. Rejected if the tape has
    /// already been differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(
                "backward",
                "tape already differentiated; run a new forward pass",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, g: Vec<f32>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let (gi, gk, gb) = kernels::conv2d_backward(geom, x, k, gout, self.needs(*input));
                acc(*input, gi);
                acc(*kernel, gk);
                acc(*bias, gb);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let x = self.value(*input).data();
                let s = node.value.shape();
                let (batch, ch, hw) = (s[0], s[1], s[2] * s[3]);
                let g = self.value(*gamma).data();
                // Recomputed in f64 so the batch sums cancel to rounding level.
                let x_hat = |i: usize, c: usize| (x[i] as f64 - mean[c]) * inv_std[c];
                let mut dgamma = vec![0.0f64; ch];
                let mut dbeta = vec![0.0f64; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * hw;
                        for i in base..base + hw {
                            dbeta[c] += gout[i] as f64;
                            dgamma[c] += gout[i] as f64 * x_hat(i, c);
                        }
                    }
                }
                let mut dx = vec![0.0f32; gout.len()];
                let m = (batch * hw) as f64;
                for c in 0..ch {
                    let scale = g[c] as f64 * inv_std[c];
                    for b in 0..batch {
                        let base = (b * ch + c) * hw;
                        for i in base..base + hw {
                            dx[i] = if *train {
                                (scale
                                    * (gout[i] as f64 - dbeta[c] / m - x_hat(i, c) * dgamma[c] / m))
                                    as f32
                            } else {
                                (scale * gout[i] as f64) as f32
                            };
                        }
                    }
                }
                acc(*input, dx);
                acc(*gamma, dgamma.iter().map(|&v| v as f32).collect());
                acc(*beta, dbeta.iter().map(|&v| v as f32).collect());
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                let g = gout
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                acc(*input, g);
            }
            Op::MaxPool { input, argmax } => {
                let mut g = vec![0.0f32; self.value(*input).len()];
                for (&a, &go) in argmax.iter().zip(gout) {
                    g[a] += go;
                }
                acc(*input, g);
            }
            Op::Reshape(input) => acc(*input, gout.to_vec()),
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (m, d, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if self.needs(*input) {
                    let mut gx = vec![0.0f32; m * d];
                    kernels::gemm(m, o, d, gout, false, w.data(), false, 0.0, &mut gx);
                    acc(*input, gx);
                }
                let mut gw = vec![0.0f32; o * d];
                kernels::gemm(o, m, d, gout, true, x.data(), false, 0.0, &mut gw);
                acc(*weight, gw);
                let mut gb = vec![0.0f32; o];
                for row in gout.chunks(o) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(*bias, gb);
            }
            Op::SliceRows { input, offset } => {
                let mut g = vec![0.0f32; self.value(*input).len()];
                g[*offset..*offset + gout.len()].copy_from_slice(gout);
                acc(*input, g);
            }
            Op::PairwiseSqDist { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
                let mut ga = vec![0.0f32; m * d];
                let mut gb = vec![0.0f32; n * d];
                for i in 0..m {
                    let ra = &ta.data()[i * d..(i + 1) * d];
                    for j in 0..n {
                        let w = 2.0 * gout[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        let rb = &tb.data()[j * d..(j + 1) * d];
                        for k in 0..d {
                            let diff = w * (ra[k] - rb[k]);
                            ga[i * d + k] += diff;
                            gb[j * d + k] -= diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale { input, factor } => acc(*input, gout.iter().map(|g| g * factor).collect()),
            Op::SegmentMean {
                input,
                segments,
                counts,
            } => {
                let d = node.value.shape()[1];
                let mut g = Vec::with_capacity(segments.len() * d);
                for &s in segments {
                    let inv = 1.0 / counts[s] as f32;
                    g.extend(gout[s * d..(s + 1) * d].iter().map(|v| v * inv));
                }
                acc(*input, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                ..
            } => {
                let m = targets.len();
                let k = probs.len() / m;
                let scale = gout[0] / m as f32;
                let mut g: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * k + t] -= scale;
                }
                acc(*logits, g);
            }
            Op::Sum(input) => acc(*input, vec![gout[0]; self.value(*input).len()]),
            Op::Square(input) => {
                let x = self.value(*input).data();
                acc(*input, gout.iter().zip(x).map(|(g, v)| 2.0 * g * v).collect());
            }
        }
        Ok(())
    }
}
