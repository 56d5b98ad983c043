//! Direct-loop `f64` versions of the differentiable operations.
//!
//! These share no code with the tape kernels (no im2col, no GEMM, no saved
//! intermediates) and serve as the objective functions that finite
//! differences are taken over when checking the tape's gradients.

use super::tape::BN_EPS;

/// `[B, C, H, W]` geometry of a 4-D activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zero-padded 3x3 cross-correlation; `kernel` is `[F, C, 3, 3]`.
pub fn conv2d(x: &[f64], d: Dims, kernel: &[f64], bias: &[f64]) -> (Vec<f64>, Dims) {
    let f_out = bias.len();
    let (h, w) = (d.height, d.width);
    let od = Dims {
        channels: f_out,
        ..d
    };
    let mut out = vec![0.0; od.len()];
    for b in 0..d.batch {
        for f in 0..f_out {
            let dst = &mut out[(b * f_out + f) * h * w..][..h * w];
            dst.fill(bias[f]);
            for c in 0..d.channels {
                let src = &x[(b * d.channels + c) * h * w..][..h * w];
                for ki in 0..3 {
                    for kj in 0..3 {
                        let wgt = kernel[((f * d.channels + c) * 3 + ki) * 3 + kj];
                        for y in 0..h {
                            let sy = y as isize + ki as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx as isize + kj as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                dst[y * w + xx] += wgt * src[sy as usize * w + sx as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, od)
}

/// Batch-statistics normalization (biased variance) followed by scale and shift.
pub fn batchnorm_train(x: &[f64], d: Dims, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let hw = d.height * d.width;
    let m = (d.batch * hw) as f64;
    let mut out = vec![0.0; x.len()];
    for c in 0..d.channels {
        let idx = |b: usize, i: usize| (b * d.channels + c) * hw + i;
        let mut mean = 0.0;
        for b in 0..d.batch {
            for i in 0..hw {
                mean += x[idx(b, i)];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for b in 0..d.batch {
            for i in 0..hw {
                var += (x[idx(b, i)] - mean).powi(2);
            }
        }
        var /= m;
        let denom = (var + BN_EPS as f64).sqrt();
        for b in 0..d.batch {
            for i in 0..hw {
                out[idx(b, i)] = gamma[c] * (x[idx(b, i)] - mean) / denom + beta[c];
            }
        }
    }
    out
}

pub fn batchnorm_eval(x: &[f64], d: Dims, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> Vec<f64> {
    let hw = d.height * d.width;
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = (i / hw) % d.channels;
        *o = gamma[c] * (x[i] - mean[c]) / (var[c] + BN_EPS as f64).sqrt() + beta[c];
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Stride-2 max pooling over 2x2 windows, trailing odd row/column dropped.
pub fn maxpool2x2(x: &[f64], d: Dims) -> (Vec<f64>, Dims) {
    let od = Dims {
        height: d.height / 2,
        width: d.width / 2,
        ..d
    };
    let mut out = Vec::with_capacity(od.len());
    for p in 0..d.batch * d.channels {
        for y in 0..od.height {
            for xx in 0..od.width {
                let at = |dy: usize, dx: usize| x[(p * d.height + 2 * y + dy) * d.width + 2 * xx + dx];
                out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
            }
        }
    }
    (out, od)
}

/// `x [m, d] . w[o, d]^T + b`.
pub fn linear(x: &[f64], m: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let o = b.len();
    let d = x.len() / m;
    let mut out = Vec::with_capacity(m * o);
    for i in 0..m {
        for j in 0..o {
            let mut acc = b[j];
            for k in 0..d {
                acc += x[i * d + k] * w[j * d + k];
            }
            out.push(acc);
        }
    }
    out
}

pub fn pairwise_sq_dist(a: &[f64], b: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for ra in a.chunks(dim) {
        for rb in b.chunks(dim) {
            out.push(ra.iter().zip(rb).map(|(x, y)| (x - y).powi(2)).sum());
        }
    }
    out
}

/// Mean over rows of `-log softmax(logits)[target]`, computed without shifting.
pub fn cross_entropy(logits: &[f64], classes: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.chunks(classes).zip(targets) {
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[t].exp() / denom).ln();
    }
    total / targets.len() as f64
}

/// Prototype-contrastive loss on embeddings: queries `[n*q, dim]` laid out
/// prototype-major, prototypes `[n, dim]`.
pub fn protoclr_loss(protos: &[f64], queries: &[f64], n: usize, q: usize, dim: usize) -> f64 {
    let dist = pairwise_sq_dist(queries, protos, dim);
    let logits: Vec<f64> = dist.iter().map(|v| -v).collect();
    let targets: Vec<usize> = (0..n * q).map(|r| r / q).collect();
    cross_entropy(&logits, n, &targets)
}

/// Parameters of a four-block conv/batchnorm/relu/maxpool stack in `f64`,
/// per block ordered as kernel, bias, gamma, beta.
#[derive(Clone, Debug)]
pub struct Conv4Reference {
    pub blocks: Vec<[Vec<f64>; 4]>,
}

impl Conv4Reference {
    /// Flattened embeddings of `images` with batch-statistics normalization.
    pub fn embed_train(&self, images: &[f64], d: Dims) -> (Vec<f64>, usize) {
        let mut x = images.to_vec();
        let mut dims = d;
        for [k, b, g, bt] in &self.blocks {
            let (y, yd) = conv2d(&x, dims, k, b);
            let y = batchnorm_train(&y, yd, g, bt);
            let y = relu(&y);
            let (y, pd) = maxpool2x2(&y, yd);
            x = y;
            dims = pd;
        }
        let dim = dims.channels * dims.height * dims.width;
        (x, dim)
    }

    /// Loss of a jointly normalized batch: `n` prototype images followed by
    /// `n * q` query images (prototype-major).
    pub fn protoclr_loss(&self, images: &[f64], d: Dims, n: usize, q: usize) -> f64 {
        let (emb, dim) = self.embed_train(images, d);
        protoclr_loss(&emb[..n * dim], &emb[n * dim..], n, q, dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_floors_odd_sizes() {
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let d = Dims {
            batch: 1,
            channels: 1,
            height: 3,
            width: 3,
        };
        let (y, yd) = maxpool2x2(&x, d);
        assert_eq!(y, vec![5.0]);
        assert_eq!((yd.height, yd.width), (1, 1));
    }

    #[test]
    fn batchnorm_two_values() {
        let d = Dims {
            batch: 2,
            channels: 1,
            height: 1,
            width: 1,
        };
        let y = batchnorm_train(&[1.0, 3.0], d, &[1.0], &[0.0]);
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn uniform_logits_loss() {
        let loss = cross_entropy(&[0.0; 8], 4, &[1, 2]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }
}
