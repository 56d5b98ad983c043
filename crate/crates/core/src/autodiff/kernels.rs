//! Raw slice kernels behind the tape operations.

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is stored row-major as `[m, k]`, or `[k, m]` when `a_t` is set;
/// likewise `b` is `[k, n]` or `[n, k]`. `c` is row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above guarantee every index reachable through the
    // given dimensions and strides lies inside the three slices, and `c`
    // is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Upper bound on im2col buffer size; conv batches are chunked to fit.
const COLS_BUDGET: usize = 1 << 18;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.in_ch * 9
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.patch() * self.hw())).clamp(1, self.batch)
    }
}

/// Unfold images `first..first+count` into `[C*9, count*H*W]` columns (padding 1).
fn im2col(g: &ConvGeom, input: &[f32], first: usize, count: usize, cols: &mut [f32]) {
    let (h, w, hw) = (g.height, g.width, g.hw());
    let ncols = count * hw;
    for c in 0..g.in_ch {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = (c * 9 + ki * 3 + kj) * ncols;
                for b in 0..count {
                    let src = &input[((first + b) * g.in_ch + c) * hw..][..hw];
                    let dst = &mut cols[row + b * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ki as isize - 1;
                        let drow = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        match kj {
                            0 => {
                                drow[0] = 0.0;
                                drow[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            1 => drow.copy_from_slice(srow),
                            _ => {
                                drow[..w - 1].copy_from_slice(&srow[1..]);
                                drow[w - 1] = 0.0;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into image gradients.
fn col2im(g: &ConvGeom, cols: &[f32], first: usize, count: usize, grad_in: &mut [f32]) {
    let (h, w, hw) = (g.height, g.width, g.hw());
    let ncols = count * hw;
    for c in 0..g.in_ch {
        for ki in 0..3 {
            for kj in 0..3 {
                let row = (c * 9 + ki * 3 + kj) * ncols;
                for b in 0..count {
                    let src = &cols[row + b * hw..][..hw];
                    let dst = &mut grad_in[((first + b) * g.in_ch + c) * hw..][..hw];
                    for y in 0..h {
                        let sy = y as isize + ki as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[y * w..(y + 1) * w];
                        let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        match kj {
                            0 => drow[..w - 1]
                                .iter_mut()
                                .zip(&srow[1..])
                                .for_each(|(d, s)| *d += s),
                            1 => drow.iter_mut().zip(srow).for_each(|(d, s)| *d += s),
                            _ => drow[1..]
                                .iter_mut()
                                .zip(&srow[..w - 1])
                                .for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let hw = g.hw();
    let chunk = g.chunk();
    let mut out = vec![0.0f32; g.batch * g.out_ch * hw];
    let mut cols = vec![0.0f32; g.patch() * chunk * hw];
    let mut tmp = vec![0.0f32; g.out_ch * chunk * hw];
    let mut first = 0;
    while first < g.batch {
        let count = chunk.min(g.batch - first);
        let ncols = count * hw;
        let cols = &mut cols[..g.patch() * ncols];
        let tmp = &mut tmp[..g.out_ch * ncols];
        im2col(g, input, first, count, cols);
        gemm(g.out_ch, g.patch(), ncols, kernel, false, cols, false, 0.0, tmp);
        for b in 0..count {
            for f in 0..g.out_ch {
                let src = &tmp[f * ncols + b * hw..][..hw];
                let dst = &mut out[((first + b) * g.out_ch + f) * hw..][..hw];
                let bf = bias[f];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + bf);
            }
        }
        first += count;
    }
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f32],
    kernel: &[f32],
    grad_out: &[f32],
    need_input: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hw = g.hw();
    let chunk = g.chunk();
    let mut grad_in = vec![0.0f32; input.len()];
    let mut grad_k = vec![0.0f32; kernel.len()];
    let mut grad_b = vec![0.0f64; g.out_ch];
    let mut cols = vec![0.0f32; g.patch() * chunk * hw];
    let mut dcols = vec![0.0f32; g.patch() * chunk * hw];
    let mut dout = vec![0.0f32; g.out_ch * chunk * hw];
    for b in 0..g.batch {
        for (f, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out[(b * g.out_ch + f) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let mut first = 0;
    while first < g.batch {
        let count = chunk.min(g.batch - first);
        let ncols = count * hw;
        let cols = &mut cols[..g.patch() * ncols];
        let dcols = &mut dcols[..g.patch() * ncols];
        let dout = &mut dout[..g.out_ch * ncols];
        for b in 0..count {
            for f in 0..g.out_ch {
                dout[f * ncols + b * hw..][..hw]
                    .copy_from_slice(&grad_out[((first + b) * g.out_ch + f) * hw..][..hw]);
            }
        }
        im2col(g, input, first, count, cols);
        // dK[F, C9] += dOut[F, n] * cols[C9, n]^T
        gemm(g.out_ch, ncols, g.patch(), dout, false, cols, true, 1.0, &mut grad_k);
        if need_input {
            // dCols[C9, n] = K[F, C9]^T * dOut[F, n]
            gemm(g.patch(), g.out_ch, ncols, kernel, true, dout, false, 0.0, dcols);
            col2im(g, dcols, first, count, &mut grad_in);
        }
        first += count;
    }
    (grad_in, grad_k, grad_b.into_iter().map(|v| v as f32).collect())
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub(crate) fn channel_stats(input: &[f32], batch: usize, channels: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (batch * hw) as f64;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    for c in 0..channels {
        let mut s = 0.0f64;
        for b in 0..batch {
            s += input[(b * channels + c) * hw..][..hw]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        let mu = s / m;
        let mut ss = 0.0f64;
        for b in 0..batch {
            ss += input[(b * channels + c) * hw..][..hw]
                .iter()
                .map(|&v| (v as f64 - mu).powi(2))
                .sum::<f64>();
        }
        mean[c] = mu;
        var[c] = ss / m;
    }
    (mean, var)
}

/// Returns the pooled output and, per output element, the flat index of the
/// input element that produced it (first maximum in row-major window order).
pub(crate) fn maxpool2x2_forward(
    input: &[f32],
    planes: usize,
    height: usize,
    width: usize,
) -> (Vec<f32>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * width + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * width + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
