//! Individual random image transforms. Each takes an explicit RNG so the
//! caller controls reproducibility.

use rand::seq::SliceRandom;
use rand::Rng;

use super::image::{hsv_to_rgb, rgb_to_hsv, Image, MAX_SIDE};
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 10;

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    uniform(rng, (lo.ln(), hi.ln())).exp()
}

fn coin<R: Rng + ?Sized>(rng: &mut R, p: f32) -> bool {
    p >= 1.0 || (p > 0.0 && rng.random::<f32>() < p)
}

/// Crop a region covering a random area fraction in `scale` with aspect
/// ratio (width / height) log-uniform in `ratio`, then resize to
/// `out_size x out_size`. Falls back to a center crop clamped to `ratio`
/// after ten rejected samples.
pub fn random_resized_crop<R: Rng + ?Sized>(
    img: &Image,
    scale: (f32, f32),
    ratio: (f32, f32),
    out_size: usize,
    rng: &mut R,
) -> Result<Image> {
    if out_size == 0 || out_size > MAX_SIDE {
        return Err(Error::Geometry(format!("crop output size {out_size} outside 1..={MAX_SIDE}")));
    }
    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
        return Err(Error::contract("random_resized_crop", format!("scale range {scale:?} not within (0, 1]")));
    }
    if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
        return Err(Error::contract("random_resized_crop", format!("bad ratio range {ratio:?}")));
    }
    let (height, width) = (img.height, img.width);
    let area = (height * width) as f32;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let target = area * uniform(rng, scale);
        let aspect = log_uniform(rng, ratio);
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return img.crop(top, left, h, w)?.resize(out_size, out_size);
        }
    }
    let in_ratio = width as f32 / height as f32;
    let (h, w) = if in_ratio < ratio.0 {
        (((width as f32 / ratio.0).round() as usize).clamp(1, height), width)
    } else if in_ratio > ratio.1 {
        (height, ((height as f32 * ratio.1).round() as usize).clamp(1, width))
    } else {
        (height, width)
    };
    img.crop((height - h) / 2, (width - w) / 2, h, w)?
        .resize(out_size, out_size)
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels {
        for row in out.plane_mut(c).chunks_mut(img.width) {
            row.reverse();
        }
    }
    out
}

pub fn flip_vertical(img: &Image) -> Image {
    let mut out = img.clone();
    let (h, w) = (img.height, img.width);
    for c in 0..img.channels {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            dst[y * w..(y + 1) * w].copy_from_slice(&src[(h - 1 - y) * w..(h - y) * w]);
        }
    }
    out
}

/// Mirror left-right with probability `p`.
pub fn flip_h<R: Rng + ?Sized>(img: &Image, p: f32, rng: &mut R) -> Image {
    if coin(rng, p) {
        flip_horizontal(img)
    } else {
        img.clone()
    }
}

/// Mirror top-bottom with probability `p`.
pub fn flip_v<R: Rng + ?Sized>(img: &Image, p: f32, rng: &mut R) -> Image {
    if coin(rng, p) {
        flip_vertical(img)
    } else {
        img.clone()
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Per-pixel luma plane; single-channel images are their own luma.
fn gray_plane(img: &Image) -> Vec<f32> {
    if img.channels == 3 {
        (0..img.pixels())
            .map(|i| luma(img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]))
            .collect()
    } else {
        img.plane(0).to_vec()
    }
}

pub fn adjust_brightness(img: &mut Image, factor: f32) {
    img.data.iter_mut().for_each(|v| *v *= factor);
    img.clamp();
}

/// Blend toward the mean luma of the whole image.
pub fn adjust_contrast(img: &mut Image, factor: f32) {
    let g = gray_plane(img);
    let mean = g.iter().map(|&v| v as f64).sum::<f64>() as f32 / g.len() as f32;
    img.data
        .iter_mut()
        .for_each(|v| *v = mean + factor * (*v - mean));
    img.clamp();
}

/// Blend toward the per-pixel luma. No-op on single-channel images.
pub fn adjust_saturation(img: &mut Image, factor: f32) {
    if img.channels != 3 {
        return;
    }
    let g = gray_plane(img);
    for c in 0..3 {
        img.plane_mut(c)
            .iter_mut()
            .zip(&g)
            .for_each(|(v, &gray)| *v = gray + factor * (*v - gray));
    }
    img.clamp();
}

/// Rotate hue by `shift` (fraction of a full turn). No-op on single-channel images.
pub fn adjust_hue(img: &mut Image, shift: f32) {
    if img.channels != 3 {
        return;
    }
    let n = img.pixels();
    for i in 0..n {
        let (r, g, b) = (img.data[i], img.data[n + i], img.data[2 * n + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        img.data[i] = r;
        img.data[n + i] = g;
        img.data[2 * n + i] = b;
    }
    img.clamp();
}

/// With probability `p`, apply brightness, contrast, saturation and hue
/// jitter in a random order. Factors are uniform in `[max(0, 1-s), 1+s]`;
/// the hue shift is uniform in `[-hue, hue]`. A zero strength disables
/// that jitter. Single-channel images only receive brightness and contrast.
pub fn color_jitter<R: Rng + ?Sized>(
    img: &Image,
    brightness: f32,
    contrast: f32,
    saturation: f32,
    hue: f32,
    p: f32,
    rng: &mut R,
) -> Image {
    let mut out = img.clone();
    if !coin(rng, p) {
        return out;
    }
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut R, s: f32| uniform(rng, ((1.0 - s).max(0.0), 1.0 + s));
    for op in order {
        match op {
            0 if brightness > 0.0 => {
                let f = factor(rng, brightness);
                adjust_brightness(&mut out, f);
            }
            1 if contrast > 0.0 => {
                let f = factor(rng, contrast);
                adjust_contrast(&mut out, f);
            }
            2 if saturation > 0.0 && img.channels == 3 => {
                let f = factor(rng, saturation);
                adjust_saturation(&mut out, f);
            }
            3 if hue > 0.0 && img.channels == 3 => {
                let shift = uniform(rng, (-hue, hue));
                adjust_hue(&mut out, shift);
            }
            _ => {}
        }
    }
    out
}

/// With probability `p`, replace every channel by luma `0.299R + 0.587G + 0.114B`.
pub fn random_grayscale<R: Rng + ?Sized>(img: &Image, p: f32, rng: &mut R) -> Image {
    if img.channels != 3 || !coin(rng, p) {
        return img.clone();
    }
    let g = gray_plane(img);
    let mut out = img.clone();
    for c in 0..3 {
        out.plane_mut(c).copy_from_slice(&g);
    }
    out.clamp();
    out
}

/// Normalized Gaussian taps for offsets `-radius..=radius`, `radius = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| (v / total) as f32).collect()
}

/// Mirror an out-of-range index back inside `0..n` without repeating the edge.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable blur with reflect padding.
pub fn blur(img: &Image, sigma: f32) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..img.channels {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * src[y * w + reflect(x as isize + t as isize - r, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * tmp[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    out.clamp();
    out
}

/// Blur with sigma drawn uniformly from `sigma_range`.
pub fn gaussian_blur<R: Rng + ?Sized>(img: &Image, sigma_range: (f32, f32), rng: &mut R) -> Image {
    let sigma = uniform(rng, sigma_range);
    blur(img, sigma)
}

/// With probability `p_apply`, zero each pixel (all channels) independently
/// with probability `drop_rate`.
pub fn pixel_dropout<R: Rng + ?Sized>(img: &Image, p_apply: f32, drop_rate: f32, rng: &mut R) -> Image {
    let mut out = img.clone();
    if !coin(rng, p_apply) {
        return out;
    }
    let n = img.pixels();
    for i in 0..n {
        if coin(rng, drop_rate) {
            for c in 0..img.channels {
                out.data[c * n + i] = 0.0;
            }
        }
    }
    out
}

/// Zero one rectangle whose area fraction lies in `scale` and whose aspect
/// ratio (height / width) is log-uniform in `ratio`. Placements that do not
/// fit, or whose rounded area leaves `scale`, are retried; after ten
/// failures the image is returned unchanged.
pub fn random_erasing<R: Rng + ?Sized>(
    img: &Image,
    scale: (f32, f32),
    ratio: (f32, f32),
    rng: &mut R,
) -> Image {
    let (height, width) = (img.height, img.width);
    let area = (height * width) as f32;
    if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
        return img.clone();
    }
    for _ in 0..PLACEMENT_ATTEMPTS {
        let target = area * uniform(rng, scale);
        let aspect = log_uniform(rng, ratio);
        let h = (target * aspect).sqrt().round() as usize;
        let w = (target / aspect).sqrt().round() as usize;
        if h == 0 || w == 0 || h >= height || w >= width {
            continue;
        }
        let frac = (h * w) as f32 / area;
        if frac < scale.0 || frac > scale.1 {
            continue;
        }
        let top = rng.random_range(0..=height - h);
        let left = rng.random_range(0..=width - w);
        let mut out = img.clone();
        for c in 0..img.channels {
            let plane = out.plane_mut(c);
            for y in top..top + h {
                plane[y * width + left..y * width + left + w].fill(0.0);
            }
        }
        return out;
    }
    img.clone()
}
