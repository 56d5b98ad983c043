use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Largest output side length a resize may produce.
pub const MAX_SIDE: usize = 4096;

/// Channel-planar image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Geometry(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(
                "Image::new",
                "data",
                format!("{channels}x{height}x{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Rows `top..top+h`, columns `left..left+w`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Geometry(format!(
                "crop {h}x{w} at ({top}, {left}) outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<Image> {
        if out_h == 0 || out_w == 0 || out_h > MAX_SIDE || out_w > MAX_SIDE {
            return Err(Error::Geometry(format!(
                "resize target {out_h}x{out_w} outside 1..={MAX_SIDE}"
            )));
        }
        if out_h == self.height && out_w == self.width {
            return Ok(self.clone());
        }
        let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f32 / out as f32;
            (0..out)
                .map(|o| {
                    let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, src - i0 as f32)
                })
                .collect()
        };
        let ys = taps(out_h, self.height);
        let xs = taps(out_w, self.width);
        let mut data = Vec::with_capacity(self.channels * out_h * out_w);
        for c in 0..self.channels {
            let p = self.plane(c);
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = p[y0 * self.width + x0] * (1.0 - fx) + p[y0 * self.width + x1] * fx;
                    let bot = p[y1 * self.width + x0] * (1.0 - fx) + p[y1 * self.width + x1] * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        let mut out = Image::new(self.channels, out_h, out_w, data)?;
        out.clamp();
        Ok(out)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("image geometry is valid")
    }
}

/// Stack equally sized images into `[B, C, H, W]`.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("batch_tensor", "no images"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.channels, img.height, img.width) != (first.channels, first.height, first.width) {
            return Err(Error::shape(
                "batch_tensor",
                "image geometry",
                format!(
                    "{}x{}x{} vs {}x{}x{}",
                    img.channels, img.height, img.width, first.channels, first.height, first.width
                ),
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(
        vec![images.len(), first.channels, first.height, first.width],
        data,
    )
}

/// RGB in `[0,1]` to (hue in `[0,1)`, saturation, value).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    ((h / 6.0).rem_euclid(1.0), s, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
