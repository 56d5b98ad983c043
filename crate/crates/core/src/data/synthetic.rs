//! Latent-class images built from procedurally placed shapes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, Split};
use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

const SHAPES_PER_TEMPLATE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f32,
    /// Largest per-sample translation of the template, in pixels.
    pub jitter: usize,
    /// First template id; families with non-overlapping id ranges share no class.
    pub class_offset: usize,
    /// First sample index; offset ranges draw fresh samples of the same classes.
    pub sample_offset: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 8,
            n_per_class: 50,
            image_size: 16,
            channels: 1,
            noise_std: 0.05,
            jitter: 0,
            class_offset: 0,
            sample_offset: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Rect,
    Disk,
    Ring,
    Cross,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: Kind,
    cx: f32,
    cy: f32,
    rx: f32,
    ry: f32,
    intensity: [f32; 3],
}

impl Shape {
    fn covers(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        match self.kind {
            Kind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            Kind::Disk => dx * dx + dy * dy <= 1.0,
            Kind::Ring => (0.4..=1.0).contains(&(dx * dx + dy * dy)),
            Kind::Cross => (dx.abs() <= 1.0 && dy.abs() <= 0.3) || (dy.abs() <= 1.0 && dx.abs() <= 0.3),
        }
    }
}

fn template_shapes(template: usize, seed: u64) -> Vec<Shape> {
    let mut r = rng::stream(seed, &[purpose::SYNTHETIC, 0, template as u64]);
    (0..SHAPES_PER_TEMPLATE)
        .map(|_| {
            let kind = match r.random_range(0..4) {
                0 => Kind::Rect,
                1 => Kind::Disk,
                2 => Kind::Ring,
                _ => Kind::Cross,
            };
            Shape {
                kind,
                cx: r.random_range(0.2..0.8),
                cy: r.random_range(0.2..0.8),
                rx: r.random_range(0.1..0.3),
                ry: r.random_range(0.1..0.3),
                intensity: [r.random_range(0.4..1.0), r.random_range(0.4..1.0), r.random_range(0.4..1.0)],
            }
        })
        .collect()
}

fn render(shapes: &[Shape], size: usize, channels: usize, shift: (f32, f32)) -> Image {
    let mut img = Image::filled(channels, size, size, 0.0);
    let n = size * size;
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 + 0.5 - shift.0) / size as f32;
            let v = (y as f32 + 0.5 - shift.1) / size as f32;
            for s in shapes.iter().filter(|s| s.covers(u, v)) {
                for c in 0..channels {
                    let px = &mut img.data[c * n + y * size + x];
                    *px = px.max(s.intensity[c]);
                }
            }
        }
    }
    img
}

/// Noise-free, unshifted image of template `template`.
pub fn render_template(template: usize, size: usize, channels: usize, seed: u64) -> Image {
    render(&template_shapes(template, seed), size, channels, (0.0, 0.0))
}

/// Each class is a fixed arrangement of shapes; samples translate it by up
/// to `jitter` pixels and add Gaussian pixel noise, clamped to `[0, 1]`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_classes < 2 {
        return Err(Error::contract("make_synthetic_dataset", "need at least 2 classes"));
    }
    if spec.n_per_class == 0 {
        return Err(Error::contract("make_synthetic_dataset", "need at least 1 sample per class"));
    }
    if spec.image_size == 0 {
        return Err(Error::Geometry("synthetic image size must be positive".into()));
    }
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::Geometry(format!("{} channels; expected 1 or 3", spec.channels)));
    }
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
    let mut images = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    let mut names = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let template = spec.class_offset + c;
        let shapes = template_shapes(template, spec.seed);
        names.push(format!("class_{template:04}"));
        for s in 0..spec.n_per_class {
            let index = (spec.sample_offset + s) as u64;
            let mut r = rng::stream(spec.seed, &[purpose::SYNTHETIC, 1, template as u64, index]);
            let j = spec.jitter as i64;
            let shift = (r.random_range(-j..=j) as f32, r.random_range(-j..=j) as f32);
            let mut img = render(&shapes, spec.image_size, spec.channels, shift);
            if spec.noise_std > 0.0 {
                img.data.iter_mut().for_each(|v| *v += noise.sample(&mut r));
                img.clamp();
            }
            images.push(img);
            labels.push(c);
        }
    }
    Dataset::new(images, Some(labels), names, Split::Train, Provenance::Synthetic(spec.clone()))
}
