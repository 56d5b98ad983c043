use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::transforms;
use crate::error::{Error, Result};

fn half() -> f32 {
    0.5
}

fn one() -> f32 {
    1.0
}

/// One step of an augmentation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Deterministic resize to `size x size`.
    Resize { size: usize },
    /// Output side equals the pipeline size.
    RandomResizedCrop { scale: (f32, f32), ratio: (f32, f32) },
    FlipH {
        #[serde(default = "half")]
        p: f32,
    },
    FlipV {
        #[serde(default = "half")]
        p: f32,
    },
    ColorJitter {
        brightness: f32,
        contrast: f32,
        saturation: f32,
        hue: f32,
        #[serde(default = "one")]
        p: f32,
    },
    Grayscale { p: f32 },
    GaussianBlur { sigma: (f32, f32) },
    PixelDropout {
        p: f32,
        #[serde(default = "half")]
        drop_rate: f32,
    },
    RandomErasing {
        #[serde(default = "half")]
        p: f32,
        scale: (f32, f32),
        ratio: (f32, f32),
    },
}

impl Transform {
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, size: usize, rng: &mut R) -> Result<Image> {
        Ok(match *self {
            Transform::Resize { size } => img.resize(size, size)?,
            Transform::RandomResizedCrop { scale, ratio } => {
                transforms::random_resized_crop(img, scale, ratio, size, rng)?
            }
            Transform::FlipH { p } => transforms::flip_h(img, p, rng),
            Transform::FlipV { p } => transforms::flip_v(img, p, rng),
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
                p,
            } => transforms::color_jitter(img, brightness, contrast, saturation, hue, p, rng),
            Transform::Grayscale { p } => transforms::random_grayscale(img, p, rng),
            Transform::GaussianBlur { sigma } => transforms::gaussian_blur(img, sigma, rng),
            Transform::PixelDropout { p, drop_rate } => transforms::pixel_dropout(img, p, drop_rate, rng),
            Transform::RandomErasing { p, scale, ratio } => {
                if rng.random::<f32>() < p {
                    transforms::random_erasing(img, scale, ratio, rng)
                } else {
                    img.clone()
                }
            }
        })
    }
}

/// Ordered transforms producing `channels x size x size` images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPipeline {
    pub channels: usize,
    pub size: usize,
    pub transforms: Vec<Transform>,
}

impl AugmentationPipeline {
    /// Grayscale handwriting preset (28x28).
    pub fn omniglot() -> Self {
        AugmentationPipeline {
            channels: 1,
            size: 28,
            transforms: vec![
                Transform::Resize { size: 28 },
                Transform::RandomResizedCrop {
                    scale: (0.6, 1.0),
                    ratio: (0.75, 4.0 / 3.0),
                },
                Transform::FlipH { p: 0.5 },
                Transform::FlipV { p: 0.5 },
                Transform::PixelDropout { p: 0.3, drop_rate: 0.5 },
                Transform::RandomErasing {
                    p: 0.5,
                    scale: (0.02, 0.33),
                    ratio: (0.3, 3.3),
                },
            ],
        }
    }

    /// Light color preset for 84x84 natural images.
    pub fn mini() -> Self {
        AugmentationPipeline {
            channels: 3,
            size: 84,
            transforms: vec![
                Transform::RandomResizedCrop {
                    scale: (0.5, 1.0),
                    ratio: (0.75, 4.0 / 3.0),
                },
                Transform::FlipH { p: 0.5 },
                Transform::FlipV { p: 0.5 },
                Transform::ColorJitter {
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.4,
                    hue: 0.2,
                    p: 0.8,
                },
                Transform::Grayscale { p: 0.2 },
            ],
        }
    }

    /// Strong color preset for 224x224 cross-domain images.
    pub fn cdfsl() -> Self {
        AugmentationPipeline {
            channels: 3,
            size: 224,
            transforms: vec![
                Transform::RandomResizedCrop {
                    scale: (0.08, 1.0),
                    ratio: (0.75, 4.0 / 3.0),
                },
                Transform::FlipH { p: 0.5 },
                Transform::ColorJitter {
                    brightness: 0.8,
                    contrast: 0.8,
                    saturation: 0.8,
                    hue: 0.2,
                    p: 0.8,
                },
                Transform::Grayscale { p: 0.2 },
                Transform::GaussianBlur { sigma: (0.1, 0.2) },
            ],
        }
    }

    /// Grayscale preset for the generated shape datasets (16x16): the
    /// handwriting preset without flips, since template identity is
    /// positional.
    pub fn synthetic() -> Self {
        let mut p = Self::omniglot().with_size(16);
        p.transforms
            .retain(|t| !matches!(t, Transform::FlipH { .. } | Transform::FlipV { .. }));
        p
    }

    pub const PRESETS: [&'static str; 4] = ["omniglot", "mini", "cdfsl", "synthetic"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "omniglot" => Ok(Self::omniglot()),
            "mini" => Ok(Self::mini()),
            "cdfsl" => Ok(Self::cdfsl()),
            "synthetic" => Ok(Self::synthetic()),
            other => Err(Error::Config(format!(
                "unknown augmentation preset {other:?} (expected one of {})",
                Self::PRESETS.join(", ")
            ))),
        }
    }

    /// Same transforms at a different output size; fixed resizes follow.
    pub fn with_size(mut self, size: usize) -> Self {
        for t in &mut self.transforms {
            if let Transform::Resize { size: s } = t {
                *s = size;
            }
        }
        self.size = size;
        self
    }

    /// Run every transform in order, then resize to the configured geometry
    /// if a transform left it elsewhere.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        if img.channels != self.channels {
            return Err(Error::contract(
                "apply_pipeline",
                format!("pipeline expects {} channels, image has {}", self.channels, img.channels),
            ));
        }
        let mut out = img.clone();
        for t in &self.transforms {
            out = t.apply(&out, self.size, rng)?;
        }
        if out.height != self.size || out.width != self.size {
            out = out.resize(self.size, self.size)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn preset_tables() {
        let o = AugmentationPipeline::omniglot();
        assert_eq!((o.channels, o.size), (1, 28));
        assert_eq!(o.transforms[0], Transform::Resize { size: 28 });
        assert_eq!(
            o.transforms[1],
            Transform::RandomResizedCrop {
                scale: (0.6, 1.0),
                ratio: (0.75, 4.0 / 3.0)
            }
        );
        assert!(matches!(o.transforms[4], Transform::PixelDropout { p, .. } if p == 0.3));
        assert!(matches!(o.transforms[5], Transform::RandomErasing { scale: (0.02, 0.33), ratio: (0.3, 3.3), .. }));

        let m = AugmentationPipeline::mini();
        assert!(matches!(m.transforms[0], Transform::RandomResizedCrop { scale: (0.5, 1.0), .. }));
        assert!(matches!(m.transforms[3], Transform::ColorJitter { brightness, contrast, saturation, hue, p }
            if brightness == 0.4 && contrast == 0.4 && saturation == 0.4 && hue == 0.2 && p == 0.8));
        assert_eq!(m.transforms[4], Transform::Grayscale { p: 0.2 });
        assert!(!m.transforms.iter().any(|t| matches!(t, Transform::GaussianBlur { .. })));

        let c = AugmentationPipeline::cdfsl();
        assert_eq!(c.size, 224);
        assert!(matches!(c.transforms[0], Transform::RandomResizedCrop { scale: (0.08, 1.0), .. }));
        assert!(matches!(c.transforms[2], Transform::ColorJitter { brightness, hue, p, .. }
            if brightness == 0.8 && hue == 0.2 && p == 0.8));
        assert_eq!(c.transforms[4], Transform::GaussianBlur { sigma: (0.1, 0.2) });
        assert!(!c.transforms.iter().any(|t| matches!(t, Transform::FlipV { .. })));
    }

    #[test]
    fn omniglot_output_is_28_square() {
        let p = AugmentationPipeline::omniglot();
        for (h, w) in [(105, 105), (28, 28), (13, 40)] {
            let img = Image::filled(1, h, w, 1.0);
            let mut r = rng::stream(h as u64, &[w as u64]);
            let out = p.apply(&img, &mut r).unwrap();
            assert_eq!((out.channels, out.height, out.width), (1, 28, 28));
        }
    }

    #[test]
    fn inert_pipeline_is_resize() {
        let p = AugmentationPipeline {
            channels: 3,
            size: 8,
            transforms: vec![
                Transform::RandomResizedCrop {
                    scale: (1.0, 1.0),
                    ratio: (1.0, 1.0),
                },
                Transform::FlipH { p: 0.0 },
                Transform::FlipV { p: 0.0 },
                Transform::ColorJitter {
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.4,
                    hue: 0.1,
                    p: 0.0,
                },
                Transform::Grayscale { p: 0.0 },
                Transform::PixelDropout { p: 0.0, drop_rate: 0.5 },
                Transform::RandomErasing {
                    p: 0.0,
                    scale: (0.02, 0.33),
                    ratio: (0.3, 3.3),
                },
            ],
        };
        let img = Image::new(3, 12, 12, (0..432).map(|i| i as f32 / 432.0).collect()).unwrap();
        let mut r = rng::stream(5, &[]);
        assert_eq!(p.apply(&img, &mut r).unwrap(), img.resize(8, 8).unwrap());
    }

    #[test]
    fn channel_mismatch_is_a_contract_error() {
        let img = Image::filled(3, 28, 28, 0.5);
        let mut r = rng::stream(0, &[]);
        assert!(matches!(
            AugmentationPipeline::omniglot().apply(&img, &mut r),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn same_stream_same_output() {
        let p = AugmentationPipeline::mini().with_size(16);
        let img = Image::new(3, 20, 20, (0..1200).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let a = p.apply(&img, &mut rng::stream(9, &[1, 2])).unwrap();
        let b = p.apply(&img, &mut rng::stream(9, &[1, 2])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let p = AugmentationPipeline::cdfsl();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<AugmentationPipeline>(&s).unwrap(), p);
        let t: Transform = serde_json::from_str(r#"{"transform":"flip_h"}"#).unwrap();
        assert_eq!(t, Transform::FlipH { p: 0.5 });
        assert!(serde_json::from_str::<Transform>(r#"{"transform":"flip_h","q":1}"#).is_err());
        assert!(AugmentationPipeline::preset("imagenet").is_err());
    }
}
