//! Finite-difference check of the full pre-training gradient.
//!
//! A fresh Conv-4 embeds `n` prototype images and `n * q` query images in
//! train mode, the prototype loss is backpropagated on the tape, and the
//! resulting parameter gradients are compared against central differences of
//! an independent `f64` implementation of the same objective.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::autodiff::reference::{self, Dims};
use crate::autodiff::{finite_diff_at, GradTolerance, Mode, Tape, Tensor};
use crate::backbone::EmbeddingNetwork;
use crate::error::{Error, Result};
use crate::protoclr::protoclr_loss_on_tape;
use crate::rng::{self, purpose};

const TAG_IMAGES: u64 = 0x6763;
const TAG_COORDS: u64 = 0x6764;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seeds: Vec<u64>,
    /// Prototype images per batch.
    pub n_images: usize,
    pub queries: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Coordinates checked per parameter tensor; tensors with at most this
    /// many elements are checked in full.
    pub samples_per_tensor: usize,
    /// Central-difference step. Batchnorm over a dozen images puts many
    /// units within 1e-4 of a relu or maxpool kink, so steps much above 1e-6
    /// straddle kinks and disagree with the one-sided derivative.
    pub step: f64,
    pub tolerance: GradTolerance,
    /// Test hook: multiply the analytic gradient of the first kernel by this
    /// factor before comparing.
    pub fault_scale: Option<f64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seeds: (0..5).collect(),
            n_images: 4,
            queries: 2,
            channels: 1,
            image_size: 16,
            samples_per_tensor: 8,
            step: 1e-6,
            tolerance: GradTolerance::default(),
            fault_scale: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub seed: u64,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub comparisons: Vec<Comparison>,
    /// Largest normalized error; a check passes when this is `<= tolerance`.
    pub max_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }

    pub fn worst(&self) -> Option<&Comparison> {
        self.comparisons.iter().max_by(|a, b| a.error.total_cmp(&b.error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &Comparison> {
        self.comparisons.iter().filter(move |c| c.error > self.tolerance)
    }
}

/// `f64` Conv-4 with block inputs cached at the base parameters, so that a
/// perturbation in block `k` only re-runs blocks `k..`.
struct CachedObjective {
    params: Vec<Vec<f64>>,
    block_inputs: Vec<(Vec<f64>, Dims)>,
    n: usize,
    q: usize,
}

impl CachedObjective {
    fn new(net: &EmbeddingNetwork, images: &[f64], dims: Dims, n: usize, q: usize) -> Self {
        let params: Vec<Vec<f64>> = net
            .params()
            .iter()
            .map(|t| t.data().iter().map(|&v| v as f64).collect())
            .collect();
        let mut block_inputs = vec![(images.to_vec(), dims)];
        for b in 0..params.len() / 4 {
            let (x, d) = &block_inputs[b];
            let next = run_block(x, *d, &params[4 * b..4 * b + 4]);
            block_inputs.push(next);
        }
        block_inputs.pop();
        CachedObjective {
            params,
            block_inputs,
            n,
            q,
        }
    }

    /// Loss with parameter tensor `tensor` replaced by `values`.
    fn loss_with(&self, tensor: usize, values: &[f64]) -> f64 {
        let start = tensor / 4;
        let (mut x, mut d) = self.block_inputs[start].clone();
        for b in start..self.block_inputs.len() {
            let mut p: Vec<&[f64]> = self.params[4 * b..4 * b + 4].iter().map(Vec::as_slice).collect();
            if b == start {
                p[tensor % 4] = values;
            }
            (x, d) = run_block(&x, d, &p);
        }
        let dim = d.channels * d.height * d.width;
        let n = self.n;
        reference::protoclr_loss(&x[..n * dim], &x[n * dim..], n, self.q, dim)
    }
}

fn run_block<P: AsRef<[f64]>>(x: &[f64], d: Dims, p: &[P]) -> (Vec<f64>, Dims) {
    let (y, yd) = reference::conv2d(x, d, p[0].as_ref(), p[1].as_ref());
    let y = reference::batchnorm_train(&y, yd, p[2].as_ref(), p[3].as_ref());
    reference::maxpool2x2(&reference::relu(&y), yd)
}

fn check_seed(cfg: &GradCheckConfig, seed: u64, out: &mut Vec<Comparison>) -> Result<()> {
    let (n, q, c, s) = (cfg.n_images, cfg.queries, cfg.channels, cfg.image_size);
    let total = n * (1 + q);
    let mut img_rng = rng::stream(seed, &[purpose::INIT, TAG_IMAGES]);
    let pixels: Vec<f32> = (0..total * c * s * s).map(|_| img_rng.random::<f32>()).collect();
    let images = Tensor::new(vec![total, c, s, s], pixels)?;

    let mut net = EmbeddingNetwork::init_conv4(c, s, seed)?;
    let base = net.clone();
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let fwd = net.forward(&mut tape, x, Mode::Train, true)?;
    let protos = tape.slice_rows(fwd.embedding, 0, n)?;
    let queries = tape.slice_rows(fwd.embedding, n, total)?;
    let (loss, _) = protoclr_loss_on_tape(&mut tape, protos, queries, q)?;
    tape.backward(loss)?;

    let dims = Dims {
        batch: total,
        channels: c,
        height: s,
        width: s,
    };
    let pixels64: Vec<f64> = images.data().iter().map(|&v| v as f64).collect();
    let objective = CachedObjective::new(&base, &pixels64, dims, n, q);

    let mut coord_rng = rng::stream(seed, &[purpose::INIT, TAG_COORDS]);
    for (t, (name, &var)) in base.param_names().iter().zip(&fwd.params).enumerate() {
        let analytic = tape
            .grad(var)
            .ok_or_else(|| Error::contract("gradcheck", format!("no gradient for {name}")))?;
        let len = analytic.len();
        let picks: Vec<usize> = if len <= cfg.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = index::sample(&mut coord_rng, len, cfg.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let numeric = finite_diff_at(|p| objective.loss_with(t, p), &objective.params[t], cfg.step, &picks)?;
        for (&i, num) in picks.iter().zip(numeric) {
            let mut a = analytic[i] as f64;
            if t == 0 {
                a *= cfg.fault_scale.unwrap_or(1.0);
            }
            out.push(Comparison {
                seed,
                param: name.clone(),
                index: i,
                analytic: a,
                numeric: num,
                error: cfg.tolerance.error(a, num),
            });
        }
    }
    Ok(())
}

/// Compare tape gradients with finite differences for every parameter
/// tensor over each configured seed.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.seeds.is_empty() || cfg.samples_per_tensor == 0 {
        return Err(Error::contract("gradcheck", "need at least one seed and one sample per tensor"));
    }
    if cfg.n_images < 2 || cfg.queries == 0 {
        return Err(Error::contract(
            "gradcheck",
            format!("need at least 2 images and 1 query, got {} and {}", cfg.n_images, cfg.queries),
        ));
    }
    let mut comparisons = Vec::new();
    for &seed in &cfg.seeds {
        check_seed(cfg, seed, &mut comparisons)?;
    }
    let max_error = comparisons.iter().map(|c| c.error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        comparisons,
        max_error,
        tolerance: cfg.tolerance.rel,
    })
}
