use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::confidence_interval;
use crate::backbone::EmbeddingNetwork;
use crate::data::{sample_episode, Dataset, Episode, Split, DEFAULT_QUERIES};
use crate::error::{Error, Result};
use crate::fewshot::{classify_prototypes, compute_prototypes, embed, linear_probe, proto_tune, BnMode, FineTuneConfig};
use crate::rng::{self, purpose, Stream};

/// How a model adapts to an episode's support set before labeling queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptor {
    /// Returns the true labels (harness self-check).
    Oracle,
    /// Uniformly random labels (chance baseline).
    Random,
    /// Nearest support prototype.
    Proto,
    /// Prototype-initialized head fine-tuned on the support set.
    Prototune,
    /// Randomly initialized head trained on frozen support embeddings.
    Linear,
}

impl Adaptor {
    pub const ALL: [Adaptor; 5] = [
        Adaptor::Oracle,
        Adaptor::Random,
        Adaptor::Proto,
        Adaptor::Prototune,
        Adaptor::Linear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Adaptor::Oracle => "oracle",
            Adaptor::Random => "random",
            Adaptor::Proto => "proto",
            Adaptor::Prototune => "prototune",
            Adaptor::Linear => "linear",
        }
    }
}

impl fmt::Display for Adaptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Adaptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Adaptor::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Adaptor::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown adaptor {s:?}; valid adaptors: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ways: usize,
    pub shots: Vec<usize>,
    pub episodes: usize,
    pub queries: usize,
    pub adaptor: Adaptor,
    pub bn_mode: BnMode,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ways: 5,
            shots: vec![1, 5],
            episodes: 600,
            queries: DEFAULT_QUERIES,
            adaptor: Adaptor::Proto,
            bn_mode: BnMode::Eval,
            seed: 0,
        }
    }
}

/// Episode geometry and adaptation settings for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    pub adaptor: Adaptor,
    pub finetune: FineTuneConfig,
    pub bn_mode: BnMode,
    pub seed: u64,
}

impl EvalSpec {
    pub fn new(ways: usize, shots: usize, episodes: usize, adaptor: Adaptor, seed: u64) -> Self {
        EvalSpec {
            ways,
            shots,
            queries: DEFAULT_QUERIES,
            episodes,
            adaptor,
            finetune: FineTuneConfig::default(),
            bn_mode: BnMode::Eval,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub split: Split,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub episodes: usize,
    /// Seed each episode was sampled (and adapted) from, for replay.
    pub episode_seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    /// Recompute mean and half-width from the stored accuracies.
    pub fn recomputed(&self) -> Result<(f64, f64)> {
        confidence_interval(&self.accuracies)
    }
}

/// Seed of episode `index` under master seed `seed`. Methods evaluated with
/// the same seed see the same episodes.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[purpose::EPISODE, index as u64])
}

fn episode_stream(episode_seed: u64) -> Stream {
    rng::stream(episode_seed, &[])
}

/// Query accuracy of `adaptor` on `ep`; `rng` continues the episode stream.
pub fn run_episode(
    net: Option<&EmbeddingNetwork>,
    dataset: &Dataset,
    ep: &Episode,
    spec: &EvalSpec,
    rng: &mut Stream,
) -> Result<f64> {
    let truth = &ep.query_labels;
    let need_net = || net.ok_or_else(|| Error::contract("evaluate", format!("adaptor {} needs a network", spec.adaptor)));
    let predicted: Vec<usize> = match spec.adaptor {
        Adaptor::Oracle => truth.clone(),
        Adaptor::Random => truth.iter().map(|_| rng.random_range(0..ep.n_ways)).collect(),
        Adaptor::Proto => {
            let net = need_net()?;
            let s = embed(net, &ep.support_tensor(dataset)?, spec.bn_mode)?;
            let protos = compute_prototypes(&s, &ep.support_labels, ep.n_ways)?;
            classify_prototypes(&protos, &embed(net, &ep.query_tensor(dataset)?, spec.bn_mode)?)?.labels
        }
        Adaptor::Prototune | Adaptor::Linear => {
            let net = need_net()?;
            let support = ep.support_tensor(dataset)?;
            let tune = if spec.adaptor == Adaptor::Prototune { proto_tune } else { linear_probe };
            let adapted = tune(net, &support, &ep.support_labels, ep.n_ways, &spec.finetune, spec.bn_mode, rng)?;
            adapted.predict(net, &ep.query_tensor(dataset)?, spec.bn_mode)?.labels
        }
    };
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Sample and score one episode from its stored seed.
pub fn replay_episode(net: Option<&EmbeddingNetwork>, dataset: &Dataset, spec: &EvalSpec, seed: u64) -> Result<f64> {
    let mut r = episode_stream(seed);
    let ep = sample_episode(dataset, spec.ways, spec.shots, spec.queries, &mut r)?;
    run_episode(net, dataset, &ep, spec, &mut r)
}

/// Evaluate over `spec.episodes` independently seeded episodes in parallel.
/// The first failing episode aborts the run, reporting its index and seed.
pub fn evaluate(net: Option<&EmbeddingNetwork>, dataset: &Dataset, spec: &EvalSpec, dataset_name: &str) -> Result<EvalReport> {
    if spec.episodes == 0 {
        return Err(Error::contract("evaluate", "episode count must be positive"));
    }
    spec.finetune.validate()?;
    let started = Instant::now();
    let seeds: Vec<u64> = (0..spec.episodes).map(|i| episode_seed(spec.seed, i)).collect();
    let accuracies = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            replay_episode(net, dataset, spec, seed).map_err(|e| Error::Episode {
                episode: i,
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, ci95) = confidence_interval(&accuracies)?;
    Ok(EvalReport {
        method: spec.adaptor.name().to_string(),
        dataset: dataset_name.to_string(),
        split: dataset.split,
        ways: spec.ways,
        shots: spec.shots,
        queries: spec.queries,
        episodes: spec.episodes,
        episode_seeds: seeds,
        accuracies,
        mean,
        ci95,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Train-split and test-split reports for the same model and the gap
/// `train mean - test mean`.
#[derive(Clone, Debug)]
pub struct GapReport {
    pub train: EvalReport,
    pub test: EvalReport,
    pub gap: f64,
}

pub fn generalization_gap(
    net: Option<&EmbeddingNetwork>,
    train: &Dataset,
    test: &Dataset,
    spec: &EvalSpec,
) -> Result<GapReport> {
    let train_report = evaluate(net, train, spec, "train")?;
    let test_report = evaluate(net, test, spec, "test")?;
    let gap = train_report.mean - test_report.mean;
    Ok(GapReport {
        train: train_report,
        test: test_report,
        gap,
    })
}
