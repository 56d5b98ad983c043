//! Supervised baselines: episodic prototypical training and a plain
//! softmax classifier over the base classes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::head::LinearHead;
use crate::autodiff::{Mode, Tape};
use crate::backbone::{AdamConfig, AdamState, EmbeddingNetwork};
use crate::data::{sample_episode, Dataset};
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoNetConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub iterations: u64,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for ProtoNetConfig {
    fn default() -> Self {
        ProtoNetConfig {
            ways: 20,
            shots: 5,
            queries: 15,
            iterations: 20_000,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Episodic training: each iteration samples a labeled episode, averages
/// the support embeddings into prototypes and classifies the queries by a
/// softmax over negated squared distances. Support and query images share
/// one train-mode forward pass. Returns the loss of every iteration.
pub fn train_protonet_supervised(dataset: &Dataset, net: &mut EmbeddingNetwork, config: &ProtoNetConfig) -> Result<Vec<f32>> {
    if config.ways < 2 {
        return Err(Error::Config("protonet.ways must be at least 2".into()));
    }
    let mut adam = AdamState::new(config.optimizer, net.params());
    let mut losses = Vec::with_capacity(config.iterations as usize);
    for iter in 0..config.iterations {
        let mut r = rng::stream(config.seed, &[purpose::SUPERVISED, iter]);
        let ep = sample_episode(dataset, config.ways, config.shots, config.queries, &mut r)?;
        let ids: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
        let mut tape = Tape::new();
        let x = tape.constant(dataset.tensor(&ids)?);
        let fwd = net.forward(&mut tape, x, Mode::Train, true)?;
        let s = ep.support.len();
        let support = tape.slice_rows(fwd.embedding, 0, s)?;
        let query = tape.slice_rows(fwd.embedding, s, ids.len())?;
        let protos = tape.segment_mean(support, &ep.support_labels, ep.n_ways)?;
        let dist = tape.pairwise_sq_dist(query, protos)?;
        let logits = tape.scale(dist, -1.0);
        let loss = tape.cross_entropy(logits, &ep.query_labels)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iteration: iter as usize,
                detail: format!("episodic loss {value}"),
            });
        }
        losses.push(value);
        tape.backward(loss)?;
        net.collect_grads(&tape, &fwd)?;
        adam.step(&mut net.params_mut())?;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreLinearConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for PreLinearConfig {
    fn default() -> Self {
        PreLinearConfig {
            epochs: 100,
            batch_size: 50,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Softmax classification over every base class. Returns the trained
/// classifier (discarded at test time) and the loss of every step.
pub fn train_pre_linear(
    dataset: &Dataset,
    net: &mut EmbeddingNetwork,
    config: &PreLinearConfig,
) -> Result<(LinearHead, Vec<f32>)> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::contract("train_pre_linear", "dataset is unlabeled"))?;
    if dataset.n_classes() < 2 {
        return Err(Error::contract("train_pre_linear", "need at least 2 base classes"));
    }
    if config.batch_size < 2 || dataset.len() < 2 {
        return Err(Error::contract("train_pre_linear", "batchnorm needs batches of at least 2 images"));
    }
    let mut init = rng::stream(config.seed, &[purpose::SUPERVISED, u64::MAX]);
    let mut head = LinearHead::random(dataset.n_classes(), net.embedding_dim(), &mut init);
    let mut net_opt = AdamState::new(config.optimizer, net.params());
    let mut head_opt = AdamState::new(config.optimizer, [&head.weight, &head.bias]);
    let mut losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut r = rng::stream(config.seed, &[purpose::SUPERVISED, epoch as u64]);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut r);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let merged;
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
            let start = order.len() - config.batch_size - 1;
            merged = order[start..].to_vec();
            batches.pop();
            batches.push(&merged);
        }
        for batch in batches {
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let x = tape.constant(dataset.tensor(batch)?);
            let fwd = net.forward(&mut tape, x, Mode::Train, true)?;
            let w = tape.param(&head.weight);
            let b = tape.param(&head.bias);
            let logits = tape.linear(fwd.embedding, w, b)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    iteration: step,
                    detail: format!("classifier loss {value} in epoch {epoch}"),
                });
            }
            losses.push(value);
            tape.backward(loss)?;
            net.collect_grads(&tape, &fwd)?;
            head.weight.set_grad(tape.grad(w).expect("tracked").to_vec())?;
            head.bias.set_grad(tape.grad(b).expect("tracked").to_vec())?;
            net_opt.step(&mut net.params_mut())?;
            head_opt.step(&mut [&mut head.weight, &mut head.bias])?;
            step += 1;
        }
    }
    Ok((head, losses))
}
