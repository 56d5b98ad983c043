use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::head::{compute_prototypes, init_head, LinearHead, Predictions};
use crate::autodiff::{Mode, Tape, Tensor, Var};
use crate::backbone::{AdamConfig, AdamState, EmbeddingNetwork};
use crate::error::{Error, Result};

/// Batchnorm statistics used when embedding episode images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Running statistics accumulated during training.
    #[default]
    Eval,
    /// Statistics of the batch being embedded (transductive).
    Batch,
}

/// Embed `images [B, C, H, W]` without modifying `net`.
pub fn embed(net: &EmbeddingNetwork, images: &Tensor, bn: BnMode) -> Result<Tensor> {
    match bn {
        BnMode::Eval => net.embed(images),
        BnMode::Batch => net.clone().embed_with_mode(images, Mode::Train),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Train the head on frozen embeddings.
    #[default]
    HeadOnly,
    /// Train head and backbone together; batchnorm runs in train mode.
    FullModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub scope: Scope,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 15,
            batch_size: 5,
            learning_rate: 1e-3,
            scope: Scope::HeadOnly,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("finetune.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Result of adapting to one episode's support set.
#[derive(Clone, Debug)]
pub struct Adapted {
    /// Fine-tuned backbone; `None` when the backbone stayed frozen.
    pub net: Option<EmbeddingNetwork>,
    pub head: LinearHead,
    pub steps: usize,
    /// Mean support loss of each epoch.
    pub epoch_losses: Vec<f32>,
}

impl Adapted {
    pub fn predict(&self, base: &EmbeddingNetwork, images: &Tensor, bn: BnMode) -> Result<Predictions> {
        let net = self.net.as_ref().unwrap_or(base);
        self.head.predict(&embed(net, images, bn)?)
    }
}

/// Shuffled index batches for one epoch. With `merge_singleton`, a trailing
/// batch of one is folded into the previous batch (batchnorm needs two).
fn epoch_batches<R: Rng + ?Sized>(len: usize, batch_size: usize, merge_singleton: bool, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if merge_singleton && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn head_adam(head: &LinearHead, lr: f32) -> AdamState {
    AdamState::new(AdamConfig::constant(lr), [&head.weight, &head.bias])
}

fn take_head_grads(tape: &Tape, w: Var, b: Var, head: &mut LinearHead) -> Result<()> {
    let gw = tape.grad(w).ok_or_else(|| Error::contract("fine_tune", "head weight has no gradient"))?;
    let gb = tape.grad(b).ok_or_else(|| Error::contract("fine_tune", "head bias has no gradient"))?;
    head.weight.set_grad(gw.to_vec())?;
    head.bias.set_grad(gb.to_vec())?;
    Ok(())
}

/// Train `head` with softmax cross-entropy on fixed embeddings.
pub fn fine_tune_head<R: Rng + ?Sized>(
    head: &mut LinearHead,
    emb: &Tensor,
    labels: &[usize],
    config: &FineTuneConfig,
    rng: &mut R,
) -> Result<(usize, Vec<f32>)> {
    config.validate()?;
    let mut adam = head_adam(head, config.learning_rate);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0f64;
        for batch in epoch_batches(labels.len(), config.batch_size, false, rng) {
            let x = gather_rows(emb, &batch)?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let w = tape.param(&head.weight);
            let b = tape.param(&head.bias);
            let logits = tape.linear(xv, w, b)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            total += tape.value(loss).data()[0] as f64 * batch.len() as f64;
            tape.backward(loss)?;
            take_head_grads(&tape, w, b, head)?;
            adam.step(&mut [&mut head.weight, &mut head.bias])?;
        }
        epoch_losses.push((total / labels.len() as f64) as f32);
    }
    Ok((adam.step_count() as usize, epoch_losses))
}

fn gather_rows(t: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let row = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(ids.len() * row);
    for &i in ids {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = ids.len();
    Tensor::new(shape, data)
}

fn fine_tune_full<R: Rng + ?Sized>(
    net: &mut EmbeddingNetwork,
    head: &mut LinearHead,
    images: &Tensor,
    labels: &[usize],
    config: &FineTuneConfig,
    rng: &mut R,
) -> Result<(usize, Vec<f32>)> {
    let mut head_opt = head_adam(head, config.learning_rate);
    let mut net_opt = AdamState::new(AdamConfig::constant(config.learning_rate), net.params());
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut total = 0.0f64;
        for batch in epoch_batches(labels.len(), config.batch_size, true, rng) {
            let x = gather_rows(images, &batch)?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fwd = net.forward(&mut tape, xv, Mode::Train, true)?;
            let w = tape.param(&head.weight);
            let b = tape.param(&head.bias);
            let logits = tape.linear(fwd.embedding, w, b)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            total += tape.value(loss).data()[0] as f64 * batch.len() as f64;
            tape.backward(loss)?;
            net.collect_grads(&tape, &fwd)?;
            take_head_grads(&tape, w, b, head)?;
            net_opt.step(&mut net.params_mut())?;
            head_opt.step(&mut [&mut head.weight, &mut head.bias])?;
        }
        epoch_losses.push((total / labels.len() as f64) as f32);
    }
    Ok((head_opt.step_count() as usize, epoch_losses))
}

/// Initialize a head from the support prototypes and fine-tune it (and,
/// for [`Scope::FullModel`], the backbone) on the support set.
pub fn proto_tune<R: Rng + ?Sized>(
    net: &EmbeddingNetwork,
    support: &Tensor,
    support_labels: &[usize],
    n_ways: usize,
    config: &FineTuneConfig,
    bn: BnMode,
    rng: &mut R,
) -> Result<Adapted> {
    config.validate()?;
    if support_labels.is_empty() {
        return Err(Error::contract("proto_tune", "empty support set"));
    }
    let emb = embed(net, support, bn)?;
    let protos = compute_prototypes(&emb, support_labels, n_ways)?;
    let mut head = init_head(&protos)?;
    if config.epochs == 0 {
        return Ok(Adapted {
            net: None,
            head,
            steps: 0,
            epoch_losses: Vec::new(),
        });
    }
    match config.scope {
        Scope::HeadOnly => {
            let (steps, epoch_losses) = fine_tune_head(&mut head, &emb, support_labels, config, rng)?;
            Ok(Adapted {
                net: None,
                head,
                steps,
                epoch_losses,
            })
        }
        Scope::FullModel => {
            let mut tuned = net.clone();
            let (steps, epoch_losses) = fine_tune_full(&mut tuned, &mut head, support, support_labels, config, rng)?;
            Ok(Adapted {
                net: Some(tuned),
                head,
                steps,
                epoch_losses,
            })
        }
    }
}

/// Train a randomly initialized head on frozen support embeddings.
pub fn linear_probe<R: Rng + ?Sized>(
    net: &EmbeddingNetwork,
    support: &Tensor,
    support_labels: &[usize],
    n_ways: usize,
    config: &FineTuneConfig,
    bn: BnMode,
    rng: &mut R,
) -> Result<Adapted> {
    config.validate()?;
    if support_labels.is_empty() {
        return Err(Error::contract("linear_probe", "empty support set"));
    }
    let emb = embed(net, support, bn)?;
    let mut head = LinearHead::random(n_ways, emb.shape()[1], rng);
    let (steps, epoch_losses) = fine_tune_head(&mut head, &emb, support_labels, config, rng)?;
    Ok(Adapted {
        net: None,
        head,
        steps,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn singleton_tail_merges_only_when_asked() {
        let mut r = rng::stream(0, &[]);
        let b = epoch_batches(11, 5, true, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 6]);
        let b = epoch_batches(11, 5, false, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5, 1]);
        let b = epoch_batches(1, 5, true, &mut r);
        assert_eq!(b, vec![vec![0]]);
    }

    #[test]
    fn head_tuning_separates_support() {
        let emb = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9]).unwrap();
        let labels = [0, 0, 1, 1];
        let mut r = rng::stream(1, &[]);
        let mut head = LinearHead::random(2, 2, &mut r);
        let cfg = FineTuneConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 0.05,
            ..Default::default()
        };
        let (steps, losses) = fine_tune_head(&mut head, &emb, &labels, &cfg, &mut r).unwrap();
        assert_eq!(steps, 400);
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(head.predict(&emb).unwrap().labels, labels);
    }
}
