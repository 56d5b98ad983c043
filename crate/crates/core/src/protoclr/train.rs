use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::loss::{accuracy_from_distances, protoclr_loss_on_tape};
use crate::augment::AugmentationPipeline;
use crate::autodiff::{Checkpoint, Mode, Tape};
use crate::backbone::{AdamConfig, AdamState, EmbeddingNetwork};
use crate::data::{augment_batch, BatchSampler, Dataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtoClrConfig {
    /// Images per batch (`N`); each is its own class.
    pub batch_size: usize,
    /// Augmented views per image (`Q`).
    pub queries: usize,
    pub optimizer: AdamConfig,
    /// Stop after this many iterations without a new best smoothed accuracy.
    pub patience: u64,
    /// Iterations averaged into the smoothed training accuracy.
    pub smoothing_window: usize,
    pub max_iterations: u64,
    pub seed: u64,
    /// Walk the dataset in per-epoch permutations instead of independent draws.
    pub epoch_shuffle: bool,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for ProtoClrConfig {
    fn default() -> Self {
        ProtoClrConfig {
            batch_size: 50,
            queries: 3,
            optimizer: AdamConfig::default(),
            patience: 20_000,
            smoothing_window: 100,
            max_iterations: 200_000,
            seed: 0,
            epoch_shuffle: false,
            checkpoint_every: 0,
        }
    }
}

impl ProtoClrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("protoclr.batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.queries == 0 {
            return Err(Error::Config("protoclr.queries must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("protoclr.patience must be at least 1".into()));
        }
        if self.smoothing_window == 0 {
            return Err(Error::Config("protoclr.smoothing_window must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub loss: f32,
    /// Nearest-prototype accuracy on this iteration's batch.
    pub acc: f32,
    /// Learning rate applied by this iteration's update.
    pub lr: f32,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Running mean of `acc` over the smoothing window, one per record.
    pub smoothed_acc: Vec<f32>,
    pub best_iteration: Option<u64>,
    pub best_smoothed_acc: f32,
    pub stopped_early: bool,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// `iter,loss,acc,lr` rows.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r).map_err(|e| Error::Io(e.into()))?;
        }
        if self.records.is_empty() {
            out.write_record(["iter", "loss", "acc", "lr"]).map_err(|e| Error::Io(e.into()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_smoothed_acc(&self) -> Option<f32> {
        self.smoothed_acc.last().copied()
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Network and optimizer state at the best smoothed accuracy.
    pub best: Option<Checkpoint>,
    pub optimizer: AdamState,
}

/// Network plus optimizer state in one checkpoint.
pub fn training_checkpoint(net: &EmbeddingNetwork, adam: &AdamState) -> Checkpoint {
    let mut ck = net.to_checkpoint();
    adam.write_into(&mut ck, &net.param_names());
    ck
}

/// Run self-supervised prototypical pre-training on `dataset` (labels are
/// never read). Each iteration embeds the `N` prototypes and `N * Q` views
/// in a single train-mode forward pass, takes one Adam step, and updates
/// the smoothed accuracy used for early stopping. `net` is left at the
/// final iteration's parameters.
pub fn train_protoclr(
    dataset: &Dataset,
    net: &mut EmbeddingNetwork,
    pipeline: &AugmentationPipeline,
    config: &ProtoClrConfig,
    checkpoint_dir: Option<&Path>,
    mut progress: impl FnMut(&LogRecord, f32),
) -> Result<TrainOutcome> {
    config.validate()?;
    if pipeline.channels != net.in_channels() || pipeline.size != net.input_size() {
        return Err(Error::contract(
            "train_protoclr",
            format!(
                "pipeline produces {}x{}x{}, network expects {}x{}x{}",
                pipeline.channels,
                pipeline.size,
                pipeline.size,
                net.in_channels(),
                net.input_size(),
                net.input_size()
            ),
        ));
    }
    let (n, q) = (config.batch_size, config.queries);
    let mut sampler = BatchSampler::new(dataset.len(), n, config.seed, config.epoch_shuffle)?;
    let mut adam = AdamState::new(config.optimizer, net.params());
    let mut log = TrainLog::default();
    let mut best = None;
    let mut window = VecDeque::with_capacity(config.smoothing_window);
    let mut window_sum = 0.0f64;
    let started = Instant::now();

    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    for iter in 0..config.max_iterations {
        let ids = sampler.next_ids(iter);
        let batch = augment_batch(dataset, &ids, q, pipeline, config.seed, iter)?;
        let images = batch.tensor()?;

        let mut tape = Tape::new();
        let x = tape.constant(images);
        let fwd = net.forward(&mut tape, x, Mode::Train, true)?;
        let protos = tape.slice_rows(fwd.embedding, 0, n)?;
        let queries = tape.slice_rows(fwd.embedding, n, n * (1 + q))?;
        let (loss_var, dist) = protoclr_loss_on_tape(&mut tape, protos, queries, q)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iteration: iter as usize,
                detail: format!(
                    "loss {loss} at learning rate {} (batch ids {:?})",
                    adam.learning_rate(),
                    &ids[..ids.len().min(8)]
                ),
            });
        }
        let acc = accuracy_from_distances(tape.value(dist).data(), n, q);
        tape.backward(loss_var)?;
        net.collect_grads(&tape, &fwd)?;
        let lr = adam.learning_rate();
        adam.step(&mut net.params_mut())?;

        if window.len() == config.smoothing_window {
            window_sum -= window.pop_front().expect("full window") as f64;
        }
        window.push_back(acc);
        window_sum += acc as f64;
        let smoothed = (window_sum / window.len() as f64) as f32;

        let record = LogRecord { iter, loss, acc, lr };
        log.records.push(record);
        log.smoothed_acc.push(smoothed);
        progress(&record, smoothed);

        if log.best_iteration.is_none() || smoothed > log.best_smoothed_acc {
            log.best_iteration = Some(iter);
            log.best_smoothed_acc = smoothed;
            best = Some(training_checkpoint(net, &adam));
        }
        let done = iter + 1;
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
                let path = dir.join(format!("iter_{done:08}.ptt1"));
                training_checkpoint(net, &adam).save(&path)?;
                log.checkpoints.push(path);
            }
        }
        if done - log.best_iteration.expect("set above") > config.patience {
            log.stopped_early = true;
            break;
        }
    }

    if let (Some(dir), Some(ck)) = (checkpoint_dir, &best) {
        let path = dir.join("best.ptt1");
        ck.save(&path)?;
        log.best_checkpoint = Some(path);
    }
    log.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { log, best, optimizer: adam })
}
