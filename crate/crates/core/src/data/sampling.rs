use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{Dataset, Provenance};
use crate::augment::{batch_tensor, AugmentationPipeline, Image};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Query images per class in an evaluation episode unless configured otherwise.
pub const DEFAULT_QUERIES: usize = 15;

const EPOCH_TAG: u64 = 1 << 62;

/// Keep a seeded subset of classes and/or a seeded subset of images.
///
/// Class restriction keeps `n_classes` whole classes; image restriction then
/// keeps `n_images` samples drawn uniformly from everything that remains, so
/// removals spread across classes in proportion to their size. Classes left
/// without samples are dropped and the survivors relabeled densely.
pub fn restrict(dataset: &Dataset, n_classes: Option<usize>, n_images: Option<usize>, seed: u64) -> Result<Dataset> {
    let mut r = rng::stream(seed, &[purpose::RESTRICT]);
    let mut ids: Vec<usize> = (0..dataset.len()).collect();
    if let Some(k) = n_classes {
        if !dataset.is_labeled() {
            return Err(Error::contract("restrict", "class restriction needs labels"));
        }
        if k == 0 || k > dataset.n_classes() {
            return Err(Error::contract(
                "restrict",
                format!("asked for {k} classes, dataset has {}", dataset.n_classes()),
            ));
        }
        let mut keep = index::sample(&mut r, dataset.n_classes(), k).into_vec();
        keep.sort_unstable();
        ids = keep.iter().flat_map(|&c| dataset.class_samples(c).iter().copied()).collect();
        ids.sort_unstable();
    }
    if let Some(m) = n_images {
        if m == 0 || m > ids.len() {
            return Err(Error::contract(
                "restrict",
                format!("asked for {m} images, {} available", ids.len()),
            ));
        }
        let mut keep: Vec<usize> = index::sample(&mut r, ids.len(), m).into_iter().map(|i| ids[i]).collect();
        keep.sort_unstable();
        ids = keep;
    }
    let images: Vec<Image> = ids.iter().map(|&i| dataset.image(i).clone()).collect();
    let (labels, names) = match dataset.labels() {
        Some(all) => {
            let mut present: Vec<usize> = ids.iter().map(|&i| all[i]).collect();
            present.sort_unstable();
            present.dedup();
            let mut remap = vec![usize::MAX; dataset.n_classes()];
            for (new, &old) in present.iter().enumerate() {
                remap[old] = new;
            }
            let names = present.iter().map(|&c| dataset.class_names()[c].clone()).collect();
            (Some(ids.iter().map(|&i| remap[all[i]]).collect()), names)
        }
        None => (None, Vec::new()),
    };
    Dataset::new(
        images,
        labels,
        names,
        dataset.split,
        Provenance::Restricted {
            from: Box::new(dataset.provenance.clone()),
            n_classes,
            n_images,
            seed,
        },
    )
}

/// `N` un-augmented prototypes and `Q` augmented views of each.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub iteration: u64,
    pub ids: Vec<usize>,
    pub prototypes: Vec<Image>,
    /// Prototype-major: view `q` of prototype `i` is at `i * Q + q`.
    pub queries: Vec<Image>,
    pub n_queries: usize,
}

impl PretrainBatch {
    pub fn n(&self) -> usize {
        self.prototypes.len()
    }

    pub fn query(&self, i: usize, q: usize) -> &Image {
        &self.queries[i * self.n_queries + q]
    }

    /// All `N (1 + Q)` images, prototypes first.
    pub fn tensor(&self) -> Result<Tensor> {
        let all: Vec<&Image> = self.prototypes.iter().chain(&self.queries).collect();
        batch_tensor(&all)
    }
}

/// Picks the sample ids of each pre-training batch.
///
/// By default every batch is an independent draw without replacement from
/// the whole dataset. With `epoch_shuffle` the dataset is walked in a fresh
/// permutation per epoch instead; a tail shorter than `n` is skipped.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    len: usize,
    seed: u64,
    epoch_shuffle: bool,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl BatchSampler {
    pub fn new(dataset_len: usize, n: usize, seed: u64, epoch_shuffle: bool) -> Result<Self> {
        if n == 0 || n > dataset_len {
            return Err(Error::contract(
                "sample_pretrain_batch",
                format!("batch size {n} with {dataset_len} samples"),
            ));
        }
        Ok(BatchSampler {
            n,
            len: dataset_len,
            seed,
            epoch_shuffle,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn next_ids(&mut self, iteration: u64) -> Vec<usize> {
        if !self.epoch_shuffle {
            let mut r = rng::stream(self.seed, &[purpose::BATCH, iteration]);
            return index::sample(&mut r, self.len, self.n).into_vec();
        }
        if self.order.is_empty() || self.cursor + self.n > self.len {
            let mut r = rng::stream(self.seed, &[purpose::BATCH, EPOCH_TAG, self.epoch]);
            self.order = (0..self.len).collect();
            self.order.shuffle(&mut r);
            self.cursor = 0;
            self.epoch += 1;
        }
        let ids = self.order[self.cursor..self.cursor + self.n].to_vec();
        self.cursor += self.n;
        ids
    }
}

/// Build the batch for `ids`: prototype `i` is sample `ids[i]` resized to
/// the pipeline geometry, and view `(i, q)` applies `pipeline` with its own
/// stream derived from `(seed, iteration, i, q)`. Labels are never read.
pub fn augment_batch(
    dataset: &Dataset,
    ids: &[usize],
    n_queries: usize,
    pipeline: &AugmentationPipeline,
    seed: u64,
    iteration: u64,
) -> Result<PretrainBatch> {
    if n_queries == 0 {
        return Err(Error::contract("sample_pretrain_batch", "need at least one query per prototype"));
    }
    if dataset.channels() != pipeline.channels {
        return Err(Error::contract(
            "sample_pretrain_batch",
            format!("dataset has {} channels, pipeline expects {}", dataset.channels(), pipeline.channels),
        ));
    }
    let prototypes = ids
        .iter()
        .map(|&id| dataset.image(id).resize(pipeline.size, pipeline.size))
        .collect::<Result<Vec<_>>>()?;
    let queries = (0..ids.len() * n_queries)
        .into_par_iter()
        .map(|k| {
            let (i, q) = (k / n_queries, k % n_queries);
            let mut r = rng::stream(seed, &[purpose::AUGMENT, iteration, i as u64, q as u64]);
            pipeline.apply(dataset.image(ids[i]), &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainBatch {
        iteration,
        ids: ids.to_vec(),
        prototypes,
        queries,
        n_queries,
    })
}

/// Draw `n` distinct samples for `iteration` and augment each `q` times.
pub fn sample_pretrain_batch(
    dataset: &Dataset,
    n: usize,
    q: usize,
    pipeline: &AugmentationPipeline,
    seed: u64,
    iteration: u64,
) -> Result<PretrainBatch> {
    let ids = BatchSampler::new(dataset.len(), n, seed, false)?.next_ids(iteration);
    augment_batch(dataset, &ids, q, pipeline, seed, iteration)
}

/// A labeled few-shot task. Support and query lists are class-major and
/// episode labels follow the order the classes were drawn in.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_ways: usize,
    pub k_shots: usize,
    pub q_queries: usize,
    /// Dataset label of each episode class.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

impl Episode {
    pub fn support_tensor(&self, dataset: &Dataset) -> Result<Tensor> {
        dataset.tensor(&self.support)
    }

    pub fn query_tensor(&self, dataset: &Dataset) -> Result<Tensor> {
        dataset.tensor(&self.query)
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    n_ways: usize,
    k_shots: usize,
    q_queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if !dataset.is_labeled() {
        return Err(Error::contract("sample_episode", "dataset is unlabeled"));
    }
    if n_ways == 0 || k_shots == 0 || q_queries == 0 {
        return Err(Error::contract(
            "sample_episode",
            format!("ways, shots and queries must be positive (got {n_ways}, {k_shots}, {q_queries})"),
        ));
    }
    if dataset.n_classes() < n_ways {
        return Err(Error::contract(
            "sample_episode",
            format!("{n_ways}-way episode needs {n_ways} classes, dataset has {}", dataset.n_classes()),
        ));
    }
    let per_class = k_shots + q_queries;
    let smallest = (0..dataset.n_classes())
        .min_by_key(|&c| dataset.class_samples(c).len())
        .expect("at least one class");
    let classes = index::sample(rng, dataset.n_classes(), n_ways).into_vec();
    let mut ep = Episode {
        n_ways,
        k_shots,
        q_queries,
        classes: classes.clone(),
        support: Vec::with_capacity(n_ways * k_shots),
        support_labels: Vec::with_capacity(n_ways * k_shots),
        query: Vec::with_capacity(n_ways * q_queries),
        query_labels: Vec::with_capacity(n_ways * q_queries),
    };
    for (label, &c) in classes.iter().enumerate() {
        let pool = dataset.class_samples(c);
        if pool.len() < per_class {
            return Err(Error::contract(
                "sample_episode",
                format!(
                    "class {} has {} samples, {k_shots}-shot with {q_queries} queries needs {per_class} (short by {}; smallest class {} has {})",
                    dataset.class_names()[c],
                    pool.len(),
                    per_class - pool.len(),
                    dataset.class_names()[smallest],
                    dataset.class_samples(smallest).len()
                ),
            ));
        }
        let picks = index::sample(rng, pool.len(), per_class).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            if j < k_shots {
                ep.support.push(pool[p]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(pool[p]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}
