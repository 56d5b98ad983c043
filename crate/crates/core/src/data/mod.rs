//! Datasets, class splits, restriction, and the two samplers: unlabeled
//! pre-training batches and labeled few-shot episodes.

mod io;
mod sampling;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::{batch_tensor, Image};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use io::{
    convert_directory, decode_image, encode_pnm, load_directory_dataset, load_split, read_split_file, write_sample_ptt1,
    ConvertSummary, SampleFormat,
};
pub use sampling::{
    augment_batch, restrict, sample_episode, sample_pretrain_batch, BatchSampler, Episode, PretrainBatch, DEFAULT_QUERIES,
};
pub use synthetic::{make_synthetic_dataset, render_template, SyntheticSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Directory(PathBuf),
    Synthetic(SyntheticSpec),
    Restricted {
        from: Box<Provenance>,
        n_classes: Option<usize>,
        n_images: Option<usize>,
        seed: u64,
    },
    InMemory,
}

/// Equally sized images with optional dense labels `0..C`.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Option<Vec<usize>>,
    class_names: Vec<String>,
    class_index: Vec<Vec<usize>>,
    pub split: Split,
    pub provenance: Provenance,
}

impl Dataset {
    /// `class_names` must have one entry per label value when labels are given.
    pub fn new(
        images: Vec<Image>,
        labels: Option<Vec<usize>>,
        class_names: Vec<String>,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::contract("Dataset::new", "no images"))?;
        let geometry = (first.channels, first.height, first.width);
        if let Some(bad) = images
            .iter()
            .position(|i| (i.channels, i.height, i.width) != geometry)
        {
            let i = &images[bad];
            return Err(Error::shape(
                "Dataset::new",
                "image geometry",
                format!(
                    "sample {bad} is {}x{}x{}, sample 0 is {}x{}x{}",
                    i.channels, i.height, i.width, geometry.0, geometry.1, geometry.2
                ),
            ));
        }
        let mut class_index = Vec::new();
        if let Some(labels) = &labels {
            if labels.len() != images.len() {
                return Err(Error::shape(
                    "Dataset::new",
                    "labels",
                    format!("{} labels for {} images", labels.len(), images.len()),
                ));
            }
            let n_classes = class_names.len();
            class_index = vec![Vec::new(); n_classes];
            for (i, &l) in labels.iter().enumerate() {
                if l >= n_classes {
                    return Err(Error::contract(
                        "Dataset::new",
                        format!("label {l} of sample {i} outside 0..{n_classes}"),
                    ));
                }
                class_index[l].push(i);
            }
            if let Some(empty) = class_index.iter().position(Vec::is_empty) {
                return Err(Error::contract(
                    "Dataset::new",
                    format!("class {empty} ({}) has no samples", class_names[empty]),
                ));
            }
        } else if !class_names.is_empty() {
            return Err(Error::contract("Dataset::new", "class names given without labels"));
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            class_index,
            split,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images[0].channels
    }

    /// `(height, width)` shared by every sample.
    pub fn image_size(&self) -> (usize, usize) {
        (self.images[0].height, self.images[0].width)
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, id: usize) -> &Image {
        &self.images[id]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Sample ids of class `label`.
    pub fn class_samples(&self, label: usize) -> &[usize] {
        &self.class_index[label]
    }

    /// Same images without labels.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            labels: None,
            class_names: Vec::new(),
            class_index: Vec::new(),
            ..self.clone()
        }
    }

    /// Same images with label `l` renamed to `perm[l]`.
    pub fn permute_labels(&self, perm: &[usize]) -> Result<Dataset> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::contract("permute_labels", "dataset is unlabeled"))?;
        let mut seen = vec![false; perm.len()];
        if perm.len() != self.n_classes() || perm.iter().any(|&p| p >= perm.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract("permute_labels", "not a permutation of the class ids"));
        }
        let mut names = vec![String::new(); perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            names[new] = self.class_names[old].clone();
        }
        Dataset::new(
            self.images.clone(),
            Some(labels.iter().map(|&l| perm[l]).collect()),
            names,
            self.split,
            self.provenance.clone(),
        )
    }

    /// Stack the given samples into `[B, C, H, W]`.
    pub fn tensor(&self, ids: &[usize]) -> Result<Tensor> {
        let refs: Vec<&Image> = ids.iter().map(|&i| &self.images[i]).collect();
        batch_tensor(&refs)
    }

    /// Error unless the two datasets share no class name.
    pub fn check_disjoint(&self, other: &Dataset) -> Result<()> {
        if let Some(shared) = self.class_names.iter().find(|n| other.class_names.contains(n)) {
            return Err(Error::contract(
                "check_disjoint",
                format!("class {shared:?} appears in both {} and {} splits", self.split, other.split),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(labels: Option<Vec<usize>>, names: &[&str]) -> Result<Dataset> {
        let n = labels.as_ref().map_or(3, Vec::len);
        let images = (0..n).map(|i| Image::filled(1, 2, 2, i as f32 / 10.0)).collect();
        Dataset::new(
            images,
            labels,
            names.iter().map(|s| s.to_string()).collect(),
            Split::Train,
            Provenance::InMemory,
        )
    }

    #[test]
    fn class_index_groups_samples() {
        let d = tiny(Some(vec![1, 0, 1, 0]), &["a", "b"]).unwrap();
        assert_eq!(d.class_samples(0), &[1, 3]);
        assert_eq!(d.class_samples(1), &[0, 2]);
        assert_eq!(d.tensor(&[2, 0]).unwrap().shape(), &[2, 1, 2, 2]);
    }

    #[test]
    fn invalid_labels_rejected() {
        assert!(tiny(Some(vec![0, 0]), &["a", "b"]).is_err());
        assert!(tiny(Some(vec![0, 2]), &["a", "b"]).is_err());
        assert!(tiny(None, &["a"]).is_err());
        assert!(tiny(None, &[]).is_ok());
    }

    #[test]
    fn mixed_geometry_rejected() {
        let images = vec![Image::filled(1, 2, 2, 0.0), Image::filled(1, 3, 2, 0.0)];
        assert!(matches!(
            Dataset::new(images, None, vec![], Split::Train, Provenance::InMemory),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn permuted_labels_follow_names() {
        let d = tiny(Some(vec![0, 1, 2]), &["a", "b", "c"]).unwrap();
        let p = d.permute_labels(&[2, 0, 1]).unwrap();
        assert_eq!(p.labels().unwrap(), &[2, 0, 1]);
        assert_eq!(p.class_names(), &["b", "c", "a"]);
        assert!(d.permute_labels(&[0, 0, 1]).is_err());
    }

    #[test]
    fn disjointness_by_name() {
        let a = tiny(Some(vec![0, 1]), &["x", "y"]).unwrap();
        let b = tiny(Some(vec![0, 1]), &["y", "z"]).unwrap();
        let c = tiny(Some(vec![0, 1]), &["u", "v"]).unwrap();
        assert!(a.check_disjoint(&b).is_err());
        assert!(a.check_disjoint(&c).is_ok());
    }
}
