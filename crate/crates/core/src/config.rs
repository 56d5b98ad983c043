//! JSON run configuration shared by every command.
//!
//! Each section mirrors one module's configuration. Missing keys take their
//! defaults and unknown keys are rejected, so a file written by
//! [`RunConfig::to_json`] reproduces the run it came from.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationPipeline, Transform};
use crate::backbone::EmbeddingNetwork;
use crate::data::{load_directory_dataset, load_split, make_synthetic_dataset, restrict, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fewshot::{FineTuneConfig, PreLinearConfig, ProtoNetConfig};
use crate::protoclr::ProtoClrConfig;

/// Template-id offset of the synthetic test family.
pub const SYNTHETIC_TEST_OFFSET: usize = 10_000;
/// Template-id offset of the synthetic validation family.
pub const SYNTHETIC_VAL_OFFSET: usize = 20_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated shape templates; needs no files.
    #[default]
    Synthetic,
    /// `root/<class>/<image>` on disk.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestrictConfig {
    pub n_classes: Option<usize>,
    pub n_images: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root for the directory source.
    pub root: Option<PathBuf>,
    /// Split files listing class directory names, one per line.
    pub train_split: Option<PathBuf>,
    pub val_split: Option<PathBuf>,
    pub test_split: Option<PathBuf>,
    /// Side length images are resized to (directory source).
    pub image_size: usize,
    /// 1 or 3 (directory source).
    pub channels: usize,
    /// Training family of the synthetic source. Validation and test draw
    /// `synthetic_eval_classes` disjoint templates with the same settings.
    pub synthetic: SyntheticSpec,
    pub synthetic_eval_classes: usize,
    /// Subsample the training split (classes and/or images per class).
    pub restrict: Option<RestrictConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            root: None,
            train_split: None,
            val_split: None,
            test_split: None,
            image_size: 28,
            channels: 1,
            synthetic: SyntheticSpec::default(),
            synthetic_eval_classes: 20,
            restrict: None,
        }
    }
}

impl DataConfig {
    /// `(channels, side)` of the images this section produces.
    pub fn geometry(&self) -> (usize, usize) {
        match self.source {
            DataSource::Synthetic => (self.synthetic.channels, self.synthetic.image_size),
            DataSource::Directory => (self.channels, self.image_size),
        }
    }

    /// A short name for reports.
    pub fn name(&self) -> String {
        match (&self.source, &self.root) {
            (DataSource::Directory, Some(root)) => root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| root.display().to_string()),
            (DataSource::Directory, None) => "directory".into(),
            (DataSource::Synthetic, _) => "synthetic".into(),
        }
    }

    fn split_file(&self, split: Split) -> Option<&Path> {
        match split {
            Split::Train => self.train_split.as_deref(),
            Split::Val => self.val_split.as_deref(),
            Split::Test => self.test_split.as_deref(),
        }
    }

    /// Load one split. The training split is restricted when configured.
    pub fn load(&self, split: Split) -> Result<Dataset> {
        let mut ds = match self.source {
            DataSource::Synthetic => {
                let spec = match split {
                    Split::Train => self.synthetic.clone(),
                    Split::Val | Split::Test => SyntheticSpec {
                        n_classes: self.synthetic_eval_classes,
                        class_offset: self.synthetic.class_offset
                            + if split == Split::Test { SYNTHETIC_TEST_OFFSET } else { SYNTHETIC_VAL_OFFSET },
                        ..self.synthetic.clone()
                    },
                };
                make_synthetic_dataset(&spec)?
            }
            DataSource::Directory => {
                let root = self
                    .root
                    .as_deref()
                    .ok_or_else(|| Error::Config("data.root is required for the directory source".into()))?;
                let any_split = self.train_split.is_some() || self.val_split.is_some() || self.test_split.is_some();
                match self.split_file(split) {
                    Some(file) => load_split(root, file, split, self.image_size, self.channels)?,
                    None if split == Split::Train && !any_split => {
                        load_directory_dataset(root, self.image_size, self.channels)?
                    }
                    None => return Err(Error::Config(format!("data.{split}_split is not set"))),
                }
            }
        };
        ds.split = split;
        if let (Split::Train, Some(r)) = (split, &self.restrict) {
            ds = restrict(&ds, r.n_classes, r.n_images, r.seed)?;
        }
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Named preset (omniglot, mini, cdfsl, synthetic), resized to the data
    /// geometry. Ignored when `transforms` is given.
    pub preset: String,
    pub transforms: Option<Vec<Transform>>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            preset: "omniglot".into(),
            transforms: None,
        }
    }
}

impl AugmentConfig {
    pub fn pipeline(&self, channels: usize, size: usize) -> Result<AugmentationPipeline> {
        if let Some(transforms) = &self.transforms {
            return Ok(AugmentationPipeline {
                channels,
                size,
                transforms: transforms.clone(),
            });
        }
        let p = AugmentationPipeline::preset(&self.preset)?;
        if p.channels != channels {
            return Err(Error::Config(format!(
                "augment preset {:?} expects {} channel(s), data has {channels}",
                self.preset, p.channels
            )));
        }
        Ok(p.with_size(size))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Parameter initialization seed.
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub protonet: ProtoNetConfig,
    pub pre_linear: PreLinearConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub protoclr: ProtoClrConfig,
    pub finetune: FineTuneConfig,
    pub eval: EvalConfig,
    pub supervised: SupervisedConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.protoclr.validate()?;
        self.finetune.validate()?;
        let (channels, size) = self.data.geometry();
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("data channels must be 1 or 3, got {channels}")));
        }
        if size == 0 {
            return Err(Error::Config("data image size must be positive".into()));
        }
        let e = &self.eval;
        if e.ways < 2 {
            return Err(Error::Config(format!("eval.ways must be at least 2, got {}", e.ways)));
        }
        if e.shots.is_empty() || e.shots.contains(&0) {
            return Err(Error::Config("eval.shots must list positive shot counts".into()));
        }
        if e.episodes == 0 || e.queries == 0 {
            return Err(Error::Config("eval.episodes and eval.queries must be positive".into()));
        }
        Ok(())
    }

    /// Point every training and evaluation seed at `seed`. Dataset
    /// definitions (synthetic templates, restriction draws) keep theirs.
    pub fn set_seed(&mut self, seed: u64) {
        self.backbone.seed = seed;
        self.protoclr.seed = seed;
        self.eval.seed = seed;
        self.supervised.protonet.seed = seed;
        self.supervised.pre_linear.seed = seed;
    }

    pub fn pipeline(&self) -> Result<AugmentationPipeline> {
        let (channels, size) = self.data.geometry();
        self.augment.pipeline(channels, size)
    }

    pub fn init_network(&self) -> Result<EmbeddingNetwork> {
        let (channels, size) = self.data.geometry();
        EmbeddingNetwork::init_conv4(channels, size, self.backbone.seed)
    }
}
