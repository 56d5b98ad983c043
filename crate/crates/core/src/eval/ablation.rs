use serde::{Deserialize, Serialize};

use super::harness::{evaluate, Adaptor, EvalReport, EvalSpec};
use crate::augment::AugmentationPipeline;
use crate::backbone::EmbeddingNetwork;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::protoclr::{train_protoclr, ProtoClrConfig};

/// One pre-training/adaptation configuration of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPoint {
    pub batch_size: usize,
    pub queries: usize,
    pub finetune: bool,
}

impl AblationPoint {
    /// Batch size equal to the episode way count, one view, no fine-tuning.
    pub fn umtra_equivalent(ways: usize) -> Self {
        AblationPoint {
            batch_size: ways,
            queries: 1,
            finetune: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub point: AblationPoint,
    /// Exact pre-training configuration of this row.
    pub protoclr: ProtoClrConfig,
    pub final_train_acc: Option<f32>,
    pub report: EvalReport,
}

/// Settings shared by every row of a sweep.
#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub protoclr: ProtoClrConfig,
    pub pipeline: AugmentationPipeline,
    /// Evaluation geometry; the adaptor is chosen per row from `finetune`.
    pub eval: EvalSpec,
    pub init_seed: u64,
}

/// Pre-train and evaluate one network per grid point (plus the
/// UMTRA-equivalent row when the grid lacks it). All rows share the
/// initialization seed, batch seed and episode seeds.
pub fn ablation_sweep(
    train: &Dataset,
    test: &Dataset,
    grid: &[AblationPoint],
    settings: &SweepSettings,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::contract("ablation_sweep", "empty grid"));
    }
    let umtra = AblationPoint::umtra_equivalent(settings.eval.ways);
    let mut points: Vec<(String, AblationPoint)> = grid
        .iter()
        .map(|p| {
            let label = if *p == umtra {
                "umtra-equivalent".to_string()
            } else {
                format!("N={} Q={}{}", p.batch_size, p.queries, if p.finetune { " +FT" } else { "" })
            };
            (label, *p)
        })
        .collect();
    if !grid.contains(&umtra) {
        points.push(("umtra-equivalent".to_string(), umtra));
    }
    let mut rows = Vec::with_capacity(points.len());
    for (label, point) in points {
        let config = ProtoClrConfig {
            batch_size: point.batch_size,
            queries: point.queries,
            ..settings.protoclr.clone()
        };
        let mut net = EmbeddingNetwork::init_conv4(settings.pipeline.channels, settings.pipeline.size, settings.init_seed)?;
        let outcome = train_protoclr(train, &mut net, &settings.pipeline, &config, None, |_, _| {})?;
        let spec = EvalSpec {
            adaptor: if point.finetune { Adaptor::Prototune } else { Adaptor::Proto },
            ..settings.eval.clone()
        };
        let mut report = evaluate(Some(&net), test, &spec, "test")?;
        report.method = label.clone();
        let row = AblationRow {
            label,
            point,
            protoclr: config,
            final_train_acc: outcome.log.final_smoothed_acc(),
            report,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
