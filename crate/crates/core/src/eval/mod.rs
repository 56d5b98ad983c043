//! Episodic evaluation, confidence intervals, generalization gap,
//! ablation sweeps and report output.

mod ablation;
mod harness;
mod report;
mod stats;

pub use ablation::{ablation_sweep, AblationPoint, AblationRow, SweepSettings};
pub use harness::{
    episode_seed, evaluate, generalization_gap, replay_episode, run_episode, Adaptor, EvalConfig, EvalReport,
    EvalSpec, GapReport,
};
pub use report::{
    ablation_table, build_id, markdown_table, write_ablation_csv, write_episodes_csv, write_markdown, write_summary_csv,
    ReportHeader,
};
pub use stats::{confidence_interval, Z95};
