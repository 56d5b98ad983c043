use std::io::Write;

use super::ablation::AblationRow;
use super::harness::EvalReport;
use crate::error::{Error, Result};

/// Metadata written as `# key: value` lines above a table.
#[derive(Clone, Debug, Default)]
pub struct ReportHeader {
    pub entries: Vec<(String, String)>,
}

impl ReportHeader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.entries.push((key.into(), value.into()));
        self
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        for (k, v) in &self.entries {
            for (i, line) in v.lines().enumerate() {
                if i == 0 {
                    writeln!(w, "# {k}: {line}")?;
                } else {
                    writeln!(w, "#   {line}")?;
                }
            }
        }
        Ok(())
    }
}

/// Package version plus the commit hash baked in at build time, if any.
pub fn build_id() -> String {
    format!(
        "{} {}",
        env!("CARGO_PKG_VERSION"),
        option_env!("PROTOTRANSFER_GIT_HASH").unwrap_or("unversioned")
    )
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// One summary row per report.
pub fn write_summary_csv(reports: &[EvalReport], header: &ReportHeader, mut w: impl Write) -> Result<()> {
    header.write(&mut w)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "dataset", "split", "ways", "shots", "queries", "episodes", "mean", "ci95"])
        .map_err(csv_err)?;
    for r in reports {
        out.write_record([
            r.method.clone(),
            r.dataset.clone(),
            r.split.to_string(),
            r.ways.to_string(),
            r.shots.to_string(),
            r.queries.to_string(),
            r.episodes.to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.ci95),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `episode,seed,accuracy` rows for exact replay.
pub fn write_episodes_csv(report: &EvalReport, mut w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(&mut w);
    out.write_record(["episode", "seed", "accuracy"]).map_err(csv_err)?;
    for (i, (seed, acc)) in report.episode_seeds.iter().zip(&report.accuracies).enumerate() {
        out.write_record([i.to_string(), seed.to_string(), format!("{acc}")])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn aligned<const N: usize>(head: [&str; N], rows: &[[String; N]]) -> String {
    let widths: Vec<usize> = (0..N)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s:<w$}"))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(head.to_vec());
    out.push_str(&format!(
        "|{}|\n",
        widths.iter().map(|&w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    ));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Aligned markdown table; accuracies in percent.
pub fn markdown_table(reports: &[EvalReport]) -> String {
    let head = ["method", "split", "ways", "shots", "episodes", "accuracy (%)", "95% CI (%)"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.split.to_string(),
                r.ways.to_string(),
                r.shots.to_string(),
                r.episodes.to_string(),
                format!("{:.2}", 100.0 * r.mean),
                format!("±{:.2}", 100.0 * r.ci95),
            ]
        })
        .collect();
    aligned(head, &rows)
}

/// Sweep rows as a markdown table: configuration, episode accuracy and the
/// final smoothed pre-training accuracy.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let head = ["configuration", "N", "Q", "fine-tune", "shots", "accuracy (%)", "95% CI (%)", "train acc"];
    let cells: Vec<[String; 8]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.point.batch_size.to_string(),
                r.point.queries.to_string(),
                if r.point.finetune { "yes" } else { "no" }.to_string(),
                r.report.shots.to_string(),
                format!("{:.2}", 100.0 * r.report.mean),
                format!("±{:.2}", 100.0 * r.report.ci95),
                r.final_train_acc.map_or("-".to_string(), |a| format!("{a:.3}")),
            ]
        })
        .collect();
    aligned(head, &cells)
}

pub fn write_ablation_csv(rows: &[AblationRow], header: &ReportHeader, mut w: impl Write) -> Result<()> {
    header.write(&mut w)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "label", "batch_size", "queries", "finetune", "ways", "shots", "episodes", "mean", "ci95", "final_train_acc",
    ])
    .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.label.clone(),
            r.point.batch_size.to_string(),
            r.point.queries.to_string(),
            r.point.finetune.to_string(),
            r.report.ways.to_string(),
            r.report.shots.to_string(),
            r.report.episodes.to_string(),
            format!("{:.6}", r.report.mean),
            format!("{:.6}", r.report.ci95),
            r.final_train_acc.map_or(String::new(), |a| format!("{a:.6}")),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Markdown document: header as a fenced block, then the table.
pub fn write_markdown(reports: &[EvalReport], header: &ReportHeader, mut w: impl Write) -> Result<()> {
    writeln!(w, "```")?;
    header.write(&mut w)?;
    writeln!(w, "```\n")?;
    w.write_all(markdown_table(reports).as_bytes())?;
    Ok(())
}
