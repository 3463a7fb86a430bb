//! Markdown summary and plot-data tables assembled from evaluation outputs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::s2s::{lead_csv, month_csv, table_csv, ModelEval, MONTH_BLOCK};
use super::{read_json, write_file, Layout, ModelStatus};
use crate::ensemble::{EnsembleSpec, Tier};
use crate::metrics::Score;
use crate::{Error, Result};

/// Status of a model whose outputs are missing.
pub const SKIPPED: &str = "skipped";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    /// Every expected model with its longest-block ACC, or `None` when skipped.
    pub models: Vec<(String, Option<Score>)>,
}

impl ReportSummary {
    pub fn skipped(&self) -> Vec<&str> {
        self.models
            .iter()
            .filter(|m| m.1.is_none())
            .map(|m| m.0.as_str())
            .collect()
    }
}

fn fmt(s: Option<Score>) -> String {
    match s {
        Some(Score::Value(v)) => format!("{v:.4}"),
        Some(other) => other.to_string(),
        None => "-".into(),
    }
}

/// The pooled block with the longest lead, e.g. `180d`.
fn longest_block(e: &ModelEval) -> Option<&super::BlockScores> {
    e.blocks
        .iter()
        .filter_map(|b| {
            b.block
                .strip_suffix('d')
                .and_then(|n| n.parse::<u32>().ok())
                .map(|n| (n, b))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, b)| b)
}

fn copy_if_exists(from: &Path, to: &Path) -> Result<bool> {
    if !from.exists() {
        return Ok(false);
    }
    let bytes = std::fs::read(from).map_err(|e| Error::io(from, e))?;
    write_file(to, bytes)?;
    Ok(true)
}

fn csv_as_markdown(path: &Path, out: &mut String) -> Result<()> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    let head: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let _ = writeln!(out, "| {} |", head.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(head.len()));
    for rec in rdr.records() {
        let cells: Vec<String> = rec?
            .iter()
            .map(|c| match c.parse::<f64>() {
                Ok(v) if c.contains('.') => format!("{v:.4}"),
                _ => c.to_string(),
            })
            .collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    Ok(())
}

/// Builds `report/summary.md` and the plot-data CSVs from whatever the
/// evaluation steps left in `out`. Models listed by the forecast evaluation
/// without outputs are marked skipped.
pub fn cmd_report(out: &Path) -> Result<ReportSummary> {
    let layout = Layout::new(out);
    let s2s = layout.s2s();
    let listed = s2s.join("models.json");
    if !listed.exists() {
        return Err(Error::EmptyRange(format!(
            "no evaluation outputs in {}",
            out.display()
        )));
    }
    let status: Vec<ModelStatus> = read_json(&listed)?;
    let mut evals = Vec::new();
    let mut summary = ReportSummary { models: Vec::new() };
    let mut md = String::from(
        "# Forecast evaluation summary\n\n## Daily forecasts over the test period\n\n",
    );
    md.push_str("| model | status | 7-day ACC | monthly-mean ACC | longest-block ACC | longest-block RMSE |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for s in &status {
        let eval: Option<ModelEval> = if s.status == "ok" {
            read_json(&s2s.join(format!("{}.json", s.model))).ok()
        } else {
            None
        };
        match eval {
            Some(e) => {
                let get = |block: Option<&super::BlockScores>, m: &str| {
                    block.and_then(|b| b.metrics.get(m).copied())
                };
                let long = longest_block(&e);
                let acc = get(long, "acc");
                let _ = writeln!(
                    md,
                    "| {} | ok | {} | {} | {} | {} |",
                    e.model,
                    fmt(get(e.blocks.iter().find(|b| b.block == "7d"), "acc")),
                    fmt(get(e.blocks.iter().find(|b| b.block == MONTH_BLOCK), "acc")),
                    fmt(acc),
                    fmt(get(long, "rmse")),
                );
                summary
                    .models
                    .push((e.model.clone(), Some(acc.unwrap_or(Score::Undefined))));
                evals.push(e);
            }
            None => {
                let why = if s.reason.is_empty() {
                    "outputs missing"
                } else {
                    s.reason.as_str()
                };
                let _ = writeln!(
                    md,
                    "| {} | {SKIPPED} ({}) | - | - | - | - |",
                    s.model,
                    why.replace('|', "/")
                );
                summary.models.push((s.model.clone(), None));
            }
        }
    }
    let dir = layout.report();
    write_file(&dir.join("blocks.csv"), table_csv(&evals)?)?;
    write_file(&dir.join("lead_curves.csv"), lead_csv(&evals)?)?;
    write_file(&dir.join("month_skill.csv"), month_csv(&evals)?)?;

    let sio = layout.sio().join("table.csv");
    if copy_if_exists(&sio, &dir.join("september.csv"))? {
        md.push_str("\n## September outlook\n\n");
        csv_as_markdown(&sio, &mut md)?;
        copy_if_exists(
            &layout.sio().join("series.csv"),
            &dir.join("september_series.csv"),
        )?;
    }
    let ext = layout.extremes().join("table.csv");
    if copy_if_exists(&ext, &dir.join("extremes.csv"))? {
        md.push_str("\n## September minimum\n\n");
        csv_as_markdown(&ext, &mut md)?;
    }
    let ranking = layout.ensembles().join("ranking.csv");
    if copy_if_exists(&ranking, &dir.join("ensemble_ranking.csv"))? {
        md.push_str("\n## Ensembles\n\n");
        csv_as_markdown(&ranking, &mut md)?;
        md.push('\n');
        for tier in Tier::ALL {
            let p = layout.ensemble(tier);
            if let Ok(spec) = read_json::<EnsembleSpec>(&p) {
                let parts: Vec<String> = spec
                    .members
                    .iter()
                    .zip(&spec.weights)
                    .map(|(m, w)| format!("{m} {w:.4}"))
                    .collect();
                let _ = writeln!(md, "- {}: {}", spec.id, parts.join(", "));
            }
        }
    }
    if copy_if_exists(
        &layout.windows().join("curves.csv"),
        &dir.join("window_curves.csv"),
    )? {
        md.push_str(
            "\n## Rolling windows\n\nACC by lead for 7- and 15-day windows: `window_curves.csv`.\n",
        );
    }
    md.push_str("\n## Plot data\n\n- `lead_curves.csv`: every metric by lead\n- `month_skill.csv`: every metric by target calendar month\n- `blocks.csv`: pooled lead blocks and the monthly-mean block\n");
    write_file(&dir.join("summary.md"), md)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::super::{write_json, BlockScores};
    use super::*;
    use std::collections::BTreeMap;

    fn eval(model: &str, acc: f64) -> ModelEval {
        let mut m = BTreeMap::new();
        m.insert("acc".to_string(), Score::Value(acc));
        m.insert("rmse".to_string(), Score::Value(0.1));
        ModelEval {
            model: model.into(),
            n_runs: 1,
            blocks: vec![
                BlockScores {
                    block: "7d".into(),
                    metrics: m.clone(),
                },
                BlockScores {
                    block: "180d".into(),
                    metrics: m.clone(),
                },
            ],
            per_lead: BTreeMap::from([(1, m.clone())]),
            per_month: BTreeMap::from([(3, m)]),
            lead_month_acc: vec![acc],
            acc_skipped: 0,
        }
    }

    #[test]
    fn missing_model_is_skipped_and_output_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let s2s = dir.path().join("s2s");
        let ok = |m: &str| ModelStatus {
            model: m.into(),
            status: "ok".into(),
            reason: String::new(),
        };
        write_json(&s2s.join("models.json"), &vec![ok("a"), ok("b")]).unwrap();
        write_json(&s2s.join("a.json"), &eval("a", 0.25)).unwrap();
        let s = cmd_report(dir.path()).unwrap();
        assert_eq!(s.models[0], ("a".to_string(), Some(Score::Value(0.25))));
        assert_eq!(s.skipped(), vec!["b"]);
        let md = std::fs::read_to_string(dir.path().join("report/summary.md")).unwrap();
        assert!(md.contains("| a | ok |") && md.contains("0.2500"));
        assert!(md.contains("| b | skipped"));
        let first = std::fs::read(dir.path().join("report/summary.md")).unwrap();
        cmd_report(dir.path()).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("report/summary.md")).unwrap(),
            first
        );
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_report(dir.path()), Err(Error::EmptyRange(_))));
    }
}
