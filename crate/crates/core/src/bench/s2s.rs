//! Test-period rollouts scored in lead blocks, per lead and per calendar month.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{csv_bytes, write_file, write_json, Bench, BenchConfig, ModelStatus, SKIPPED};
use crate::grid::{non_ocean_value, Climatology, GridArchive, Mask};
use crate::metrics::{EvalSample, MetricReport, ReportBuilder, METRIC_NAMES};
use crate::rollout::{lead_month_acc, ForecastRun};
use crate::{Error, Result};

/// Name of the block scored on monthly-mean fields.
pub const MONTH_BLOCK: &str = "monthly_mean";

pub type MetricMap = BTreeMap<String, crate::metrics::Score>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub block: String,
    pub metrics: MetricMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model: String,
    pub n_runs: usize,
    /// Pooled leads `1..=L` for each configured `L`, then the monthly-mean block.
    pub blocks: Vec<BlockScores>,
    pub per_lead: BTreeMap<u32, MetricMap>,
    /// Keyed by calendar month of the target date.
    pub per_month: BTreeMap<u32, MetricMap>,
    /// Mean ACC of each 30-lead block.
    pub lead_month_acc: Vec<f64>,
    pub acc_skipped: usize,
}

impl ModelEval {
    pub fn block(&self, name: &str) -> Option<&MetricMap> {
        self.blocks
            .iter()
            .find(|b| b.block == name)
            .map(|b| &b.metrics)
    }
}

pub(crate) fn block_name(lead: u32) -> String {
    format!("{lead}d")
}

fn builder(mask: &std::sync::Arc<Mask>, with_ssim: bool) -> ReportBuilder {
    let b = ReportBuilder::new(mask.clone());
    if with_ssim {
        b
    } else {
        b.without_ssim()
    }
}

/// Scores of the `months` consecutive 30-day mean fields of each run
/// against the matching mean observations. Months with a missing target day
/// are left out. The sample lead is the month number.
pub fn monthly_mean_report(
    runs: &[ForecastRun],
    archive: &GridArchive,
    clim: &Climatology,
    months: usize,
    with_ssim: bool,
) -> Result<MetricReport> {
    let mask = archive.mask();
    let idx = mask.ocean_indices();
    let mut b = builder(mask, with_ssim);
    let mean = |fields: &[&[f32]]| -> Vec<f32> {
        let mut out = vec![non_ocean_value(); mask.len()];
        for &i in idx {
            let s: f64 = fields.iter().map(|f| f64::from(f[i])).sum();
            out[i] = (s / fields.len() as f64) as f32;
        }
        out
    };
    for run in runs {
        for m in 0..months.min(run.horizon() / 30) {
            let grids = &run.grids[m * 30..(m + 1) * 30];
            let truths: Option<Vec<&[f32]>> = grids
                .iter()
                .map(|g| archive.get(g.date).map(|t| t.values()))
                .collect();
            let Some(truths) = truths else { continue };
            let preds: Vec<&[f32]> = grids.iter().map(|g| g.values()).collect();
            let clims = grids
                .iter()
                .map(|g| clim.field(g.date))
                .collect::<Result<Vec<_>>>()?;
            let (p, t, c) = (mean(&preds), mean(&truths), mean(&clims));
            b.add(&EvalSample {
                lead: m as u32 + 1,
                target: grids[0].date,
                pred: &p,
                truth: &t,
                clim: Some(&c),
            })?;
        }
    }
    Ok(b.finish())
}

/// Block, per-lead and per-month scores of one model's runs.
pub fn evaluate_model(
    model: &str,
    runs: &[ForecastRun],
    archive: &GridArchive,
    clim: &Climatology,
    leads: &[u32],
    months: usize,
    with_ssim: bool,
) -> Result<ModelEval> {
    let mask = archive.mask();
    let mut full = builder(mask, with_ssim);
    let mut blocks: Vec<(u32, ReportBuilder)> = leads
        .iter()
        .map(|l| (*l, builder(mask, with_ssim)))
        .collect();
    for run in runs {
        for (i, g) in run.grids.iter().enumerate() {
            let Some(truth) = archive.get(g.date) else {
                continue;
            };
            let s = EvalSample {
                lead: i as u32 + 1,
                target: g.date,
                pred: g.values(),
                truth: truth.values(),
                clim: Some(clim.field(g.date)?),
            };
            full.add(&s)?;
            for (l, b) in &mut blocks {
                if s.lead <= *l {
                    b.add(&s)?;
                }
            }
        }
    }
    let full = full.finish();
    let mut out: Vec<BlockScores> = blocks
        .iter()
        .map(|(l, b)| BlockScores {
            block: block_name(*l),
            metrics: b.finish().per_metric,
        })
        .collect();
    out.push(BlockScores {
        block: MONTH_BLOCK.into(),
        metrics: monthly_mean_report(runs, archive, clim, months, with_ssim)?.per_metric,
    });
    Ok(ModelEval {
        model: model.to_string(),
        n_runs: runs.len(),
        blocks: out,
        lead_month_acc: lead_month_acc(&full),
        per_lead: full.per_lead,
        per_month: full.per_month,
        acc_skipped: full.acc_skipped,
    })
}

fn metric_cells(m: &MetricMap) -> Vec<String> {
    METRIC_NAMES
        .iter()
        .map(|n| {
            m.get(*n)
                .map(|s| s.to_string())
                .unwrap_or_else(|| "undefined".into())
        })
        .collect()
}

fn header(first: &[&'static str]) -> Vec<&'static str> {
    first.iter().copied().chain(METRIC_NAMES).collect()
}

/// `model,block,<metrics>` rows.
pub(crate) fn table_csv(evals: &[ModelEval]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for e in evals {
        for b in &e.blocks {
            let mut r = vec![e.model.clone(), b.block.clone()];
            r.extend(metric_cells(&b.metrics));
            rows.push(r);
        }
    }
    csv_bytes(&header(&["model", "block"]), &rows)
}

/// `model,lead,<metrics>` rows.
pub(crate) fn lead_csv(evals: &[ModelEval]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for e in evals {
        for (lead, m) in &e.per_lead {
            let mut r = vec![e.model.clone(), lead.to_string()];
            r.extend(metric_cells(m));
            rows.push(r);
        }
    }
    csv_bytes(&header(&["model", "lead"]), &rows)
}

/// `model,month,<metrics>` rows.
pub(crate) fn month_csv(evals: &[ModelEval]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for e in evals {
        for (month, m) in &e.per_month {
            let mut r = vec![e.model.clone(), month.to_string()];
            r.extend(metric_cells(m));
            rows.push(r);
        }
    }
    csv_bytes(&header(&["model", "month"]), &rows)
}

/// Rolls every model out from each test init date and writes per-model
/// JSON plus the block, lead and month tables. Models that cannot be
/// loaded or rolled out are recorded as skipped.
pub fn cmd_eval_s2s(cfg: &BenchConfig) -> Result<Vec<ModelStatus>> {
    let b = Bench::open(cfg.clone())?;
    let inits = b.test_inits();
    if inits.is_empty() {
        return Err(Error::EmptyRange(format!(
            "no {}-day forecasts fit in {}",
            cfg.rollout.horizon, cfg.splits.test
        )));
    }
    let dir = b.layout.s2s();
    let mut status = Vec::new();
    let mut evals = Vec::new();
    for slot in b.all_models()? {
        let path = dir.join(format!("{}.json", slot.id));
        let result = slot.handle.map_err(Error::InvalidData).and_then(|h| {
            let runs = h.rollouts(&b.archive, &inits, &cfg.rollout)?;
            evaluate_model(
                &slot.id,
                &runs,
                &b.archive,
                &b.clim,
                &cfg.eval.leads,
                cfg.eval.months,
                cfg.eval.with_ssim,
            )
        });
        match result {
            Ok(e) => {
                write_json(&path, &e)?;
                evals.push(e);
                status.push(ModelStatus {
                    model: slot.id,
                    status: "ok".into(),
                    reason: String::new(),
                });
            }
            Err(e @ (Error::Diverged { .. } | Error::Io { .. })) => return Err(e),
            Err(e) => {
                log::warn!("skipping {}: {e}", slot.id);
                if path.exists() {
                    std::fs::remove_file(&path).map_err(|err| Error::io(&path, err))?;
                }
                status.push(ModelStatus {
                    model: slot.id,
                    status: SKIPPED.into(),
                    reason: e.to_string(),
                });
            }
        }
    }
    write_json(&dir.join("models.json"), &status)?;
    write_json(
        &dir.join("inits.json"),
        &inits.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
    )?;
    write_file(&dir.join("table.csv"), table_csv(&evals)?)?;
    write_file(&dir.join("lead_curves.csv"), lead_csv(&evals)?)?;
    write_file(&dir.join("month.csv"), month_csv(&evals)?)?;
    Ok(status)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DateRange, SicGrid};
    use chrono::{Days, NaiveDate};
    use std::sync::Arc;

    fn d0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2001, 3, 1).unwrap()
    }

    /// A 60-day run on a 2×2 all-ocean grid against a hand-built truth.
    #[test]
    fn monthly_block_uses_monthly_means() {
        let mask = Arc::new(Mask::all_ocean(2, 2));
        let init = d0();
        let day = |i: usize| init + Days::new(i as u64 + 1);
        let truth_v = |i: usize| -> Vec<f32> {
            (0..4)
                .map(|c| 0.1 + 0.01 * c as f32 + 0.005 * i as f32)
                .collect()
        };
        let pred_v = |i: usize| -> Vec<f32> {
            (0..4)
                .map(|c| 0.2 + 0.02 * c as f32 - 0.001 * i as f32)
                .collect()
        };
        let mut grids = vec![SicGrid::new(init, truth_v(0), mask.clone()).unwrap()];
        grids.extend((0..60).map(|i| SicGrid::new(day(i), truth_v(i), mask.clone()).unwrap()));
        let archive = GridArchive::new(mask.clone(), grids, vec![false; 61], 625.0).unwrap();
        let run_grids: Vec<SicGrid> = (0..60)
            .map(|i| SicGrid::new(day(i), pred_v(i), mask.clone()).unwrap())
            .collect();
        let run =
            ForecastRun::new("m".into(), init, 0, vec![], run_grids, "x".into(), 625.0).unwrap();
        let clim = Climatology::constant(mask.clone(), 0.0, DateRange::new(init, day(59)).unwrap());
        let rep = monthly_mean_report(&[run], &archive, &clim, 6, false).unwrap();
        assert_eq!(rep.n_samples, 2);
        // Hand-computed: per month, per cell, the mean of the 30 f32 values.
        let mut sse = 0.0;
        let mut sae = 0.0;
        for m in 0..2 {
            for c in 0..4 {
                let mp: f64 = (m * 30..(m + 1) * 30)
                    .map(|i| f64::from(pred_v(i)[c]))
                    .sum::<f64>()
                    / 30.0;
                let mt: f64 = (m * 30..(m + 1) * 30)
                    .map(|i| f64::from(truth_v(i)[c]))
                    .sum::<f64>()
                    / 30.0;
                let (mp, mt) = (f64::from(mp as f32), f64::from(mt as f32));
                sse += (mp - mt).powi(2);
                sae += (mp - mt).abs();
            }
        }
        assert!((rep.get("mse").as_f64() - sse / 8.0).abs() < 1e-12);
        assert!((rep.get("mae").as_f64() - sae / 8.0).abs() < 1e-12);
        assert!(rep.per_lead.contains_key(&1) && rep.per_lead.contains_key(&2));
    }
}
