//! September-mean extent and concentration forecasts from fixed leads
//! before September 1, scored as detrended yearly series.

use std::collections::BTreeMap;

use chrono::{Datelike, Days};
use serde::{Deserialize, Serialize};

use super::{
    csv_bytes, september, write_file, write_json, Bench, BenchConfig, ModelHandle, ModelStatus,
    SKIPPED,
};
use crate::grid::{sea_ice_extent, DateRange, GridArchive, SicGrid, SIE_THRESHOLD};
use crate::metrics::{detrended_metrics, DetrendedStats, Score};
use crate::rollout::RolloutConfig;
use crate::{Error, Result};

/// Years whose whole September is inside `range` and observed.
pub fn september_years(archive: &GridArchive, range: DateRange) -> Vec<i32> {
    (range.start.year()..=range.end.year())
        .filter(|y| {
            september(*y).is_some_and(|(a, b)| {
                range.contains(a)
                    && range.contains(b)
                    && a.iter_days().take(30).all(|d| archive.get(d).is_some())
            })
        })
        .collect()
}

/// Mean of the daily extents, in 10⁶ km².
pub fn september_mean_sie(grids: &[&SicGrid], cell_area_km2: f64) -> f64 {
    grids
        .iter()
        .map(|g| sea_ice_extent(g, SIE_THRESHOLD, cell_area_km2))
        .sum::<f64>()
        / grids.len() as f64
        / 1e6
}

fn september_mean_sic(grids: &[&SicGrid]) -> f64 {
    grids.iter().map(|g| g.ocean_mean()).sum::<f64>() / grids.len() as f64
}

/// One model's yearly September forecasts at one lead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SioSeries {
    pub model: String,
    pub lead: u32,
    pub years: Vec<i32>,
    pub pred_sie: Vec<f64>,
    pub obs_sie: Vec<f64>,
    pub pred_sic: Vec<f64>,
    pub obs_sic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SioRow {
    pub model: String,
    pub lead: u32,
    pub n_years: usize,
    pub sie: DetrendedStats,
    pub sic: DetrendedStats,
}

impl SioSeries {
    pub fn row(&self) -> Result<SioRow> {
        Ok(SioRow {
            model: self.model.clone(),
            lead: self.lead,
            n_years: self.years.len(),
            sie: detrended_metrics(&self.pred_sie, &self.obs_sie)?,
            sic: detrended_metrics(&self.pred_sic, &self.obs_sic)?,
        })
    }
}

/// Forecasts initialised `lead` days before each September 1.
pub fn sio_series(
    model: &ModelHandle,
    archive: &GridArchive,
    years: &[i32],
    lead: u32,
    rc: &RolloutConfig,
) -> Result<SioSeries> {
    let firsts: Vec<_> = years
        .iter()
        .map(|y| {
            september(*y)
                .map(|s| s.0)
                .ok_or_else(|| Error::InvalidConfig(format!("bad year {y}")))
        })
        .collect::<Result<_>>()?;
    let inits: Vec<_> = firsts
        .iter()
        .map(|d| *d - Days::new(u64::from(lead)))
        .collect();
    let runs = model.rollouts(archive, &inits, rc)?;
    let mut s = SioSeries {
        model: model.id(),
        lead,
        years: years.to_vec(),
        pred_sie: Vec::new(),
        obs_sie: Vec::new(),
        pred_sic: Vec::new(),
        obs_sic: Vec::new(),
    };
    let first = lead as usize;
    for (run, sep1) in runs.iter().zip(&firsts) {
        if run.horizon() < first + 29 {
            return Err(Error::InvalidConfig(format!(
                "{}-day run does not reach September 30",
                run.horizon()
            )));
        }
        let pred: Vec<&SicGrid> = run.grids[first - 1..first + 29].iter().collect();
        let obs: Vec<&SicGrid> = sep1
            .iter_days()
            .take(30)
            .map(|d| {
                archive
                    .get(d)
                    .ok_or_else(|| Error::InvalidData(format!("no observation on {d}")))
            })
            .collect::<Result<_>>()?;
        s.pred_sie
            .push(september_mean_sie(&pred, run.cell_area_km2));
        s.obs_sie
            .push(september_mean_sie(&obs, archive.cell_area_km2));
        s.pred_sic.push(september_mean_sic(&pred));
        s.obs_sic.push(september_mean_sic(&obs));
    }
    Ok(s)
}

fn median(mut v: Vec<f64>) -> Score {
    if v.is_empty() {
        return Score::Undefined;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Score::Value(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn median_stats(stats: &[&DetrendedStats]) -> DetrendedStats {
    let col = |f: fn(&DetrendedStats) -> Score| {
        median(stats.iter().filter_map(|s| f(s).value()).collect())
    };
    DetrendedStats {
        rmse_detrend: col(|s| s.rmse_detrend),
        acc_detrend: col(|s| s.acc_detrend),
        acc: col(|s| s.acc),
    }
}

/// Per lead: the learned model with the lowest detrended extent RMSE, and
/// column-wise medians over the learned models.
pub fn summary_rows(rows: &[SioRow], learned: &[String]) -> Vec<SioRow> {
    let mut by_lead: BTreeMap<u32, Vec<&SioRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| learned.contains(&r.model)) {
        by_lead.entry(r.lead).or_default().push(r);
    }
    let mut out = Vec::new();
    for (lead, rs) in by_lead {
        let best = rs
            .iter()
            .filter(|r| r.sie.rmse_detrend.is_defined())
            .min_by(|a, b| {
                a.sie
                    .rmse_detrend
                    .as_f64()
                    .total_cmp(&b.sie.rmse_detrend.as_f64())
                    .then_with(|| a.model.cmp(&b.model))
            })
            .or_else(|| rs.first());
        if let Some(b) = best {
            out.push(SioRow {
                model: format!("best ({})", b.model),
                ..(*b).clone()
            });
        }
        out.push(SioRow {
            model: "median".into(),
            lead,
            n_years: rs[0].n_years,
            sie: median_stats(&rs.iter().map(|r| &r.sie).collect::<Vec<_>>()),
            sic: median_stats(&rs.iter().map(|r| &r.sic).collect::<Vec<_>>()),
        });
    }
    out
}

/// Scores an outside `model,lead,year,sie` CSV against the observed series.
fn reference_rows(path: &std::path::Path, obs: &BTreeMap<i32, f64>) -> Result<Vec<SioRow>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    let mut groups: BTreeMap<(String, u32), Vec<(i32, f64)>> = BTreeMap::new();
    for rec in rdr.deserialize::<(String, u32, i32, f64)>() {
        let (m, lead, year, sie) = rec?;
        groups.entry((m, lead)).or_default().push((year, sie));
    }
    let undefined = DetrendedStats {
        rmse_detrend: Score::Undefined,
        acc_detrend: Score::Undefined,
        acc: Score::Undefined,
    };
    let mut out = Vec::new();
    for ((model, lead), mut pts) in groups {
        pts.sort_by_key(|p| p.0);
        let (p, t): (Vec<f64>, Vec<f64>) = pts
            .iter()
            .filter_map(|(y, v)| obs.get(y).map(|o| (*v, *o)))
            .unzip();
        out.push(SioRow {
            model: format!("reference: {model}"),
            lead,
            n_years: p.len(),
            sie: detrended_metrics(&p, &t)?,
            sic: undefined,
        });
    }
    Ok(out)
}

fn row_cells(r: &SioRow) -> Vec<String> {
    vec![
        r.model.clone(),
        r.lead.to_string(),
        r.n_years.to_string(),
        r.sie.rmse_detrend.to_string(),
        r.sie.acc_detrend.to_string(),
        r.sie.acc.to_string(),
        r.sic.rmse_detrend.to_string(),
        r.sic.acc_detrend.to_string(),
        r.sic.acc.to_string(),
    ]
}

pub(crate) const TABLE_HEADER: [&str; 9] = [
    "model",
    "lead",
    "n_years",
    "sie_rmse_detrend",
    "sie_acc_detrend",
    "sie_acc",
    "sic_rmse_detrend",
    "sic_acc_detrend",
    "sic_acc",
];

/// Writes `sio/table.csv` (per model and lead, then best and median rows,
/// then any reference rows) and `sio/series.csv`.
pub fn cmd_eval_sio(cfg: &BenchConfig) -> Result<Vec<ModelStatus>> {
    let b = Bench::open(cfg.clone())?;
    let years = september_years(&b.archive, cfg.splits.test);
    let mut status = Vec::new();
    let mut rows = Vec::new();
    let mut series_rows = Vec::new();
    let mut learned = Vec::new();
    let mut obs = BTreeMap::new();
    for slot in b.all_models()? {
        let result = slot.handle.map_err(Error::InvalidData).and_then(|h| {
            if h.is_learned() {
                learned.push(slot.id.clone());
            }
            cfg.eval
                .sio_leads
                .iter()
                .map(|l| sio_series(&h, &b.archive, &years, *l, &cfg.rollout))
                .collect::<Result<Vec<_>>>()
        });
        match result {
            Ok(all) => {
                for s in &all {
                    rows.push(s.row()?);
                    for (i, y) in s.years.iter().enumerate() {
                        obs.insert(*y, s.obs_sie[i]);
                        series_rows.push(vec![
                            s.model.clone(),
                            s.lead.to_string(),
                            y.to_string(),
                            s.pred_sie[i].to_string(),
                            s.obs_sie[i].to_string(),
                            s.pred_sic[i].to_string(),
                            s.obs_sic[i].to_string(),
                        ]);
                    }
                }
                status.push(ModelStatus {
                    model: slot.id,
                    status: "ok".into(),
                    reason: String::new(),
                });
            }
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => {
                log::warn!("skipping {} in September evaluation: {e}", slot.id);
                status.push(ModelStatus {
                    model: slot.id,
                    status: SKIPPED.into(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let mut table = rows.clone();
    table.extend(summary_rows(&rows, &learned));
    if let Some(p) = &cfg.eval.sio_reference {
        table.extend(reference_rows(p, &obs)?);
    }
    let dir = b.layout.sio();
    let cells: Vec<Vec<String>> = table.iter().map(row_cells).collect();
    write_file(&dir.join("table.csv"), csv_bytes(&TABLE_HEADER, &cells)?)?;
    write_file(
        &dir.join("series.csv"),
        csv_bytes(
            &[
                "model", "lead", "year", "pred_sie", "obs_sie", "pred_sic", "obs_sic",
            ],
            &series_rows,
        )?,
    )?;
    write_json(&dir.join("models.json"), &status)?;
    Ok(status)
}
