//! September-minimum extent case study.

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{
    csv_bytes, last_full_september, september, write_file, write_json, Bench, BenchConfig,
    ModelStatus, SKIPPED,
};
use crate::grid::{sea_ice_extent, write_archive, GridArchive, SicGrid, SIE_THRESHOLD};
use crate::{Error, Result};

/// Date and value (10⁶ km²) of the smallest daily extent; the earliest day
/// wins ties.
pub fn september_minimum<'a>(
    grids: impl IntoIterator<Item = &'a SicGrid>,
    cell_area_km2: f64,
) -> Option<(NaiveDate, f64)> {
    let mut best: Option<(NaiveDate, f64)> = None;
    for g in grids {
        let v = sea_ice_extent(g, SIE_THRESHOLD, cell_area_km2) / 1e6;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((g.date, v));
        }
    }
    best
}

/// `pred − truth` mapped from `[-1, 1]` to `[0, 1]` as `(r + 1) / 2`, so it
/// fits the archive format.
pub fn residual_grid(pred: &SicGrid, truth: &SicGrid) -> Result<SicGrid> {
    if pred.mask() != truth.mask() {
        return Err(Error::InvalidData(
            "residual of grids with different masks".into(),
        ));
    }
    let vals = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| (f64::from(*p) - f64::from(*t) + 1.0) / 2.0);
    Ok(SicGrid::from_clipped(
        truth.date,
        vals,
        truth.mask().clone(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremeRecord {
    pub model: String,
    pub year: i32,
    pub init: NaiveDate,
    pub obs_min_date: NaiveDate,
    pub obs_min_sie: f64,
    pub pred_min_date: NaiveDate,
    pub pred_min_sie: f64,
    /// Predicted minus observed date.
    pub timing_error_days: i64,
    pub sie_error: f64,
}

/// Rolls each model from `extreme_init_lead` days before September 1 of
/// the case year, compares September minima and writes the residual on the
/// observed minimum day under `extremes/<model>/residual`.
pub fn cmd_extremes(cfg: &BenchConfig) -> Result<Vec<ExtremeRecord>> {
    let b = Bench::open(cfg.clone())?;
    let year = match cfg.eval.extreme_year {
        Some(y) => y,
        None => last_full_september(cfg.splits.test).ok_or_else(|| {
            Error::EmptyRange(format!("no complete September in {}", cfg.splits.test))
        })?,
    };
    let (sep1, sep30) =
        september(year).ok_or_else(|| Error::InvalidConfig(format!("bad year {year}")))?;
    let obs: Vec<&SicGrid> = sep1
        .iter_days()
        .take_while(|d| *d <= sep30)
        .map(|d| {
            b.archive
                .get(d)
                .ok_or_else(|| Error::InvalidData(format!("no observation on {d}")))
        })
        .collect::<Result<_>>()?;
    let (obs_date, obs_min) =
        september_minimum(obs.iter().copied(), b.archive.cell_area_km2).expect("30 days");
    let init = sep1 - Days::new(u64::from(cfg.eval.extreme_init_lead));
    let dir = b.layout.extremes();
    let mut records = Vec::new();
    let mut status = Vec::new();
    for slot in b.all_models()? {
        let result = slot
            .handle
            .map_err(Error::InvalidData)
            .and_then(|h| h.rollout(&b.archive, init, &cfg.rollout))
            .and_then(|run| {
                let sept: Vec<&SicGrid> = run
                    .grids
                    .iter()
                    .filter(|g| g.date >= sep1 && g.date <= sep30)
                    .collect();
                if sept.len() != 30 {
                    return Err(Error::InvalidConfig(format!(
                        "run from {init} covers {} September days",
                        sept.len()
                    )));
                }
                let (pd, pv) =
                    september_minimum(sept.iter().copied(), run.cell_area_km2).expect("30 days");
                let on_obs_min = sept
                    .iter()
                    .find(|g| g.date == obs_date)
                    .expect("inside September");
                Ok((
                    pd,
                    pv,
                    residual_grid(on_obs_min, b.archive.get(obs_date).expect("observed"))?,
                ))
            });
        match result {
            Ok((pd, pv, resid)) => {
                let a = GridArchive::new(
                    resid.mask().clone(),
                    vec![resid],
                    vec![false],
                    b.archive.cell_area_km2,
                )?;
                write_archive(&a, dir.join(&slot.id).join("residual"))?;
                records.push(ExtremeRecord {
                    model: slot.id.clone(),
                    year,
                    init,
                    obs_min_date: obs_date,
                    obs_min_sie: obs_min,
                    pred_min_date: pd,
                    pred_min_sie: pv,
                    timing_error_days: (pd - obs_date).num_days(),
                    sie_error: pv - obs_min,
                });
                status.push(ModelStatus {
                    model: slot.id,
                    status: "ok".into(),
                    reason: String::new(),
                });
            }
            Err(e @ Error::Io { .. }) => return Err(e),
            Err(e) => {
                log::warn!("skipping {} in extremes: {e}", slot.id);
                status.push(ModelStatus {
                    model: slot.id,
                    status: SKIPPED.into(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.year.to_string(),
                r.init.to_string(),
                r.obs_min_date.to_string(),
                r.obs_min_sie.to_string(),
                r.pred_min_date.to_string(),
                r.pred_min_sie.to_string(),
                r.timing_error_days.to_string(),
                r.sie_error.to_string(),
            ]
        })
        .collect();
    write_file(
        &dir.join("table.csv"),
        csv_bytes(
            &[
                "model",
                "year",
                "init",
                "obs_min_date",
                "obs_min_sie",
                "pred_min_date",
                "pred_min_sie",
                "timing_error_days",
                "sie_error",
            ],
            &rows,
        )?,
    )?;
    write_json(&dir.join("models.json"), &status)?;
    Ok(records)
}
