//! Autoregressive rollouts: chaining `p`-step forecasts out to the horizon,
//! training with teacher forcing, and persisted forecast runs.

mod train;

use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::backbones::{persistence_forecast, BackboneConfig, LatentForecaster, SdapModel};
use crate::grid::{
    read_archive, write_archive, Climatology, DateRange, GridArchive, SicGrid, Splits,
};
use crate::latent::{Codec, LatentSeries};
use crate::metrics::{EvalSample, MetricReport, ReportBuilder};
use crate::{Error, Result};

pub use train::{train_autoregressive, unroll_batch, EpochStats, TrainReport, UnrollOutput};

pub const RUN_FILE: &str = "run.json";
pub const HORIZON: usize = 180;

/// Probability of feeding the truth at a stage boundary, per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ForcingSchedule {
    /// `start` to `end` in equal steps over `epochs`, then held.
    Linear {
        start: f64,
        end: f64,
        epochs: usize,
    },
    /// `end + (start - end)·rate^epoch`.
    Exponential {
        start: f64,
        end: f64,
        rate: f64,
    },
    Constant {
        ratio: f64,
    },
}

impl Default for ForcingSchedule {
    fn default() -> Self {
        ForcingSchedule::Linear {
            start: 1.0,
            end: 0.0,
            epochs: 10,
        }
    }
}

impl ForcingSchedule {
    pub fn ratio(&self, epoch: usize) -> f64 {
        match *self {
            ForcingSchedule::Linear { start, end, epochs } => {
                if epochs == 0 {
                    end
                } else {
                    start + (end - start) * epoch.min(epochs) as f64 / epochs as f64
                }
            }
            ForcingSchedule::Exponential { start, end, rate } => {
                end + (start - end) * rate.powi(epoch.min(i32::MAX as usize) as i32)
            }
            ForcingSchedule::Constant { ratio } => ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = match *self {
            ForcingSchedule::Linear { start, end, .. } => unit(start) && unit(end) && end <= start,
            ForcingSchedule::Exponential { start, end, rate } => {
                unit(start) && unit(end) && end <= start && rate > 0.0 && rate <= 1.0
            }
            ForcingSchedule::Constant { ratio } => unit(ratio),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "forcing schedule {self:?} must stay in [0, 1] and not increase"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub n: usize,
    pub p: usize,
    pub n_rolls: usize,
    /// Forecast days kept; the last stage is cut to fit.
    pub horizon: usize,
    pub forcing: ForcingSchedule,
    /// Stop gradients at fed-back stage outputs.
    pub truncate_gradients: bool,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n: 15,
            p: 15,
            n_rolls: 12,
            horizon: HORIZON,
            forcing: ForcingSchedule::default(),
            truncate_gradients: true,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    /// One stage of `p` steps, always from observed inputs.
    pub fn single_step(n: usize, p: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            n_rolls: 1,
            horizon: p,
            forcing: ForcingSchedule::Constant { ratio: 1.0 },
            truncate_gradients: true,
            seed,
        }
    }

    /// `n = p = window`, with enough stages to cover the full horizon.
    pub fn windowed(window: usize, seed: u64) -> Self {
        Self {
            n: window,
            p: window,
            n_rolls: HORIZON.div_ceil(window.max(1)),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 || self.p == 0 || self.n_rolls == 0 || self.horizon == 0 {
            return bad("n, p, n_rolls and horizon must be positive".into());
        }
        if self.p * self.n_rolls < self.horizon || self.p * (self.n_rolls - 1) >= self.horizon {
            return bad(format!(
                "{} stages of {} steps do not end within the last stage of a {}-day horizon",
                self.n_rolls, self.p, self.horizon
            ));
        }
        self.forcing.validate()
    }

    /// CRC32 of the JSON encoding together with `extra`.
    pub fn hash_with(&self, extra: &str) -> Result<String> {
        let mut h = crc32fast::Hasher::new();
        h.update(serde_json::to_string(self)?.as_bytes());
        h.update(extra.as_bytes());
        Ok(format!("{:08x}", h.finalize()))
    }
}

/// A model that can be rolled out from an initial date.
#[derive(Clone, Copy)]
pub enum RolloutModel<'a> {
    Latent {
        model: &'a LatentForecaster,
        codec: &'a dyn Codec,
    },
    Persistence,
    Climatology(&'a Climatology),
    Sdap(&'a SdapModel),
    /// The observed future; a perfect-foresight reference.
    Observed,
}

impl RolloutModel<'_> {
    pub fn id(&self) -> String {
        match self {
            RolloutModel::Latent { model, .. } => model.id.clone(),
            RolloutModel::Persistence => "persistence".into(),
            RolloutModel::Climatology(_) => "climatology".into(),
            RolloutModel::Sdap(_) => "sdap".into(),
            RolloutModel::Observed => "observed".into(),
        }
    }

    /// Days of observations needed up to and including the init date.
    pub fn history(&self) -> usize {
        match self {
            RolloutModel::Latent { model, .. } => model.cfg.n,
            _ => 1,
        }
    }
}

/// A rolled-out forecast: one grid per day from `init + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastRun {
    pub model_id: String,
    pub init: NaiveDate,
    /// Latent width; 0 for grid-space models.
    pub dim: usize,
    /// `horizon × dim`, raw latent units.
    pub latents: Vec<f64>,
    pub grids: Vec<SicGrid>,
    pub config_hash: String,
    pub cell_area_km2: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    model_id: String,
    init: NaiveDate,
    horizon: usize,
    dim: usize,
    latents: Vec<f64>,
    config_hash: String,
}

impl ForecastRun {
    pub fn new(
        model_id: String,
        init: NaiveDate,
        dim: usize,
        latents: Vec<f64>,
        grids: Vec<SicGrid>,
        config_hash: String,
        cell_area_km2: f64,
    ) -> Result<Self> {
        let run = Self {
            model_id,
            init,
            dim,
            latents,
            grids,
            config_hash,
            cell_area_km2,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn horizon(&self) -> usize {
        self.grids.len()
    }

    /// Forecast for `lead` days after init (1-based).
    pub fn grid(&self, lead: usize) -> Option<&SicGrid> {
        lead.checked_sub(1).and_then(|i| self.grids.get(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() {
            return Err(Error::InvalidData(format!(
                "{} run at {} is empty",
                self.model_id, self.init
            )));
        }
        for (i, g) in self.grids.iter().enumerate() {
            if g.date != self.init + Days::new(i as u64 + 1) {
                return Err(Error::InvalidData(format!(
                    "{} run at {}: step {} dated {}",
                    self.model_id,
                    self.init,
                    i + 1,
                    g.date
                )));
            }
        }
        if self.latents.len() != self.dim * self.grids.len() {
            return Err(Error::shape(
                &[self.grids.len(), self.dim],
                &[self.latents.len()],
            ));
        }
        Ok(())
    }

    /// Grids in archive layout plus `run.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mask = self.grids[0].mask().clone();
        let archive = GridArchive::new(
            mask,
            self.grids.clone(),
            vec![false; self.grids.len()],
            self.cell_area_km2,
        )?;
        write_archive(&archive, dir)?;
        let m = RunManifest {
            model_id: self.model_id.clone(),
            init: self.init,
            horizon: self.grids.len(),
            dim: self.dim,
            latents: self.latents.clone(),
            config_hash: self.config_hash.clone(),
        };
        let p = dir.join(RUN_FILE);
        std::fs::write(&p, serde_json::to_string(&m)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(RUN_FILE);
        let m: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let archive = read_archive(dir)?;
        if archive.len() != m.horizon {
            return Err(Error::Format(format!(
                "{} grids for horizon {}",
                archive.len(),
                m.horizon
            )));
        }
        Self::new(
            m.model_id,
            m.init,
            m.dim,
            m.latents,
            archive.grids().to_vec(),
            m.config_hash,
            archive.cell_area_km2,
        )
    }
}

/// Chains `rc.n_rolls` calls of the model from a raw `n × dim` window whose
/// first day is `start`. Returns `horizon × dim` raw latents.
pub fn rollout_latents(
    model: &LatentForecaster,
    window: &[f64],
    start: NaiveDate,
    rc: &RolloutConfig,
) -> Result<Vec<f64>> {
    rc.validate()?;
    let (n, p, d) = (rc.n, rc.p, model.dim);
    if model.cfg.n != n || model.cfg.p != p {
        return Err(Error::InvalidConfig(format!(
            "rollout window {n}/{p} does not match model {}/{}",
            model.cfg.n, model.cfg.p
        )));
    }
    let mut w = window.to_vec();
    let mut out = Vec::with_capacity(rc.n_rolls * p * d);
    for k in 0..rc.n_rolls {
        let y = model.forecast(&w, start + Days::new((k * p) as u64))?;
        out.extend_from_slice(&y);
        if p >= n {
            w = y[(p - n) * d..].to_vec();
        } else {
            w.drain(..p * d);
            w.extend_from_slice(&y);
        }
    }
    out.truncate(rc.horizon * d);
    Ok(out)
}

fn history(archive: &GridArchive, init: NaiveDate, days: usize) -> Result<&[SicGrid]> {
    let first = init - Days::new(days as u64 - 1);
    let missing = || Error::InsufficientHistory(format!("{days} observed days ending {init}"));
    let range = DateRange::new(first, init)?;
    let grids = archive.days_in(range).map_err(|_| missing())?;
    if grids.len() != days {
        return Err(missing());
    }
    Ok(grids)
}

/// Rolls `model` forward `rc.horizon` days from `init`. Learned models
/// encode the observed window, chain forecasts and decode; grid-space
/// baselines apply their own definitions lead by lead.
pub fn rollout(
    model: RolloutModel,
    archive: &GridArchive,
    init: NaiveDate,
    rc: &RolloutConfig,
) -> Result<ForecastRun> {
    rc.validate()?;
    let h = rc.horizon;
    let hist = history(archive, init, model.history())?;
    let obs = &hist[hist.len() - 1];
    let dates: Vec<NaiveDate> = (1..=h).map(|l| init + Days::new(l as u64)).collect();
    let (dim, latents, grids, extra) = match model {
        RolloutModel::Latent { model, codec } => {
            let refs: Vec<&SicGrid> = hist.iter().collect();
            let window: Vec<f64> = codec.encode_many(&refs)?.into_iter().flatten().collect();
            let z = rollout_latents(model, &window, hist[0].date, rc)?;
            let d = model.dim;
            let zs: Vec<&[f64]> = z.chunks(d).collect();
            let grids = codec.decode_many(&zs, &dates)?;
            let extra =
                serde_json::to_string(&(model.id.as_str(), &model.cfg, &model.compressor_id))?;
            (d, z, grids, extra)
        }
        RolloutModel::Persistence => (
            0,
            Vec::new(),
            (1..=h)
                .map(|l| persistence_forecast(obs, l as u32))
                .collect(),
            String::new(),
        ),
        RolloutModel::Climatology(c) => (
            0,
            Vec::new(),
            dates.iter().map(|d| c.grid(*d)).collect::<Result<_>>()?,
            String::new(),
        ),
        RolloutModel::Sdap(m) => {
            if m.max_lead() < h {
                return Err(Error::InvalidConfig(format!(
                    "sdap fitted to lead {} < horizon {h}",
                    m.max_lead()
                )));
            }
            (
                0,
                Vec::new(),
                (1..=h)
                    .map(|l| m.forecast(obs, l as u32))
                    .collect::<Result<_>>()?,
                String::new(),
            )
        }
        RolloutModel::Observed => {
            let future = archive
                .days_in(DateRange::new(dates[0], dates[h - 1])?)
                .map_err(|_| {
                    Error::InsufficientHistory(format!("observations to {}", dates[h - 1]))
                })?;
            if future.len() != h {
                return Err(Error::InsufficientHistory(format!(
                    "observations to {}",
                    dates[h - 1]
                )));
            }
            (0, Vec::new(), future.to_vec(), String::new())
        }
    };
    let id = model.id();
    let hash = rc.hash_with(&format!("{id}{extra}"))?;
    ForecastRun::new(id, init, dim, latents, grids, hash, archive.cell_area_km2)
}

/// Every run's lead-by-lead scores against the archive. Targets missing
/// from the archive are skipped.
pub fn evaluate_runs(
    runs: &[ForecastRun],
    archive: &GridArchive,
    clim: &Climatology,
    with_ssim: bool,
) -> Result<MetricReport> {
    let mut b = ReportBuilder::new(archive.mask().clone());
    if !with_ssim {
        b = b.without_ssim();
    }
    for run in runs {
        for (i, g) in run.grids.iter().enumerate() {
            let Some(truth) = archive.get(g.date) else {
                continue;
            };
            b.add(&EvalSample {
                lead: i as u32 + 1,
                target: g.date,
                pred: g.values(),
                truth: truth.values(),
                clim: Some(clim.field(g.date)?),
            })?;
        }
    }
    Ok(b.finish())
}

/// Mean ACC over each block of 30 leads, in lead order.
pub fn lead_month_acc(report: &MetricReport) -> Vec<f64> {
    let mut out = Vec::new();
    for m in 0..HORIZON / 30 {
        let vals: Vec<f64> = (m * 30 + 1..=(m + 1) * 30)
            .filter_map(|l| report.lead(l as u32, "acc").value())
            .collect();
        if !vals.is_empty() {
            out.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

/// Population variance of consecutive lead-month ACC changes.
pub fn month_to_month_variance(report: &MetricReport) -> f64 {
    let m = lead_month_acc(report);
    let diffs: Vec<f64> = m.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.is_empty() {
        return 0.0;
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / diffs.len() as f64
}

/// Scores of the same backbone trained and rolled out with 7-day and
/// 15-day windows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowComparison {
    pub short_window: usize,
    pub long_window: usize,
    pub short: MetricReport,
    pub long: MetricReport,
    pub short_runs: Vec<ForecastRun>,
    pub long_runs: Vec<ForecastRun>,
}

impl WindowComparison {
    /// `lead,short_acc,long_acc` rows for leads 1..=180.
    pub fn write_curves<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "lead".to_string(),
            format!("acc_window_{}", self.short_window),
            format!("acc_window_{}", self.long_window),
        ])?;
        for lead in 1..=HORIZON as u32 {
            let f = |r: &MetricReport| {
                r.lead(lead, "acc")
                    .value()
                    .map(|v| format!("{v:.10}"))
                    .unwrap_or_default()
            };
            wtr.write_record([lead.to_string(), f(&self.short), f(&self.long)])?;
        }
        wtr.flush().map_err(|e| Error::io("csv", e))?;
        Ok(())
    }

    /// Whether the long window's month-to-month ACC variance is no larger.
    pub fn long_is_steadier(&self) -> bool {
        month_to_month_variance(&self.long) <= month_to_month_variance(&self.short)
    }
}

/// Trains `base` with `n = p = 7` (26 stages, cut to 180 days) and
/// `n = p = 15` (12 stages), rolls both out from `inits` and scores them.
#[allow(clippy::too_many_arguments)]
pub fn compare_rolling_windows(
    series: &LatentSeries,
    codec: &dyn Codec,
    archive: &GridArchive,
    clim: &Climatology,
    splits: &Splits,
    base: &BackboneConfig,
    forcing: &ForcingSchedule,
    inits: &[NaiveDate],
) -> Result<WindowComparison> {
    let mut reports = Vec::new();
    let mut all_runs = Vec::new();
    for w in [7, 15] {
        let cfg = BackboneConfig {
            n: w,
            p: w,
            ..base.clone()
        };
        let rc = RolloutConfig {
            forcing: forcing.clone(),
            ..RolloutConfig::windowed(w, base.seed)
        };
        let model = LatentForecaster::init(series, splits.train, &cfg)?
            .with_id(format!("{}-w{w}", cfg.kind));
        let model = train_autoregressive(model, series, splits.train, splits.val, &rc)?;
        let runs = inits
            .iter()
            .map(|d| {
                rollout(
                    RolloutModel::Latent {
                        model: &model,
                        codec,
                    },
                    archive,
                    *d,
                    &rc,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push(evaluate_runs(&runs, archive, clim, false)?);
        all_runs.push(runs);
    }
    let long = reports.pop().expect("two reports");
    let short = reports.pop().expect("two reports");
    let long_runs = all_runs.pop().expect("two run sets");
    let short_runs = all_runs.pop().expect("two run sets");
    Ok(WindowComparison {
        short_window: 7,
        long_window: 15,
        short,
        long,
        short_runs,
        long_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::backbones::{BackboneConfig, BackboneKind};
    use crate::grid::{synth_archive, SynthConfig};
    use crate::latent::Compressor;
    use crate::testutil::{range, series};

    fn bits(g: &SicGrid) -> Vec<u32> {
        g.values().iter().map(|v| v.to_bits()).collect()
    }

    fn same_grids(a: &[SicGrid], b: &[SicGrid]) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| x.date == y.date && bits(x) == bits(y))
    }

    struct Fixture {
        archive: GridArchive,
        codec: Compressor,
        model: LatentForecaster,
    }

    fn fixture(window: usize) -> Fixture {
        let cfg = SynthConfig {
            rows: 12,
            cols: 10,
            n_days: 900,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            ..SynthConfig::default()
        };
        let archive = synth_archive(&cfg).unwrap();
        let train = DateRange::new(cfg.start, cfg.start + Days::new(599)).unwrap();
        let val = DateRange::new(cfg.start + Days::new(600), cfg.start + Days::new(899)).unwrap();
        let codec = Compressor::fit_eof(&archive, train, 4).unwrap();
        let all = DateRange::new(cfg.start, cfg.start + Days::new(899)).unwrap();
        let s = LatentSeries::encode(&codec, "eof", &archive, all, train).unwrap();
        let bc = BackboneConfig {
            n: window,
            p: window,
            max_epochs: 2,
            sample_stride: 5,
            ..BackboneConfig::new(BackboneKind::DLinear)
        };
        let model = LatentForecaster::fit(&s, train, val, &bc).unwrap();
        Fixture {
            archive,
            codec,
            model,
        }
    }

    #[test]
    fn chained_rollout_covers_the_horizon() {
        let f = fixture(15);
        let init = NaiveDate::from_ymd_opt(2001, 3, 1).unwrap();
        let rc = RolloutConfig::default();
        let run = rollout(
            RolloutModel::Latent {
                model: &f.model,
                codec: &f.codec,
            },
            &f.archive,
            init,
            &rc,
        )
        .unwrap();
        assert_eq!(run.horizon(), 180);
        assert_eq!(run.latents.len(), 180 * 4);
        assert_eq!(run.grids[0].date, init + Days::new(1));
        assert_eq!(run.grids[179].date, init + Days::new(180));
        for g in &run.grids {
            assert!(g.ocean_values().all(|v| (0.0..=1.0).contains(&v)));
        }

        // The first stage is the single-shot forecast, bit for bit.
        let hist: Vec<&SicGrid> = f
            .archive
            .days_in(DateRange::new(init - Days::new(14), init).unwrap())
            .unwrap()
            .iter()
            .collect();
        let window: Vec<f64> = f.codec.encode_many(&hist).unwrap().concat();
        let single = f.model.forecast(&window, hist[0].date).unwrap();
        assert_eq!(&run.latents[..15 * 4], &single[..]);
        let zs: Vec<&[f64]> = single.chunks(4).collect();
        let dates: Vec<NaiveDate> = (1..=15).map(|l| init + Days::new(l)).collect();
        let grids = f.codec.decode_many(&zs, &dates).unwrap();
        assert!(same_grids(&run.grids[..15], &grids));

        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        let back = ForecastRun::load(dir.path()).unwrap();
        assert_eq!(back.latents, run.latents);
        assert_eq!(
            (back.init, back.dim, &back.config_hash),
            (run.init, run.dim, &run.config_hash)
        );
        assert!(same_grids(&back.grids, &run.grids));
    }

    #[test]
    fn seven_day_windows_are_cut_to_the_horizon() {
        let f = fixture(7);
        let rc = RolloutConfig::windowed(7, 0);
        let window: Vec<f64> = f
            .model
            .norm
            .mean
            .iter()
            .cycle()
            .take(7 * 4)
            .copied()
            .collect();
        let z = rollout_latents(
            &f.model,
            &window,
            NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
            &rc,
        )
        .unwrap();
        assert_eq!(rc.n_rolls * rc.p, 182);
        assert_eq!(z.len(), 180 * 4);
    }

    #[test]
    fn persistence_rollout_is_constant() {
        let f = fixture(15);
        let init = NaiveDate::from_ymd_opt(2001, 6, 1).unwrap();
        let run = rollout(
            RolloutModel::Persistence,
            &f.archive,
            init,
            &RolloutConfig::default(),
        )
        .unwrap();
        let obs = f.archive.get(init).unwrap();
        assert_eq!(run.horizon(), 180);
        for (l, g) in run.grids.iter().enumerate() {
            assert_eq!(bits(g), bits(obs));
            assert_eq!(g.date, init + Days::new(l as u64 + 1));
        }
    }

    fn ar_series() -> LatentSeries {
        series(2, 400, |t, c| {
            (t as f64 * 0.21 + c as f64).sin() + 0.1 * (t as f64 * 1.7).cos()
        })
    }

    fn model_for(s: &LatentSeries, n: usize, p: usize) -> LatentForecaster {
        let bc = BackboneConfig {
            n,
            p,
            instance_norm: false,
            ..BackboneConfig::new(BackboneKind::DLinear)
        };
        LatentForecaster::init(s, range(0, 399), &bc).unwrap()
    }

    #[test]
    fn full_forcing_sums_single_stage_gradients() {
        let s = ar_series();
        let m = model_for(&s, 15, 15);
        let rc = RolloutConfig::default();
        let starts = [3usize, 40, 77];
        let forced = vec![vec![true; 3]; 11];
        let full = unroll_batch(&m, &s, &starts, &rc, &forced, true).unwrap();
        let one = RolloutConfig::single_step(15, 15, 0);
        let mut loss = 0.0;
        let mut grads: Vec<Vec<f64>> = full.grads.iter().map(|g| vec![0.0; g.len()]).collect();
        for k in 0..12 {
            let shifted: Vec<usize> = starts.iter().map(|i| i + 15 * k).collect();
            let st = unroll_batch(&m, &s, &shifted, &one, &[], true).unwrap();
            assert_eq!(st.inputs[0], full.inputs[k]);
            loss += st.loss * 15.0 / 180.0;
            for (acc, g) in grads.iter_mut().zip(&st.grads) {
                acc.iter_mut()
                    .zip(g)
                    .for_each(|(a, v)| *a += v * 15.0 / 180.0);
            }
        }
        assert!((loss - full.loss).abs() < 1e-12);
        for (a, b) in grads.iter().flatten().zip(full.grads.iter().flatten()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn free_running_feeds_outputs_forward() {
        let s = ar_series();
        let none = |k| vec![vec![false; 2]; k];
        let m = model_for(&s, 15, 15);
        let out = unroll_batch(
            &m,
            &s,
            &[0, 20],
            &RolloutConfig::default(),
            &none(11),
            false,
        )
        .unwrap();
        for k in 1..12 {
            assert_eq!(out.inputs[k], out.outputs[k - 1]);
        }
        // Shorter outputs than inputs: the window slides by p.
        let m = model_for(&s, 15, 5);
        let rc = RolloutConfig {
            n: 15,
            p: 5,
            n_rolls: 36,
            ..RolloutConfig::default()
        };
        let out = unroll_batch(&m, &s, &[0, 20], &rc, &none(35), false).unwrap();
        for k in 1..36 {
            for r in 0..4 {
                let prev = &out.inputs[k - 1][r * 15..(r + 1) * 15];
                let cur = &out.inputs[k][r * 15..(r + 1) * 15];
                assert_eq!(&cur[..10], &prev[5..]);
                assert_eq!(&cur[10..], &out.outputs[k - 1][r * 5..(r + 1) * 5]);
            }
        }
    }

    #[test]
    fn linear_schedule_is_exact() {
        let s = ForcingSchedule::Linear {
            start: 1.0,
            end: 0.0,
            epochs: 10,
        };
        assert_eq!(s.ratio(0), 1.0);
        assert_eq!(s.ratio(5), 0.5);
        assert_eq!(s.ratio(10), 0.0);
        assert_eq!(s.ratio(25), 0.0);
        let r: Vec<f64> = (0..12).map(|e| s.ratio(e)).collect();
        assert!(r.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn exponential_schedule_decays_to_end() {
        let s = ForcingSchedule::Exponential {
            start: 1.0,
            end: 0.2,
            rate: 0.5,
        };
        assert_eq!(s.ratio(0), 1.0);
        assert!((s.ratio(1) - 0.6).abs() < 1e-15);
        assert!((s.ratio(60) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(ForcingSchedule::Constant { ratio: 1.5 }.validate().is_err());
        let rising = ForcingSchedule::Linear {
            start: 0.2,
            end: 0.8,
            epochs: 3,
        };
        assert!(rising.validate().is_err());
    }

    #[test]
    fn stage_counts() {
        let rc = RolloutConfig::default();
        assert_eq!(rc.p * rc.n_rolls, 180);
        rc.validate().unwrap();
        let seven = RolloutConfig::windowed(7, 0);
        assert_eq!(seven.n_rolls, 26);
        seven.validate().unwrap();
        let too_many = RolloutConfig {
            n_rolls: 13,
            ..RolloutConfig::default()
        };
        assert!(too_many.validate().is_err());
        let too_few = RolloutConfig {
            n_rolls: 11,
            ..RolloutConfig::default()
        };
        assert!(too_few.validate().is_err());
    }

    #[test]
    fn month_variance_of_flat_curve_is_zero() {
        let mut r = MetricReport {
            per_metric: Default::default(),
            per_lead: Default::default(),
            per_month: Default::default(),
            n_samples: 0,
            acc_skipped: 0,
        };
        for l in 1..=180u32 {
            let mut m = std::collections::BTreeMap::new();
            m.insert(
                "acc".to_string(),
                crate::metrics::Score::Value(0.5 - 0.001 * l as f64),
            );
            r.per_lead.insert(l, m);
        }
        // A straight line has equal month-to-month steps.
        assert!(month_to_month_variance(&r) < 1e-20);
        assert_eq!(lead_month_acc(&r).len(), 6);
    }
}
