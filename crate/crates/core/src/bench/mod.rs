//! End-to-end evaluation harness: configuration, on-disk layout, model
//! loading and the pipeline steps behind each command.
//!
//! Every step reads its inputs from and writes its outputs to a fixed
//! layout under the output directory, so steps can run separately and
//! reruns with the same configuration reproduce their files byte for byte.

mod extremes;
mod report;
mod s2s;
mod sio;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, Days, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbones::{BackboneConfig, BackboneKind, LatentForecaster, SdapModel};
use crate::ensemble::{
    apply_ensemble, fit_weights, rank_members, EnsembleSpec, FitOptions, MemberScore, Tier,
};
use crate::grid::{
    compute_climatology, read_archive, synth_archive, write_archive, Climatology, DateRange,
    GridArchive, Splits, SynthConfig,
};
use crate::latent::{AeConfig, Codec, Compressor, CompressorKind, LatentSeries};
use crate::rollout::{
    compare_rolling_windows, evaluate_runs, rollout, train_autoregressive, ForcingSchedule,
    ForecastRun, RolloutConfig, RolloutModel,
};
use crate::{Error, Result};

pub use extremes::{cmd_extremes, residual_grid, september_minimum, ExtremeRecord};
pub use report::{cmd_report, ReportSummary, SKIPPED};
pub use s2s::{
    cmd_eval_s2s, evaluate_model, monthly_mean_report, BlockScores, ModelEval, MONTH_BLOCK,
};
pub use sio::{
    cmd_eval_sio, september_mean_sie, september_years, sio_series, summary_rows, SioRow, SioSeries,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressorConfig {
    pub kind: CompressorKind,
    /// EOF modes kept; the autoencoder takes its width from `ae`.
    pub latent_dim: usize,
    pub ae: AeConfig,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            kind: CompressorKind::Eof,
            latent_dim: 32,
            ae: AeConfig::default(),
        }
    }
}

/// How backbones are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Training {
    /// Single `p`-step windows from observed inputs.
    Windowed,
    /// Full `n_rolls` unrolls with teacher forcing.
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Each lead `L` gives a block pooling leads `1..=L`.
    pub leads: Vec<u32>,
    /// Number of 30-day monthly-mean fields in the monthly block.
    pub months: usize,
    pub sio_leads: Vec<u32>,
    /// Days between test-period init dates.
    pub init_stride: usize,
    pub with_ssim: bool,
    /// Year of the September-minimum case; the last complete test year if unset.
    pub extreme_year: Option<i32>,
    /// The extreme-event forecast starts this many days before September 1.
    pub extreme_init_lead: u32,
    /// Optional `model,lead,year,sie` CSV of outside predictions (10⁶ km²)
    /// scored next to the September rows.
    pub sio_reference: Option<PathBuf>,
    /// Also train the 7- and 15-day rolling windows of the first backbone
    /// and write their ACC curves.
    pub rolling_windows: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            leads: vec![7, 15, 30, 180],
            months: 6,
            sio_leads: vec![30, 60, 90, 120],
            init_stride: 15,
            with_ssim: true,
            extreme_year: None,
            extreme_init_lead: 30,
            sio_reference: None,
            rolling_windows: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub tiers: Vec<Tier>,
    /// Days between validation init dates used for ranking and fitting.
    pub init_stride: usize,
    pub fit: FitOptions,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            tiers: Tier::ALL.to_vec(),
            init_stride: 15,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Archive directory; `<output>/archive` when unset.
    pub archive: Option<PathBuf>,
    pub synth: SynthConfig,
    pub splits: Splits,
    pub compressor: CompressorConfig,
    pub backbones: Vec<BackboneConfig>,
    pub training: Training,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub ensemble: EnsembleConfig,
    pub output: PathBuf,
    /// Copied into every component seed by [`BenchConfig::resolve`].
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            archive: None,
            synth: SynthConfig::standard(0),
            splits: Splits::by_years(2000, 14, 3, 3).expect("valid default splits"),
            compressor: CompressorConfig::default(),
            backbones: BackboneKind::ALL
                .iter()
                .map(|k| BackboneConfig::new(*k))
                .collect(),
            training: Training::Windowed,
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
            ensemble: EnsembleConfig::default(),
            output: PathBuf::from("out"),
            seed: 0,
        }
    }
}

/// Sets `key` (dot-separated, array elements by index) in `root` to `raw`,
/// read as JSON when it parses and as a string otherwise. The key must
/// already exist so typos are reported.
pub fn set_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let bad = || Error::InvalidConfig(format!("unknown config key '{key}'"));
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part).ok_or_else(bad)?,
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| bad())?;
                items.get_mut(i).ok_or_else(bad)?
            }
            _ => return Err(bad()),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl BenchConfig {
    /// Reads `path` (defaults when `None`), applies `key=value` overrides,
    /// resolves seeds and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base: BenchConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => BenchConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override '{o}' is not key=value")))?;
            set_override(&mut value, k.trim(), v.trim())?;
        }
        let cfg: BenchConfig =
            serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let cfg = cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve(mut self) -> Self {
        let s = self.seed;
        self.synth.seed = s;
        self.compressor.ae.seed = s;
        self.rollout.seed = s;
        for b in &mut self.backbones {
            b.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.splits.validate()?;
        self.rollout.validate()?;
        let h = self.rollout.horizon as u32;
        if self.eval.leads.is_empty() || self.eval.leads.iter().any(|l| *l == 0 || *l > h) {
            return bad(format!(
                "evaluation leads {:?} must lie in 1..={h}",
                self.eval.leads
            ));
        }
        if self.eval.sio_leads.iter().any(|l| *l == 0 || l + 29 > h) {
            return bad(format!(
                "September leads {:?} must cover September within {h} days",
                self.eval.sio_leads
            ));
        }
        if self.eval.extreme_init_lead == 0 || self.eval.extreme_init_lead + 29 > h {
            return bad(format!(
                "extreme_init_lead {} must lie in 1..={}",
                self.eval.extreme_init_lead,
                h - 29
            ));
        }
        if self.eval.months == 0 || self.eval.months * 30 > self.rollout.horizon {
            return bad(format!(
                "{} monthly means do not fit in {h} days",
                self.eval.months
            ));
        }
        if self.eval.init_stride == 0 || self.ensemble.init_stride == 0 {
            return bad("init strides must be positive".into());
        }
        let mut ids: Vec<&str> = self.backbones.iter().map(|b| b.kind.name()).collect();
        ids.sort();
        let n = ids.len();
        ids.dedup();
        if ids.len() != n {
            return bad("each backbone kind may appear once".into());
        }
        for b in &self.backbones {
            b.validate()?;
            if b.n != self.rollout.n || b.p != self.rollout.p {
                return bad(format!(
                    "{} window {}/{} differs from rollout {}/{}",
                    b.kind, b.n, b.p, self.rollout.n, self.rollout.p
                ));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output.clone(),
            archive: self.archive.clone(),
        }
    }
}

/// Paths of every artefact under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
    archive: Option<PathBuf>,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            archive: None,
        }
    }

    pub fn archive(&self) -> PathBuf {
        self.archive
            .clone()
            .unwrap_or_else(|| self.root.join("archive"))
    }
    pub fn compressor(&self) -> PathBuf {
        self.root.join("compressor")
    }
    pub fn latents(&self) -> PathBuf {
        self.root.join("latents")
    }
    pub fn model(&self, id: &str) -> PathBuf {
        self.root.join("models").join(id)
    }
    pub fn ensembles(&self) -> PathBuf {
        self.root.join("ensembles")
    }
    pub fn ensemble(&self, tier: Tier) -> PathBuf {
        self.ensembles().join(format!("{}.json", tier.name()))
    }
    pub fn run(&self, model: &str, init: NaiveDate) -> PathBuf {
        self.root.join("runs").join(model).join(init.to_string())
    }
    pub fn s2s(&self) -> PathBuf {
        self.root.join("s2s")
    }
    pub fn sio(&self) -> PathBuf {
        self.root.join("sio")
    }
    pub fn extremes(&self) -> PathBuf {
        self.root.join("extremes")
    }
    pub fn windows(&self) -> PathBuf {
        self.root.join("windows")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

pub(crate) fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub(crate) fn write_file(p: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    std::fs::write(p, bytes).map_err(|e| Error::io(p, e))
}

pub(crate) fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_file(p, s)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> Result<T> {
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidData(e.to_string()))
}

/// A model ready to roll out.
pub enum ModelHandle {
    Persistence,
    Climatology(Arc<Climatology>),
    Sdap(Arc<SdapModel>),
    /// The observed future.
    Observed,
    Latent {
        model: Box<LatentForecaster>,
        codec: Arc<Compressor>,
    },
    Ensemble {
        spec: EnsembleSpec,
        members: Vec<ModelHandle>,
    },
}

impl ModelHandle {
    pub fn id(&self) -> String {
        match self {
            ModelHandle::Persistence => "persistence".into(),
            ModelHandle::Climatology(_) => "climatology".into(),
            ModelHandle::Sdap(_) => "sdap".into(),
            ModelHandle::Observed => "observed".into(),
            ModelHandle::Latent { model, .. } => model.id.clone(),
            ModelHandle::Ensemble { spec, .. } => spec.id.clone(),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, ModelHandle::Latent { .. })
    }

    pub fn rollout(
        &self,
        archive: &GridArchive,
        init: NaiveDate,
        rc: &RolloutConfig,
    ) -> Result<ForecastRun> {
        let m = match self {
            ModelHandle::Persistence => RolloutModel::Persistence,
            ModelHandle::Climatology(c) => RolloutModel::Climatology(c),
            ModelHandle::Sdap(s) => RolloutModel::Sdap(s),
            ModelHandle::Observed => RolloutModel::Observed,
            ModelHandle::Latent { model, codec } => RolloutModel::Latent {
                model,
                codec: codec.as_ref() as &dyn Codec,
            },
            ModelHandle::Ensemble { spec, members } => {
                let runs = members
                    .iter()
                    .map(|m| m.rollout(archive, init, rc))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&ForecastRun> = runs.iter().collect();
                return apply_ensemble(spec, &refs);
            }
        };
        rollout(m, archive, init, rc)
    }

    /// Runs from every init date, in order.
    pub fn rollouts(
        &self,
        archive: &GridArchive,
        inits: &[NaiveDate],
        rc: &RolloutConfig,
    ) -> Result<Vec<ForecastRun>> {
        inits
            .par_iter()
            .map(|d| self.rollout(archive, *d, rc))
            .collect()
    }
}

/// A model slot in an evaluation: loaded, or skipped with a reason.
pub struct ModelSlot {
    pub id: String,
    pub handle: std::result::Result<ModelHandle, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStatus {
    pub model: String,
    pub status: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub reason: String,
}

/// Init dates from `range.start` every `stride` days whose whole horizon
/// stays inside `range`.
pub fn init_dates(range: DateRange, horizon: usize, stride: usize) -> Vec<NaiveDate> {
    let mut out = Vec::new();
    let mut d = range.start;
    while d + Days::new(horizon as u64) <= range.end {
        out.push(d);
        d = d + Days::new(stride as u64);
    }
    out
}

/// Loaded archive and climatology for one configuration.
pub struct Bench {
    pub cfg: BenchConfig,
    pub layout: Layout,
    pub archive: GridArchive,
    pub clim: Arc<Climatology>,
}

impl Bench {
    pub fn open(cfg: BenchConfig) -> Result<Self> {
        let layout = cfg.layout();
        let archive = read_archive(layout.archive())?.with_splits(cfg.splits)?;
        let clim = Arc::new(compute_climatology(&archive, cfg.splits.train)?);
        Ok(Self {
            cfg,
            layout,
            archive,
            clim,
        })
    }

    pub fn full_range(&self) -> Result<DateRange> {
        let (Some(a), Some(b)) = (self.archive.first_date(), self.archive.last_date()) else {
            return Err(Error::EmptyRange("archive is empty".into()));
        };
        DateRange::new(a, b)
    }

    pub fn compressor(&self) -> Result<Arc<Compressor>> {
        Ok(Arc::new(Compressor::load(self.layout.compressor())?))
    }

    pub fn series(&self) -> Result<LatentSeries> {
        LatentSeries::load(self.layout.latents())
    }

    pub fn baselines(&self) -> Result<Vec<ModelHandle>> {
        let sdap = SdapModel::fit(
            &self.archive,
            self.cfg.splits.train,
            self.clim.clone(),
            self.cfg.rollout.horizon,
        )?;
        Ok(vec![
            ModelHandle::Persistence,
            ModelHandle::Climatology(self.clim.clone()),
            ModelHandle::Sdap(Arc::new(sdap)),
        ])
    }

    /// Trained backbones named by the configuration, in configuration order.
    pub fn learned(&self) -> Vec<ModelSlot> {
        let codec = self.compressor();
        self.cfg
            .backbones
            .iter()
            .map(|b| {
                let id = b.kind.name().to_string();
                let handle = match &codec {
                    Err(e) => Err(format!("compressor unavailable: {e}")),
                    Ok(c) => LatentForecaster::load(self.layout.model(&id))
                        .map(|m| ModelHandle::Latent {
                            model: Box::new(m),
                            codec: c.clone(),
                        })
                        .map_err(|e| format!("checkpoint unavailable: {e}")),
                };
                ModelSlot { id, handle }
            })
            .collect()
    }

    pub fn ensembles(&self) -> Vec<ModelSlot> {
        self.cfg
            .ensemble
            .tiers
            .iter()
            .map(|t| {
                let id = format!("ensemble-{}", t.name());
                let handle = self
                    .load_ensemble(*t)
                    .map_err(|e| format!("ensemble unavailable: {e}"));
                ModelSlot { id, handle }
            })
            .collect()
    }

    fn load_ensemble(&self, tier: Tier) -> Result<ModelHandle> {
        let spec: EnsembleSpec = read_json(&self.layout.ensemble(tier))?;
        spec.validate()?;
        let mut learned = self.learned();
        let members = spec
            .members
            .iter()
            .map(|id| {
                let i = learned.iter().position(|s| s.id == *id).ok_or_else(|| {
                    Error::InvalidData(format!("member {id} is not a configured backbone"))
                })?;
                learned.swap_remove(i).handle.map_err(Error::InvalidData)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelHandle::Ensemble { spec, members })
    }

    /// Every model in evaluation order: baselines, backbones, ensembles.
    pub fn all_models(&self) -> Result<Vec<ModelSlot>> {
        let mut slots: Vec<ModelSlot> = self
            .baselines()?
            .into_iter()
            .map(|h| ModelSlot {
                id: h.id(),
                handle: Ok(h),
            })
            .collect();
        slots.extend(self.learned());
        slots.extend(self.ensembles());
        Ok(slots)
    }

    pub fn test_inits(&self) -> Vec<NaiveDate> {
        init_dates(
            self.cfg.splits.test,
            self.cfg.rollout.horizon,
            self.cfg.eval.init_stride,
        )
    }

    pub fn val_inits(&self) -> Vec<NaiveDate> {
        init_dates(
            self.cfg.splits.val,
            self.cfg.rollout.horizon,
            self.cfg.ensemble.init_stride,
        )
    }
}

pub fn cmd_synth(cfg: &BenchConfig) -> Result<PathBuf> {
    let dir = cfg.layout().archive();
    let a = synth_archive(&cfg.synth)?;
    write_archive(&a, &dir)?;
    Ok(dir)
}

pub fn cmd_fit_compressor(cfg: &BenchConfig, kind: CompressorKind) -> Result<String> {
    let layout = cfg.layout();
    let archive = read_archive(layout.archive())?.with_splits(cfg.splits)?;
    let c = match kind {
        CompressorKind::Eof => {
            Compressor::fit_eof(&archive, cfg.splits.train, cfg.compressor.latent_dim)?
        }
        CompressorKind::Autoencoder => {
            Compressor::train_autoencoder(&archive, cfg.splits.train, &cfg.compressor.ae)?
        }
    };
    c.save(layout.compressor())?;
    c.id()
}

pub fn cmd_encode(cfg: &BenchConfig) -> Result<usize> {
    let b = Bench::open(cfg.clone())?;
    let c = b.compressor()?;
    let s = LatentSeries::encode(
        c.as_ref(),
        &c.id()?,
        &b.archive,
        b.full_range()?,
        cfg.splits.train,
    )?;
    s.save(b.layout.latents())?;
    Ok(s.len())
}

/// Fits one backbone on the stored latent series.
pub fn train_backbone(
    cfg: &BenchConfig,
    series: &LatentSeries,
    b: &BackboneConfig,
) -> Result<LatentForecaster> {
    let (train, val) = (cfg.splits.train, cfg.splits.val);
    match cfg.training {
        Training::Windowed => LatentForecaster::fit(series, train, val, b),
        Training::Autoregressive => {
            let m = LatentForecaster::init(series, train, b)?;
            train_autoregressive(m, series, train, val, &cfg.rollout)
        }
    }
}

/// Trains the configured backbones, or only `only` when given.
pub fn cmd_train(cfg: &BenchConfig, only: Option<&str>) -> Result<Vec<String>> {
    let layout = cfg.layout();
    let series = LatentSeries::load(layout.latents())?;
    let mut done = Vec::new();
    for b in &cfg.backbones {
        if only.is_some_and(|o| o != b.kind.name()) {
            continue;
        }
        log::info!("training {}", b.kind);
        let m = train_backbone(cfg, &series, b)?;
        m.save(layout.model(&m.id))?;
        done.push(m.id);
    }
    if let Some(o) = only {
        if done.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "backbone '{o}' is not configured"
            )));
        }
    }
    Ok(done)
}

/// Rolls one model out from `init` and stores the run.
pub fn cmd_rollout(cfg: &BenchConfig, model: &str, init: NaiveDate) -> Result<PathBuf> {
    let b = Bench::open(cfg.clone())?;
    let slot = b
        .all_models()?
        .into_iter()
        .chain([ModelSlot {
            id: "observed".into(),
            handle: Ok(ModelHandle::Observed),
        }])
        .find(|s| s.id == model)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown model '{model}'")))?;
    let h = slot.handle.map_err(Error::InvalidData)?;
    let run = h.rollout(&b.archive, init, &cfg.rollout)?;
    let dir = b.layout.run(model, init);
    run.save(&dir)?;
    Ok(dir)
}

/// Ranks the trained backbones on validation rollouts and fits one weight
/// set per configured tier. Tiers with fewer than two members are skipped.
pub fn cmd_ensemble(cfg: &BenchConfig) -> Result<Vec<ModelStatus>> {
    let b = Bench::open(cfg.clone())?;
    let inits = b.val_inits();
    if inits.is_empty() {
        return Err(Error::EmptyRange(format!(
            "no {}-day forecasts fit in {}",
            cfg.rollout.horizon, cfg.splits.val
        )));
    }
    let mut scores = Vec::new();
    let mut runs = Vec::new();
    for slot in b.learned() {
        let Ok(h) = slot.handle else { continue };
        let r = h.rollouts(&b.archive, &inits, &cfg.rollout)?;
        let rep = evaluate_runs(&r, &b.archive, &b.clim, false)?;
        scores.push(MemberScore {
            id: slot.id.clone(),
            acc: rep.get("acc").as_f64(),
            rmse: rep.get("rmse").as_f64(),
        });
        runs.push((slot.id, r));
    }
    let ranked = rank_members(&scores);
    let rows: Vec<Vec<String>> = ranked
        .iter()
        .enumerate()
        .map(|(i, s)| {
            vec![
                (i + 1).to_string(),
                s.id.clone(),
                s.acc.to_string(),
                s.rmse.to_string(),
            ]
        })
        .collect();
    write_file(
        &b.layout.ensembles().join("ranking.csv"),
        csv_bytes(&["rank", "model", "val_acc_180", "val_rmse_180"], &rows)?,
    )?;
    let ordered: Vec<&[ForecastRun]> = ranked
        .iter()
        .map(|s| {
            runs.iter()
                .find(|(id, _)| *id == s.id)
                .map(|(_, r)| r.as_slice())
                .expect("ranked member has runs")
        })
        .collect();
    let mut status = Vec::new();
    for tier in &cfg.ensemble.tiers {
        let id = format!("ensemble-{}", tier.name());
        let path = b.layout.ensemble(*tier);
        match fit_weights(&ranked, &ordered, &b.archive, *tier, &cfg.ensemble.fit) {
            Ok(spec) => {
                write_json(&path, &spec)?;
                status.push(ModelStatus {
                    model: id,
                    status: "ok".into(),
                    reason: String::new(),
                });
            }
            Err(Error::InvalidConfig(reason)) => {
                if path.exists() {
                    std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                status.push(ModelStatus {
                    model: id,
                    status: SKIPPED.into(),
                    reason,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(status)
}

/// Trains the first configured backbone with 7- and 15-day rolling windows
/// and writes both ACC-vs-lead curves.
pub fn cmd_windows(cfg: &BenchConfig) -> Result<bool> {
    let b = Bench::open(cfg.clone())?;
    let base = cfg
        .backbones
        .first()
        .ok_or_else(|| Error::InvalidConfig("no backbone configured".into()))?;
    let series = b.series()?;
    let codec = b.compressor()?;
    let forcing: ForcingSchedule = cfg.rollout.forcing.clone();
    let cmp = compare_rolling_windows(
        &series,
        codec.as_ref(),
        &b.archive,
        &b.clim,
        &cfg.splits,
        base,
        &forcing,
        &b.test_inits(),
    )?;
    let mut bytes = Vec::new();
    cmp.write_curves(&mut bytes)?;
    write_file(&b.layout.windows().join("curves.csv"), bytes)?;
    Ok(cmp.long_is_steadier())
}

/// Every step in order, from synthetic data to the summary.
pub fn run_pipeline(cfg: &BenchConfig) -> Result<ReportSummary> {
    if cfg.archive.is_none() {
        cmd_synth(cfg)?;
    }
    cmd_fit_compressor(cfg, cfg.compressor.kind)?;
    cmd_encode(cfg)?;
    cmd_train(cfg, None)?;
    cmd_ensemble(cfg)?;
    cmd_eval_s2s(cfg)?;
    cmd_eval_sio(cfg)?;
    cmd_extremes(cfg)?;
    if cfg.eval.rolling_windows {
        cmd_windows(cfg)?;
    }
    cmd_report(&cfg.output)
}

/// Last year whose whole September lies in `range`.
pub(crate) fn last_full_september(range: DateRange) -> Option<i32> {
    (range.start.year()..=range.end.year())
        .rev()
        .find(|y| september(*y).is_some_and(|(a, b)| range.contains(a) && range.contains(b)))
}

pub(crate) fn september(year: i32) -> Option<(NaiveDate, NaiveDate)> {
    Some((
        NaiveDate::from_ymd_opt(year, 9, 1)?,
        NaiveDate::from_ymd_opt(year, 9, 30)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = BenchConfig::load(
            None,
            &[
                "seed=7".into(),
                "eval.leads=[7,30]".into(),
                "backbones.1.lr=0.01".into(),
                "output=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.eval.leads, vec![7, 30]);
        assert_eq!(cfg.backbones[1].lr, 0.01);
        assert_eq!(cfg.output, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.synth.seed, 7);
        assert!(cfg.backbones.iter().all(|b| b.seed == 7));
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        for o in ["nope=1", "eval.leadz=[1]", "backbones.9.lr=1", "seed"] {
            assert!(
                matches!(
                    BenchConfig::load(None, &[o.into()]),
                    Err(Error::InvalidConfig(_))
                ),
                "{o}"
            );
        }
        assert!(matches!(
            BenchConfig::load(None, &["eval.leads=[0]".into()]),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            BenchConfig::load(None, &["eval.leads=[181]".into()]),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = BenchConfig::default();
        let back: BenchConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<BenchConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn init_dates_stay_inside_range() {
        let d = |m, day| NaiveDate::from_ymd_opt(2001, m, day).unwrap();
        let r = DateRange::new(d(1, 1), d(12, 31)).unwrap();
        let inits = init_dates(r, 180, 15);
        assert_eq!(inits[0], d(1, 1));
        assert!(inits.iter().all(|i| *i + Days::new(180) <= r.end));
        assert!(inits.windows(2).all(|w| (w[1] - w[0]).num_days() == 15));
        assert_eq!(inits.len(), (364 - 180) / 15 + 1);
        assert_eq!(last_full_september(r), Some(2001));
        assert_eq!(
            last_full_september(DateRange::new(d(1, 1), d(9, 29)).unwrap()),
            None
        );
    }
}
