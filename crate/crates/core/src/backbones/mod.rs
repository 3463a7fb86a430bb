//! Forecasting backbones.
//!
//! Learned backbones map a window of `n` latent vectors to the next `p`,
//! channel by channel. Statistical baselines work directly on grids.

mod baselines;
mod net;

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_params, save_params, ParamStore, Tape, Tensor, Var};
use crate::grid::DateRange;
use crate::latent::{LatentSeries, Normalizer};
use crate::rollout::{self, RolloutConfig, TrainReport};
use crate::{Error, Result};

pub use baselines::{climatology_forecast, persistence_forecast, SdapModel, MIN_SDAP_PAIRS};
pub use net::detect_period;
pub(crate) use net::BatchCtx;

pub const CHECKPOINT_FILE: &str = "backbone.ckpt";
pub const SIDECAR_FILE: &str = "backbone.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Latent,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    DLinear,
    NLinear,
    CycleNet,
    SciNet,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] = [
        BackboneKind::DLinear,
        BackboneKind::NLinear,
        BackboneKind::CycleNet,
        BackboneKind::SciNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::DLinear => "dlinear",
            BackboneKind::NLinear => "nlinear",
            BackboneKind::CycleNet => "cyclenet",
            BackboneKind::SciNet => "scinet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown backbone '{s}'")))
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Input window length.
    pub n: usize,
    /// Output steps per call.
    pub p: usize,
    /// DLinear: separate weights for every latent channel instead of one
    /// map shared by all.
    pub individual: bool,
    /// Moving-average width of the trend split.
    pub ma_kernel: usize,
    /// Even/odd split depth of the SCINet tree.
    pub levels: usize,
    /// Hidden width of the SCINet interaction MLPs.
    pub hidden: usize,
    /// Pad SCINet inputs at the front (repeating the first value) up to a
    /// multiple of `2^levels`; otherwise such lengths are rejected.
    pub pad_input: bool,
    /// Fixed cycle length; detected from the spectrum when unset.
    pub cycle_period: Option<usize>,
    /// DLinear: subtract each input row's mean before the network and add it
    /// back to the output, making forecasts shift-equivariant.
    pub instance_norm: bool,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Spacing of training window starts, in days.
    pub sample_stride: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kind: BackboneKind::DLinear,
            n: 15,
            p: 15,
            individual: true,
            ma_kernel: 25,
            levels: 2,
            hidden: 16,
            pad_input: true,
            cycle_period: None,
            instance_norm: true,
            lr: 1e-3,
            max_epochs: 30,
            patience: 5,
            batch_size: 32,
            sample_stride: 1,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 || self.p == 0 {
            return bad("n and p must be positive".into());
        }
        if self.ma_kernel == 0
            || self.hidden == 0
            || self.batch_size == 0
            || self.sample_stride == 0
        {
            return bad("ma_kernel, hidden, batch_size and sample_stride must be positive".into());
        }
        if self.levels > 6 {
            return bad(format!("levels {} too deep", self.levels));
        }
        if self.kind == BackboneKind::SciNet
            && !self.pad_input
            && !self.n.is_multiple_of(1 << self.levels)
        {
            return bad(format!(
                "input length {} is not divisible by 2^{}",
                self.n, self.levels
            ));
        }
        if let Some(w) = self.cycle_period {
            if !(1..=366).contains(&w) {
                return bad(format!("cycle_period {w} outside 1..=366"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive".into());
        }
        Ok(())
    }
}

pub(crate) fn day_number(d: NaiveDate) -> i64 {
    i64::from(d.num_days_from_ce())
}

/// Learned latent-space forecaster with its input normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentForecaster {
    pub id: String,
    pub cfg: BackboneConfig,
    pub dim: usize,
    /// Cycle length (CycleNet only; 0 otherwise).
    pub period: usize,
    pub(crate) net: net::Net,
    pub(crate) store: ParamStore,
    pub norm: Normalizer,
    pub compressor_id: String,
    pub train_range: DateRange,
    /// Present once trained.
    pub report: Option<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub id: String,
    pub n: usize,
    pub p: usize,
    pub space: Space,
    pub dim: usize,
    pub period: usize,
    pub config: BackboneConfig,
    pub train_range: DateRange,
    pub compressor_id: String,
    pub normalization: Normalizer,
    pub validation_score: Option<f64>,
    pub report: Option<TrainReport>,
}

impl LatentForecaster {
    /// Untrained model over `series`. The CycleNet table starts at the
    /// per-phase means of the training range.
    pub fn init(
        series: &LatentSeries,
        train_range: DateRange,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let z = series.normalized();
        let dim = series.dim;
        let lo = series.dates.partition_point(|d| *d < train_range.start);
        let hi = series.dates.partition_point(|d| *d <= train_range.end);
        if hi <= lo {
            return Err(Error::EmptyRange(format!("no latents in {train_range}")));
        }
        let period = if cfg.kind == BackboneKind::CycleNet {
            match cfg.cycle_period {
                Some(w) => w,
                None => {
                    let mean: Vec<f64> = (lo..hi)
                        .map(|i| z[i * dim..(i + 1) * dim].iter().sum::<f64>() / dim as f64)
                        .collect();
                    detect_period(&mean)
                }
            }
        } else {
            0
        };
        if cfg.kind == BackboneKind::CycleNet && hi - lo < 2 * period {
            return Err(Error::InsufficientHistory(format!(
                "{} training days for two cycles of {period}",
                hi - lo
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let net = net::Net::new(cfg, dim, period.max(1), &mut store, &mut rng)?;
        if period > 0 {
            let mut sum = vec![0.0; period * dim];
            let mut count = vec![0usize; period];
            for i in lo..hi {
                let ph = day_number(series.dates[i]).rem_euclid(period as i64) as usize;
                count[ph] += 1;
                for c in 0..dim {
                    sum[ph * dim + c] += z[i * dim + c];
                }
            }
            for ph in 0..period {
                for c in 0..dim {
                    sum[ph * dim + c] /= count[ph].max(1) as f64;
                }
            }
            net.set_cycle(&mut store, &sum)?;
        }
        Ok(Self {
            id: cfg.kind.name().to_string(),
            cfg: cfg.clone(),
            dim,
            period,
            net,
            store,
            norm: series.norm.clone(),
            compressor_id: series.compressor_id.clone(),
            train_range,
            report: None,
        })
    }

    /// Windowed supervised training on `train`, early-stopped on `val`.
    pub fn fit(
        series: &LatentSeries,
        train: DateRange,
        val: DateRange,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        let model = Self::init(series, train, cfg)?;
        let rc = RolloutConfig::single_step(cfg.n, cfg.p, cfg.seed);
        rollout::train_autoregressive(model, series, train, val, &rc)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn is_fitted(&self) -> bool {
        self.report.is_some()
    }

    pub fn input_len(&self) -> usize {
        self.cfg.n
    }

    pub fn output_len(&self) -> usize {
        self.cfg.p
    }

    pub fn space(&self) -> Space {
        Space::Latent
    }

    pub fn n_params(&self) -> usize {
        self.store.n_values()
    }

    /// Normalised forward pass: `x` is `[samples·dim, n]`.
    pub(crate) fn forward(&self, t: &mut Tape, x: Var, starts: &[i64]) -> Result<Var> {
        let ctx = BatchCtx {
            samples: starts.len(),
            dim: self.dim,
            starts,
        };
        if !self.cfg.instance_norm || self.cfg.kind != BackboneKind::DLinear {
            return self.net.forward(t, &self.store, x, &ctx);
        }
        let (n, p) = (self.cfg.n, self.cfg.p);
        let avg = t.constant(Tensor::full(&[n, 1], 1.0 / n as f64));
        let mean = t.matmul(x, avg)?;
        let spread_in = t.constant(Tensor::full(&[1, n], 1.0));
        let spread_out = t.constant(Tensor::full(&[1, p], 1.0));
        let m_in = t.matmul(mean, spread_in)?;
        let centred = t.sub(x, m_in)?;
        let y = self.net.forward(t, &self.store, centred, &ctx)?;
        let m_out = t.matmul(mean, spread_out)?;
        t.add(y, m_out)
    }

    /// `p` steps after a window of `n` raw latent vectors (row-major
    /// `n × dim`) whose first day is `start`.
    pub fn forecast(&self, window: &[f64], start: NaiveDate) -> Result<Vec<f64>> {
        if !self.is_fitted() {
            return Err(Error::NotFitted(self.id.clone()));
        }
        self.predict(window, start)
    }

    pub(crate) fn predict(&self, window: &[f64], start: NaiveDate) -> Result<Vec<f64>> {
        let (n, p, d) = (self.cfg.n, self.cfg.p, self.dim);
        if window.len() != n * d {
            return Err(Error::shape(
                &[n, d],
                &[window.len() / d.max(1), window.len() % d.max(1)],
            ));
        }
        let mut w = window.to_vec();
        self.norm.normalize(&mut w);
        // Channel-major rows.
        let rows: Vec<f64> = (0..d)
            .flat_map(|c| (0..n).map(move |j| (c, j)))
            .map(|(c, j)| w[j * d + c])
            .collect();
        let mut t = Tape::new();
        let x = t.constant_from(&[d, n], rows)?;
        let y = self.forward(&mut t, x, &[day_number(start)])?;
        let yv = t.value(y);
        let mut out = vec![0.0; p * d];
        for c in 0..d {
            for h in 0..p {
                out[h * d + c] = yv[c * p + h];
            }
        }
        self.norm.denormalize(&mut out);
        Ok(out)
    }

    pub fn meta(&self) -> BackboneMeta {
        BackboneMeta {
            id: self.id.clone(),
            n: self.cfg.n,
            p: self.cfg.p,
            space: Space::Latent,
            dim: self.dim,
            period: self.period,
            config: self.cfg.clone(),
            train_range: self.train_range,
            compressor_id: self.compressor_id.clone(),
            normalization: self.norm.clone(),
            validation_score: self.report.as_ref().map(|r| r.best_val_loss),
            report: self.report.clone(),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&self.store, dir.join(CHECKPOINT_FILE))?;
        let p = dir.join(SIDECAR_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&self.meta())?)
            .map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(SIDECAR_FILE);
        let meta: BackboneMeta =
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let params = load_params(dir.join(CHECKPOINT_FILE))?;
        meta.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.config.seed);
        let mut store = ParamStore::new();
        let net = net::Net::new(
            &meta.config,
            meta.dim,
            meta.period.max(1),
            &mut store,
            &mut rng,
        )?;
        store.load_values(&params)?;
        Ok(Self {
            id: meta.id,
            cfg: meta.config,
            dim: meta.dim,
            period: meta.period,
            net,
            store,
            norm: meta.normalization,
            compressor_id: meta.compressor_id,
            train_range: meta.train_range,
            report: meta.report,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{day0, range, series};
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn noisy(dim: usize, days: usize, seed: u64) -> LatentSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise: Vec<f64> = (0..dim * days)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        series(dim, days, |t, c| {
            (2.0 * PI * t as f64 / 30.0 + c as f64).sin() + 0.3 * noise[t * dim + c]
        })
    }

    fn window(s: &LatentSeries, first: usize, n: usize) -> Vec<f64> {
        s.vectors()[first * s.dim..(first + n) * s.dim].to_vec()
    }

    fn quick(kind: BackboneKind) -> BackboneConfig {
        BackboneConfig {
            max_epochs: 3,
            sample_stride: 3,
            ..BackboneConfig::new(kind)
        }
    }

    #[test]
    fn zero_initialised_nlinear_is_persistence() {
        let s = noisy(3, 200, 1);
        let m = LatentForecaster::init(
            &s,
            range(0, 199),
            &BackboneConfig::new(BackboneKind::NLinear),
        )
        .unwrap();
        let w = window(&s, 40, 15);
        let y = m.predict(&w, day0()).unwrap();
        for h in 0..15 {
            for c in 0..3 {
                assert!((y[h * 3 + c] - w[14 * 3 + c]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn nlinear_is_shift_equivariant(shift in prop::collection::vec(-5.0f64..5.0, 3), start in 0usize..150) {
            let s = noisy(3, 200, 2);
            let m = LatentForecaster::fit(&s, range(0, 139), range(140, 199), &quick(BackboneKind::NLinear)).unwrap();
            let w = window(&s, start, 15);
            let moved: Vec<f64> = w.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect();
            let a = m.forecast(&w, day0()).unwrap();
            let b = m.forecast(&moved, day0()).unwrap();
            for (i, (x, y)) in a.iter().zip(&b).enumerate() {
                prop_assert!((y - x - shift[i % 3]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dlinear_carries_a_constant_channel() {
        let s = noisy(2, 200, 3);
        // Plain trend path: weights 1/n average the constant, the seasonal
        // path sees zeros.
        let plain = BackboneConfig {
            instance_norm: false,
            ..BackboneConfig::new(BackboneKind::DLinear)
        };
        let m = LatentForecaster::init(&s, range(0, 199), &plain).unwrap();
        let w: Vec<f64> = (0..15).flat_map(|_| [0.4, -1.2]).collect();
        let y = m.predict(&w, day0()).unwrap();
        for h in 0..15 {
            assert!((y[2 * h] - 0.4).abs() < 1e-12 && (y[2 * h + 1] + 1.2).abs() < 1e-12);
        }
        // With instance normalisation a trained model moves with a shifted
        // window.
        let trained = LatentForecaster::fit(
            &s,
            range(0, 139),
            range(140, 199),
            &quick(BackboneKind::DLinear),
        )
        .unwrap();
        let w = window(&s, 60, 15);
        let moved: Vec<f64> = w.iter().map(|v| v + 0.7).collect();
        let a = trained.forecast(&w, day0()).unwrap();
        let b = trained.forecast(&moved, day0()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (y - x - 0.7).abs() < 1e-9));
    }

    #[test]
    fn decomposition_reconstructs_the_window() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[4, 15], |i| ((i * 7) % 11) as f64 - 5.0));
        let tr = t.moving_average_1d(x, 25).unwrap();
        let se = t.sub(x, tr).unwrap();
        let back = t.add(tr, se).unwrap();
        for (a, b) in t.value(back).iter().zip(t.value(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dlinear_extrapolates_a_ramp() {
        let s = series(1, 400, |t, _| 2.0 + 0.01 * t as f64);
        let cfg = BackboneConfig {
            max_epochs: 40,
            patience: 40,
            ..BackboneConfig::new(BackboneKind::DLinear)
        };
        let m = LatentForecaster::fit(&s, range(0, 299), range(300, 399), &cfg).unwrap();
        let w = window(&s, 350, 15);
        let y = m.forecast(&w, day0()).unwrap();
        let last = w[14];
        // The least-squares solution on ramp windows is the exact continuation.
        let span = 0.01 * 15.0;
        for (h, v) in y.iter().enumerate() {
            let truth = last + 0.01 * (h + 1) as f64;
            assert!((v - truth).abs() <= 0.01 * span, "step {h}: {v} vs {truth}");
        }
    }

    #[test]
    fn cyclenet_learns_a_period_fifty_cycle() {
        let s = series(3, 1000, |t, c| {
            (1.0 + 0.5 * c as f64) * (2.0 * PI * t as f64 / 50.0 + 0.3 * c as f64).sin()
        });
        let m = LatentForecaster::fit(
            &s,
            range(0, 799),
            range(800, 999),
            &quick(BackboneKind::CycleNet),
        )
        .unwrap();
        assert_eq!(m.period, 50);
        let (mut se, mut ss) = (0.0, 0.0);
        for first in (800..970).step_by(7) {
            let y = m.forecast(&window(&s, first, 15), s.dates[first]).unwrap();
            let truth = window(&s, first + 15, 15);
            se += y
                .iter()
                .zip(&truth)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
            ss += truth.iter().map(|v| v * v).sum::<f64>();
        }
        assert!(
            se.sqrt() < 0.1 * ss.sqrt(),
            "residual {} of signal {}",
            se.sqrt(),
            ss.sqrt()
        );
    }

    #[test]
    fn cyclenet_on_a_constant_series_is_constant() {
        let s = series(2, 800, |_, c| c as f64 - 0.5);
        let m = LatentForecaster::init(
            &s,
            range(0, 799),
            &BackboneConfig {
                cycle_period: Some(7),
                ..BackboneConfig::new(BackboneKind::CycleNet)
            },
        )
        .unwrap();
        let y = m.predict(&window(&s, 100, 15), s.dates[100]).unwrap();
        for h in 0..15 {
            assert!((y[2 * h] + 0.5).abs() < 1e-12 && (y[2 * h + 1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn scinet_improves_on_an_ar2_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = vec![[0.0f64; 2]; 1200];
        for t in 2..x.len() {
            let (a, b) = (x[t - 1], x[t - 2]);
            for (c, v) in x[t].iter_mut().enumerate() {
                *v = 1.5 * a[c] - 0.8 * b[c] + rng.random_range(-0.5..0.5);
            }
        }
        let s = series(2, 1200, |t, c| x[t][c]);
        let cfg = BackboneConfig {
            max_epochs: 10,
            sample_stride: 2,
            ..BackboneConfig::new(BackboneKind::SciNet)
        };
        let m = LatentForecaster::fit(&s, range(0, 899), range(900, 1199), &cfg).unwrap();
        let r = m.report.as_ref().unwrap();
        assert!(
            r.best_val_loss <= 0.7 * r.initial_val_loss,
            "{} vs {}",
            r.best_val_loss,
            r.initial_val_loss
        );
    }

    #[test]
    fn every_backbone_is_deterministic_with_p_outputs() {
        let s = noisy(3, 900, 6);
        for kind in BackboneKind::ALL {
            let m =
                LatentForecaster::fit(&s, range(0, 699), range(700, 899), &quick(kind)).unwrap();
            let r = m.report.as_ref().unwrap();
            assert!(r.best_val_loss <= r.initial_val_loss, "{kind}");
            let w = window(&s, 720, 15);
            let a = m.forecast(&w, s.dates[720]).unwrap();
            assert_eq!(a.len(), 15 * 3);
            assert_eq!(a, m.forecast(&w, s.dates[720]).unwrap());
            let dir = tempfile::tempdir().unwrap();
            m.save(dir.path()).unwrap();
            let back = LatentForecaster::load(dir.path()).unwrap();
            assert_eq!(back.forecast(&w, s.dates[720]).unwrap(), a, "{kind}");
        }
    }

    #[test]
    fn unfitted_models_refuse_to_forecast() {
        let s = noisy(2, 100, 7);
        let m = LatentForecaster::init(&s, range(0, 99), &BackboneConfig::default()).unwrap();
        assert!(matches!(
            m.forecast(&window(&s, 0, 15), day0()),
            Err(Error::NotFitted(_))
        ));
        assert!(m.predict(&[0.0; 7], day0()).is_err());
    }
}
