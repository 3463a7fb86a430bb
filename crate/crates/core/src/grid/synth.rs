//! Synthetic archives with a seasonal cycle, a linear trend and AR(1)
//! anomalies.
//!
//! Anomalies are the sum of a few smooth spatial modes with AR(1) amplitudes
//! and a cell-independent AR(1) part, all sharing the same lag-1
//! coefficient, so every cell's anomaly series is itself AR(1).

use std::f64::consts::PI;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{day_of_year, CellKind, GridArchive, Mask, SicGrid, DEFAULT_CELL_AREA_KM2};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub n_days: usize,
    pub start: NaiveDate,
    /// Mean concentration at the grid edge and at the centre.
    pub base_edge: f64,
    pub base_centre: f64,
    pub seasonal_amp: f64,
    /// Day of year at which the seasonal cycle bottoms out.
    pub trough_doy: f64,
    /// Peak-to-peak spatial variation of the seasonal phase, radians.
    pub phase_spread: f64,
    pub trend_per_year: f64,
    pub ar1_rho: f64,
    /// Innovation standard deviation of the anomaly process.
    pub noise_sd: f64,
    /// Number of smooth spatial anomaly modes.
    pub n_modes: usize,
    /// Share of anomaly variance that is independent from cell to cell.
    pub fine_fraction: f64,
    /// Radius in cells of a pole hole at the grid centre (0 disables it).
    pub pole_hole_radius: usize,
    pub cell_area_km2: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            rows: 16,
            cols: 12,
            n_days: 365,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            base_edge: 0.3,
            base_centre: 0.7,
            seasonal_amp: 0.2,
            trough_doy: 258.0,
            phase_spread: 0.4,
            trend_per_year: -0.004,
            ar1_rho: 0.9,
            noise_sd: 0.02,
            n_modes: 6,
            fine_fraction: 0.3,
            pole_hole_radius: 0,
            cell_area_km2: DEFAULT_CELL_AREA_KM2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// The 56×38, 20-year fixture used by the end-to-end checks.
    pub fn standard(seed: u64) -> Self {
        Self {
            rows: 56,
            cols: 38,
            n_days: 7305,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_days < 1 {
            return bad("n_days must be at least 1".into());
        }
        if self.rows < 3 || self.cols < 3 {
            return bad(format!(
                "grid {}x{} is too small for a land ring",
                self.rows, self.cols
            ));
        }
        if !(0.0..1.0).contains(&self.ar1_rho) {
            return bad(format!("ar1_rho {} outside [0, 1)", self.ar1_rho));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd {}", self.noise_sd));
        }
        if !(0.0..=1.0).contains(&self.fine_fraction) {
            return bad(format!(
                "fine_fraction {} outside [0, 1]",
                self.fine_fraction
            ));
        }
        if self.n_modes == 0 && self.fine_fraction < 1.0 && self.noise_sd > 0.0 {
            return bad("n_modes must be positive unless fine_fraction is 1".into());
        }
        for (name, v) in [
            ("base_edge", self.base_edge),
            ("base_centre", self.base_centre),
            ("seasonal_amp", self.seasonal_amp),
            ("trend_per_year", self.trend_per_year),
            ("phase_spread", self.phase_spread),
            ("trough_doy", self.trough_doy),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.cell_area_km2.is_nan() || self.cell_area_km2 <= 0.0 {
            return bad(format!("cell_area_km2 {}", self.cell_area_km2));
        }
        Ok(())
    }

    pub fn mask(&self) -> Mask {
        let (rows, cols) = (self.rows, self.cols);
        let (cr, cc) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
        let r2 = (self.pole_hole_radius as f64).powi(2);
        let cells = (0..rows * cols)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                if r == 0 || c == 0 || r == rows - 1 || c == cols - 1 {
                    CellKind::Land
                } else if self.pole_hole_radius > 0
                    && (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= r2
                {
                    CellKind::PoleHole
                } else {
                    CellKind::Ocean
                }
            })
            .collect();
        Mask::new(rows, cols, cells).expect("consistent shape")
    }

    /// Normalised squared distance from the grid centre (0 centre, ~1 corners).
    fn radius2(&self, r: usize, c: usize) -> f64 {
        let y = (r as f64 + 0.5) / self.rows as f64 * 2.0 - 1.0;
        let x = (c as f64 + 0.5) / self.cols as f64 * 2.0 - 1.0;
        (x * x + y * y) / 2.0
    }

    /// Mean field without seasonal cycle, trend or anomaly.
    pub fn base(&self, r: usize, c: usize) -> f64 {
        self.base_edge + (self.base_centre - self.base_edge) * (1.0 - self.radius2(r, c))
    }

    /// Seasonal phase offset of a cell; the cycle reaches its minimum at
    /// `trough_doy` where the spatial offset is zero.
    pub fn phase(&self, r: usize, c: usize) -> f64 {
        let spatial = self.phase_spread * (self.radius2(r, c) - 0.5);
        PI - 2.0 * PI * self.trough_doy / 365.25 + spatial
    }

    /// Deterministic part of a cell's value: base, seasonal cycle and trend.
    pub fn deterministic(&self, r: usize, c: usize, date: NaiveDate) -> f64 {
        let years = (date - self.start).num_days() as f64 / 365.25;
        self.base(r, c)
            + self.seasonal_amp * (2.0 * PI * seasonal_day(date) / 365.25 + self.phase(r, c)).cos()
            + self.trend_per_year * years
    }
}

/// Day position used by the seasonal term: the folded day of year, with
/// Feb 29 sitting between Feb 28 and Mar 1.
fn seasonal_day(date: NaiveDate) -> f64 {
    if date.month() == 2 && date.day() == 29 {
        59.5
    } else {
        day_of_year(date) as f64
    }
}

fn spatial_modes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = cfg.rows * cfg.cols;
    (0..cfg.n_modes)
        .map(|k| {
            let ky = 1.0 + (k / 2) as f64;
            let kx = 1.0 + (k % 3) as f64 * 0.5;
            let py: f64 = rng.random::<f64>() * 2.0 * PI;
            let px: f64 = rng.random::<f64>() * 2.0 * PI;
            let mut m: Vec<f64> = (0..n)
                .map(|i| {
                    let y = (i / cfg.cols) as f64 / cfg.rows as f64;
                    let x = (i % cfg.cols) as f64 / cfg.cols as f64;
                    (PI * ky * y + py).sin() * (PI * kx * x + px).cos()
                })
                .collect();
            let rms = (m.iter().map(|v| v * v).sum::<f64>() / n as f64)
                .sqrt()
                .max(1e-12);
            m.iter_mut().for_each(|v| *v /= rms);
            m
        })
        .collect()
}

pub fn synth_archive(cfg: &SynthConfig) -> Result<GridArchive> {
    cfg.validate()?;
    let mask = Arc::new(cfg.mask());
    let n = cfg.rows * cfg.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let modes = spatial_modes(cfg, &mut rng);

    let rho = cfg.ar1_rho;
    let stationary = 1.0 / (1.0 - rho * rho).sqrt();
    let mode_sd = cfg.noise_sd * ((1.0 - cfg.fine_fraction) / cfg.n_modes.max(1) as f64).sqrt();
    let fine_sd = cfg.noise_sd * cfg.fine_fraction.sqrt();
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut coeffs: Vec<f64> = (0..cfg.n_modes)
        .map(|_| normal() * mode_sd * stationary)
        .collect();
    let mut fine: Vec<f64> = (0..n).map(|_| normal() * fine_sd * stationary).collect();

    let mut grids = Vec::with_capacity(cfg.n_days);
    for day in 0..cfg.n_days {
        let date = cfg.start + chrono::Duration::days(day as i64);
        if day > 0 {
            for c in coeffs.iter_mut() {
                *c = rho * *c + normal() * mode_sd;
            }
            for f in fine.iter_mut() {
                *f = rho * *f + normal() * fine_sd;
            }
        }
        let values = (0..n).map(|i| {
            let (r, c) = (i / cfg.cols, i % cfg.cols);
            let large: f64 = modes.iter().zip(&coeffs).map(|(m, a)| m[i] * a).sum();
            cfg.deterministic(r, c, date) + large + fine[i]
        });
        grids.push(SicGrid::from_clipped(date, values, mask.clone()));
    }
    GridArchive::new(mask, grids, vec![false; cfg.n_days], cfg.cell_area_km2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_config_is_constant_in_time() {
        let cfg = SynthConfig {
            n_days: 50,
            seasonal_amp: 0.0,
            noise_sd: 0.0,
            trend_per_year: 0.0,
            ..SynthConfig::default()
        };
        let a = synth_archive(&cfg).unwrap();
        let first = a.grids()[0].values().to_vec();
        for g in a.grids() {
            for &i in a.mask().ocean_indices() {
                assert_eq!(g.values()[i], first[i]);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig {
            n_days: 40,
            seed: 11,
            ..SynthConfig::default()
        };
        assert_eq!(synth_archive(&cfg).unwrap(), synth_archive(&cfg).unwrap());
        let other = SynthConfig {
            seed: 12,
            ..cfg.clone()
        };
        assert_ne!(synth_archive(&cfg).unwrap(), synth_archive(&other).unwrap());
    }

    #[test]
    fn mask_has_land_ring() {
        let m = SynthConfig::default().mask();
        for c in 0..m.cols() {
            assert_eq!(m.get(0, c), CellKind::Land);
            assert_eq!(m.get(m.rows() - 1, c), CellKind::Land);
        }
        for r in 0..m.rows() {
            assert_eq!(m.get(r, 0), CellKind::Land);
            assert_eq!(m.get(r, m.cols() - 1), CellKind::Land);
        }
        assert_eq!(m.get(1, 1), CellKind::Ocean);
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig {
                n_days: 0,
                ..SynthConfig::default()
            },
            SynthConfig {
                ar1_rho: 1.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                ar1_rho: -0.1,
                ..SynthConfig::default()
            },
            SynthConfig {
                rows: 2,
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(synth_archive(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn pole_hole_marked() {
        let cfg = SynthConfig {
            rows: 11,
            cols: 11,
            pole_hole_radius: 1,
            ..SynthConfig::default()
        };
        let m = cfg.mask();
        assert_eq!(m.get(5, 5), CellKind::PoleHole);
        assert_eq!(m.count(CellKind::PoleHole), 5);
    }
}
