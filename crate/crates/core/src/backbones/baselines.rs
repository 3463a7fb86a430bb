//! Grid-space statistical baselines.

use std::sync::Arc;

use chrono::{Days, NaiveDate};

use crate::grid::{Climatology, DateRange, GridArchive, SicGrid};
use crate::{Error, Result};

/// Fewest anomaly pairs for which a damping coefficient is fitted.
pub const MIN_SDAP_PAIRS: usize = 100;

fn target_date(date: NaiveDate, lead: u32) -> NaiveDate {
    date + Days::new(u64::from(lead))
}

/// The last observed grid, re-dated to `lead` days later.
pub fn persistence_forecast(last: &SicGrid, lead: u32) -> SicGrid {
    SicGrid::from_raw(
        target_date(last.date, lead),
        last.values().to_vec(),
        last.mask().clone(),
    )
}

pub fn climatology_forecast(clim: &Climatology, target: NaiveDate) -> Result<SicGrid> {
    clim.grid(target)
}

/// Spatially damped anomaly persistence: climatology plus the initial
/// anomaly scaled by a per-cell, per-lead coefficient in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SdapModel {
    pub clim: Arc<Climatology>,
    max_lead: usize,
    /// `max_lead × n_ocean`, lead-major.
    alpha: Vec<f32>,
    /// (cell, lead) pairs left at zero for lack of data.
    pub defaulted: usize,
}

impl SdapModel {
    /// Least-squares damping slope of anomalies over `range`.
    pub fn fit(
        archive: &GridArchive,
        range: DateRange,
        clim: Arc<Climatology>,
        max_lead: usize,
    ) -> Result<Self> {
        if max_lead == 0 {
            return Err(Error::InvalidConfig("max_lead must be positive".into()));
        }
        let grids = archive.days_in(range)?;
        if grids
            .windows(2)
            .any(|w| w[1].date != w[0].date + Days::new(1))
        {
            return Err(Error::InvalidData(format!(
                "{range} has missing days; fill gaps first"
            )));
        }
        let mask = archive.mask().clone();
        if *clim.mask() != mask {
            return Err(Error::InvalidData(
                "climatology mask differs from archive".into(),
            ));
        }
        let idx = mask.ocean_indices();
        let n = idx.len();
        let t_len = grids.len();
        let mut anom = Vec::with_capacity(t_len * n);
        for g in grids {
            let c = clim.field(g.date)?;
            anom.extend(
                idx.iter()
                    .map(|&i| f64::from(g.values()[i]) - f64::from(c[i])),
            );
        }
        // prefix[m·n + j] = Σ_{t<m} a[t][j]²
        let mut prefix = vec![0.0; (t_len + 1) * n];
        for t in 0..t_len {
            for j in 0..n {
                let a = anom[t * n + j];
                prefix[(t + 1) * n + j] = prefix[t * n + j] + a * a;
            }
        }
        let mut alpha = vec![0f32; max_lead * n];
        let mut defaulted = 0;
        let mut num = vec![0.0; n];
        for tau in 1..=max_lead {
            let pairs = t_len.saturating_sub(tau);
            if pairs < MIN_SDAP_PAIRS {
                defaulted += n;
                continue;
            }
            num.iter_mut().for_each(|v| *v = 0.0);
            for t in 0..pairs {
                let (a, b) = (
                    &anom[t * n..(t + 1) * n],
                    &anom[(t + tau) * n..(t + tau + 1) * n],
                );
                for j in 0..n {
                    num[j] += a[j] * b[j];
                }
            }
            for j in 0..n {
                let den = prefix[pairs * n + j];
                let slot = &mut alpha[(tau - 1) * n + j];
                if den > 1e-12 {
                    *slot = (num[j] / den).clamp(0.0, 1.0) as f32;
                } else {
                    defaulted += 1;
                }
            }
        }
        Ok(Self {
            clim,
            max_lead,
            alpha,
            defaulted,
        })
    }

    /// Model with given coefficients (`max_lead × n_ocean`, lead-major),
    /// clipped to `[0, 1]`.
    pub fn from_parts(clim: Arc<Climatology>, max_lead: usize, alpha: Vec<f32>) -> Result<Self> {
        let n = clim.mask().ocean_count();
        if alpha.len() != max_lead * n {
            return Err(Error::shape(&[max_lead, n], &[alpha.len()]));
        }
        let alpha = alpha
            .into_iter()
            .map(|a| {
                if a.is_finite() {
                    a.clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            clim,
            max_lead,
            alpha,
            defaulted: 0,
        })
    }

    pub fn max_lead(&self) -> usize {
        self.max_lead
    }

    /// Coefficients for `lead`, one per ocean cell.
    pub fn alpha(&self, lead: usize) -> Result<&[f32]> {
        if lead == 0 || lead > self.max_lead {
            return Err(Error::InvalidConfig(format!(
                "lead {lead} outside 1..={}",
                self.max_lead
            )));
        }
        let n = self.clim.mask().ocean_count();
        Ok(&self.alpha[(lead - 1) * n..lead * n])
    }

    pub fn forecast(&self, obs: &SicGrid, lead: u32) -> Result<SicGrid> {
        let a = self.alpha(lead as usize)?;
        let mask = self.clim.mask().clone();
        if *obs.mask() != mask {
            return Err(Error::InvalidData(
                "observation mask differs from climatology".into(),
            ));
        }
        let target = target_date(obs.date, lead);
        let c0 = self.clim.field(obs.date)?;
        let c1 = self.clim.field(target)?;
        let mut full = vec![0.0; mask.len()];
        for (j, &i) in mask.ocean_indices().iter().enumerate() {
            let anomaly = f64::from(obs.values()[i]) - f64::from(c0[i]);
            full[i] = f64::from(c1[i]) + f64::from(a[j]) * anomaly;
        }
        Ok(SicGrid::from_clipped(target, full, mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{compute_climatology, synth_archive, Mask, SynthConfig};

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn persistence_repeats_last_grid() {
        let mask = Arc::new(Mask::all_ocean(2, 2));
        let g = SicGrid::new(d(2020, 3, 1), vec![0.1, 0.5, 0.9, 0.0], mask).unwrap();
        for lead in [1, 30, 180] {
            let f = persistence_forecast(&g, lead);
            assert_eq!(f.values(), g.values());
            assert_eq!(f.date, g.date + Days::new(lead as u64));
        }
    }

    #[test]
    fn sdap_collapses_to_persistence_and_climatology() {
        let cfg = SynthConfig {
            n_days: 400,
            ..SynthConfig::default()
        };
        let a = synth_archive(&cfg).unwrap();
        let range = DateRange::new(a.first_date().unwrap(), a.last_date().unwrap()).unwrap();
        let n = a.mask().ocean_count();
        let zero = Arc::new(Climatology::constant(a.mask().clone(), 0.0, range));
        let ones = SdapModel::from_parts(zero, 10, vec![1.0; 10 * n]).unwrap();
        let obs = &a.grids()[50];
        for lead in [1, 5, 10] {
            assert_eq!(
                ones.forecast(obs, lead).unwrap(),
                persistence_forecast(obs, lead)
            );
        }
        let clim = Arc::new(compute_climatology(&a, range).unwrap());
        let zeros = SdapModel::from_parts(clim.clone(), 10, vec![0.0; 10 * n]).unwrap();
        let target = obs.date + Days::new(7);
        assert_eq!(
            zeros.forecast(obs, 7).unwrap(),
            climatology_forecast(&clim, target).unwrap()
        );
    }

    #[test]
    fn short_range_defaults_to_zero() {
        let cfg = SynthConfig {
            n_days: 730,
            ..SynthConfig::default()
        };
        let a = synth_archive(&cfg).unwrap();
        let all = DateRange::new(a.first_date().unwrap(), a.last_date().unwrap()).unwrap();
        let clim = Arc::new(compute_climatology(&a, all).unwrap());
        let short = DateRange::new(all.start, all.start + Days::new(149)).unwrap();
        let m = SdapModel::fit(&a, short, clim, 60).unwrap();
        let n = a.mask().ocean_count();
        // Leads 51..=60 have fewer than 100 pairs.
        assert!(m.alpha(51).unwrap().iter().all(|v| *v == 0.0));
        assert!(m.defaulted >= 10 * n);
        assert!(m.alpha(1).unwrap().iter().any(|v| *v > 0.0));
        for lead in 1..=60 {
            assert!(m
                .alpha(lead)
                .unwrap()
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
