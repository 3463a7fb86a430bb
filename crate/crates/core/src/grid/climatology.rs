use std::sync::Arc;

use chrono::NaiveDate;

use super::{day_of_year, non_ocean_value, DateRange, GridArchive, Mask, SicGrid};
use crate::{Error, Result};

/// Per-pixel, per-day-of-year mean concentration.
///
/// Index `doy - 1` holds the mean over all days with that day-of-year in the
/// source range (see [`day_of_year`]). When the range contains no Feb 29 the
/// day-366 field is the average of days 59 and 60 and its count stays 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    mask: Arc<Mask>,
    fields: Vec<f32>,
    counts: Vec<usize>,
    pub source_range: DateRange,
}

impl Climatology {
    /// Builds a climatology from explicit fields (`366 * rows * cols` values).
    pub fn from_fields(mask: Arc<Mask>, fields: Vec<f32>, source_range: DateRange) -> Result<Self> {
        let n = mask.len();
        if fields.len() != 366 * n {
            return Err(Error::shape(
                &[366, mask.rows(), mask.cols()],
                &[fields.len()],
            ));
        }
        let mut clim = Self {
            mask,
            fields,
            counts: vec![1; 366],
            source_range,
        };
        clim.restore_mask();
        Ok(clim)
    }

    /// Climatology equal to `value` everywhere.
    pub fn constant(mask: Arc<Mask>, value: f32, source_range: DateRange) -> Self {
        let n = mask.len();
        Self::from_fields(mask, vec![value; 366 * n], source_range).expect("consistent shape")
    }

    fn restore_mask(&mut self) {
        let n = self.mask.len();
        for doy in 0..366 {
            for (i, c) in self.mask.cells().iter().enumerate() {
                if *c != super::CellKind::Ocean {
                    self.fields[doy * n + i] = non_ocean_value();
                }
            }
        }
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    /// Number of source days that went into each day-of-year field.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn field_by_doy(&self, doy: usize) -> Result<&[f32]> {
        if !(1..=366).contains(&doy) {
            return Err(Error::InvalidData(format!("day of year {doy}")));
        }
        let n = self.mask.len();
        let field = &self.fields[(doy - 1) * n..doy * n];
        if self.counts[doy - 1] == 0 && doy != 366 {
            return Err(Error::InvalidData(format!(
                "climatology over {} has no samples for day of year {doy}",
                self.source_range
            )));
        }
        Ok(field)
    }

    pub fn field(&self, date: NaiveDate) -> Result<&[f32]> {
        self.field_by_doy(day_of_year(date))
    }

    pub fn grid(&self, date: NaiveDate) -> Result<SicGrid> {
        Ok(SicGrid::from_raw(
            date,
            self.field(date)?.to_vec(),
            self.mask.clone(),
        ))
    }
}

pub fn compute_climatology(archive: &GridArchive, range: DateRange) -> Result<Climatology> {
    let days = archive.days_in(range)?;
    let mask = archive.mask().clone();
    let n = mask.len();
    let mut sums = vec![0.0f64; 366 * n];
    let mut counts = vec![0usize; 366];
    for g in days {
        let doy = day_of_year(g.date) - 1;
        counts[doy] += 1;
        let row = &mut sums[doy * n..(doy + 1) * n];
        for &i in mask.ocean_indices() {
            row[i] += f64::from(g.values()[i]);
        }
    }
    let mut fields = vec![0.0f32; 366 * n];
    for doy in 0..366 {
        if counts[doy] == 0 {
            continue;
        }
        let c = counts[doy] as f64;
        for &i in mask.ocean_indices() {
            fields[doy * n + i] = (sums[doy * n + i] / c).clamp(0.0, 1.0) as f32;
        }
    }
    if counts[365] == 0 && counts[58] > 0 && counts[59] > 0 {
        for &i in mask.ocean_indices() {
            let a = f64::from(fields[58 * n + i]);
            let b = f64::from(fields[59 * n + i]);
            fields[365 * n + i] = (0.5 * (a + b)) as f32;
        }
    }
    let mut clim = Climatology {
        mask,
        fields,
        counts,
        source_range: range,
    };
    clim.restore_mask();
    Ok(clim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{synth_archive, SynthConfig};

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn two_identical_years_reproduce_either_year() {
        let cfg = SynthConfig {
            rows: 6,
            cols: 5,
            n_days: 730,
            start: d(2001, 1, 1),
            trend_per_year: 0.0,
            noise_sd: 0.0,
            ..SynthConfig::default()
        };
        let a = synth_archive(&cfg).unwrap();
        let clim = compute_climatology(&a, DateRange::new(d(2001, 1, 1), d(2002, 12, 31)).unwrap())
            .unwrap();
        for g in a
            .days_in(DateRange::new(d(2001, 1, 1), d(2001, 12, 31)).unwrap())
            .unwrap()
        {
            let f = clim.field(g.date).unwrap();
            for &i in a.mask().ocean_indices() {
                assert_eq!(f[i], g.values()[i]);
            }
        }
    }

    #[test]
    fn single_leap_day_field_equals_that_day() {
        let cfg = SynthConfig {
            rows: 5,
            cols: 5,
            n_days: 366,
            start: d(2004, 1, 1),
            noise_sd: 0.02,
            ..SynthConfig::default()
        };
        let a = synth_archive(&cfg).unwrap();
        let clim = compute_climatology(&a, DateRange::new(d(2004, 1, 1), d(2004, 12, 31)).unwrap())
            .unwrap();
        let leap = a.get(d(2004, 2, 29)).unwrap();
        assert_eq!(clim.counts()[365], 1);
        let f = clim.field(d(2004, 2, 29)).unwrap();
        for &i in a.mask().ocean_indices() {
            assert_eq!(f[i], leap.values()[i]);
        }
    }

    #[test]
    fn empty_range_errors() {
        let a = synth_archive(&SynthConfig {
            rows: 4,
            cols: 4,
            n_days: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let r = DateRange::new(d(1990, 1, 1), d(1990, 2, 1)).unwrap();
        assert!(matches!(
            compute_climatology(&a, r),
            Err(Error::EmptyRange(_))
        ));
    }
}
