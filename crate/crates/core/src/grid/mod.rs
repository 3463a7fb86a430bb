//! Gridded sea-ice concentration data: masks, daily grids, archives,
//! climatology and sea-ice extent.
//!
//! Concentrations are stored as fractions in `[0, 1]`. Cells that are not
//! ocean (land, the polar observation hole) carry a NaN sentinel and never
//! take part in any statistic.

mod archive;
mod climatology;
mod synth;

use std::ops::Range;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use archive::{read_archive, write_archive, MANIFEST_FILE, MASK_FILE};
pub use climatology::{compute_climatology, Climatology};
pub use synth::{synth_archive, SynthConfig};

/// Bit pattern written for every non-ocean cell.
pub const NON_OCEAN_BITS: u32 = 0x7FC0_0000;

/// Area of one 25 km × 25 km polar-stereographic cell.
pub const DEFAULT_CELL_AREA_KM2: f64 = 625.0;

/// Concentration above which a cell counts towards sea-ice extent.
pub const SIE_THRESHOLD: f64 = 0.15;

pub(crate) fn non_ocean_value() -> f32 {
    f32::from_bits(NON_OCEAN_BITS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum CellKind {
    Ocean = 0,
    Land = 1,
    PoleHole = 2,
}

impl CellKind {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CellKind::Ocean),
            1 => Some(CellKind::Land),
            2 => Some(CellKind::PoleHole),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

/// Per-cell classification of a grid, shared by every day of an archive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    cells: Vec<CellKind>,
    ocean: Vec<usize>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, cells: Vec<CellKind>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::shape(&[rows, cols], &[cells.len()]));
        }
        let ocean = cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == CellKind::Ocean)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            rows,
            cols,
            cells,
            ocean,
        })
    }

    /// A mask where every cell is ocean.
    pub fn all_ocean(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![CellKind::Ocean; rows * cols]).expect("consistent shape")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[CellKind] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> CellKind {
        self.cells[row * self.cols + col]
    }

    pub fn is_ocean(&self, idx: usize) -> bool {
        self.cells[idx] == CellKind::Ocean
    }

    /// Row-major indices of ocean cells, ascending.
    pub fn ocean_indices(&self) -> &[usize] {
        &self.ocean
    }

    pub fn ocean_count(&self) -> usize {
        self.ocean.len()
    }

    pub fn count(&self, kind: CellKind) -> usize {
        self.cells.iter().filter(|c| **c == kind).count()
    }
}

/// One day's concentration field.
#[derive(Debug, Clone)]
pub struct SicGrid {
    pub date: NaiveDate,
    values: Vec<f32>,
    mask: Arc<Mask>,
}

impl PartialEq for SicGrid {
    /// Bitwise comparison of values so NaN sentinels compare equal.
    fn eq(&self, other: &Self) -> bool {
        self.date == other.date
            && *self.mask == *other.mask
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl SicGrid {
    /// Builds a validated grid. Non-ocean cells are overwritten with the
    /// sentinel, whatever they held.
    pub fn new(date: NaiveDate, mut values: Vec<f32>, mask: Arc<Mask>) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::shape(&[mask.rows, mask.cols], &[values.len()]));
        }
        for (v, c) in values.iter_mut().zip(mask.cells.iter()) {
            if *c != CellKind::Ocean {
                *v = non_ocean_value();
            }
        }
        let grid = Self { date, values, mask };
        grid.validate()?;
        Ok(grid)
    }

    /// Builds a grid without any checks. Used to represent data that is
    /// about to be rejected, e.g. by [`write_archive`].
    pub fn from_raw(date: NaiveDate, values: Vec<f32>, mask: Arc<Mask>) -> Self {
        Self { date, values, mask }
    }

    /// Builds a grid from arbitrary values: ocean cells are clipped to
    /// `[0, 1]` (non-finite values become 0) and the mask is restored.
    pub fn from_clipped(
        date: NaiveDate,
        values: impl IntoIterator<Item = f64>,
        mask: Arc<Mask>,
    ) -> Self {
        let values = values
            .into_iter()
            .zip(mask.cells.iter())
            .map(|(v, c)| {
                if *c != CellKind::Ocean {
                    non_ocean_value()
                } else if v.is_finite() {
                    v.clamp(0.0, 1.0) as f32
                } else {
                    0.0
                }
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(values.len(), mask.len());
        Self { date, values, mask }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.mask.len() {
            return Err(Error::shape(
                &[self.mask.rows, self.mask.cols],
                &[self.values.len()],
            ));
        }
        for &i in self.mask.ocean_indices() {
            let v = self.values[i];
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidData(format!(
                    "{}: ocean cell ({}, {}) holds {v}",
                    self.date,
                    i / self.mask.cols,
                    i % self.mask.cols
                )));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.mask.cols + col]
    }

    /// Ocean values in row-major order.
    pub fn ocean_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.mask.ocean.iter().map(move |&i| self.values[i])
    }

    /// Spatial mean over ocean cells.
    pub fn ocean_mean(&self) -> f64 {
        let n = self.mask.ocean_count();
        if n == 0 {
            return 0.0;
        }
        self.ocean_values().map(f64::from).sum::<f64>() / n as f64
    }
}

/// Inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if end < start {
            return Err(Error::EmptyRange(format!("{start}..={end}")));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn n_days(&self) -> usize {
        ((self.end - self.start).num_days() + 1) as usize
    }

    pub fn overlaps(&self, other: &DateRange) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl std::fmt::Display for DateRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}..={}", self.start, self.end)
    }
}

/// Train/validation/test periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: DateRange,
    pub val: DateRange,
    pub test: DateRange,
}

impl Splits {
    pub fn new(train: DateRange, val: DateRange, test: DateRange) -> Result<Self> {
        let splits = Self { train, val, test };
        splits.validate()?;
        Ok(splits)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.end >= self.val.start || self.val.end >= self.test.start {
            return Err(Error::InvalidConfig(format!(
                "splits must be disjoint and ordered train < val < test, got {} / {} / {}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Whole calendar-year splits: `train_years` years starting at
    /// `first_year`, then `val_years`, then `test_years`.
    pub fn by_years(
        first_year: i32,
        train_years: i32,
        val_years: i32,
        test_years: i32,
    ) -> Result<Self> {
        let year = |y0: i32, n: i32| -> Result<DateRange> {
            let start = NaiveDate::from_ymd_opt(y0, 1, 1)
                .ok_or_else(|| Error::InvalidConfig(format!("bad year {y0}")))?;
            let end = NaiveDate::from_ymd_opt(y0 + n - 1, 12, 31)
                .ok_or_else(|| Error::InvalidConfig(format!("bad year {}", y0 + n - 1)))?;
            DateRange::new(start, end)
        };
        Self::new(
            year(first_year, train_years)?,
            year(first_year + train_years, val_years)?,
            year(first_year + train_years + val_years, test_years)?,
        )
    }
}

/// Day-of-year index in `1..=366`.
///
/// Every year uses non-leap numbering (March 1 is always 60); February 29
/// maps to 366, so non-leap years never produce 366.
pub fn day_of_year(date: NaiveDate) -> usize {
    let ordinal = date.ordinal() as usize;
    if !date.leap_year() || ordinal <= 59 {
        ordinal
    } else if ordinal == 60 {
        366
    } else {
        ordinal - 1
    }
}

/// Date-ordered daily grid series.
#[derive(Debug, Clone, PartialEq)]
pub struct GridArchive {
    mask: Arc<Mask>,
    grids: Vec<SicGrid>,
    gap_flags: Vec<bool>,
    pub cell_area_km2: f64,
    pub splits: Option<Splits>,
}

impl GridArchive {
    /// Builds an archive, checking shapes and date ordering. A date jump of
    /// more than one day is only accepted when the later day is gap-flagged.
    pub fn new(
        mask: Arc<Mask>,
        grids: Vec<SicGrid>,
        gap_flags: Vec<bool>,
        cell_area_km2: f64,
    ) -> Result<Self> {
        if grids.len() != gap_flags.len() {
            return Err(Error::InvalidData(format!(
                "{} grids but {} gap flags",
                grids.len(),
                gap_flags.len()
            )));
        }
        if !(cell_area_km2.is_finite() && cell_area_km2 > 0.0) {
            return Err(Error::InvalidData(format!("cell area {cell_area_km2}")));
        }
        for g in &grids {
            if *g.mask != *mask {
                return Err(Error::InvalidData(format!(
                    "{}: mask differs from archive mask",
                    g.date
                )));
            }
        }
        for (i, w) in grids.windows(2).enumerate() {
            let step = (w[1].date - w[0].date).num_days();
            if step <= 0 {
                return Err(Error::InvalidData(format!(
                    "dates not strictly increasing at {}",
                    w[1].date
                )));
            }
            if step > 1 && !gap_flags[i + 1] {
                return Err(Error::InvalidData(format!(
                    "undeclared gap between {} and {}",
                    w[0].date, w[1].date
                )));
            }
        }
        Ok(Self {
            mask,
            grids,
            gap_flags,
            cell_area_km2,
            splits: None,
        })
    }

    pub fn with_splits(mut self, splits: Splits) -> Result<Self> {
        splits.validate()?;
        self.splits = Some(splits);
        Ok(self)
    }

    pub fn mask(&self) -> &Arc<Mask> {
        &self.mask
    }

    pub fn grids(&self) -> &[SicGrid] {
        &self.grids
    }

    pub fn gap_flags(&self) -> &[bool] {
        &self.gap_flags
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.grids.first().map(|g| g.date)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.grids.last().map(|g| g.date)
    }

    /// True when every consecutive pair of days is exactly one day apart.
    pub fn is_contiguous(&self) -> bool {
        self.grids
            .windows(2)
            .all(|w| (w[1].date - w[0].date).num_days() == 1)
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let first = self.first_date()?;
        let guess = (date - first).num_days();
        if guess >= 0
            && (guess as usize) < self.grids.len()
            && self.grids[guess as usize].date == date
        {
            return Some(guess as usize);
        }
        self.grids.binary_search_by_key(&date, |g| g.date).ok()
    }

    pub fn get(&self, date: NaiveDate) -> Option<&SicGrid> {
        self.index_of(date).map(|i| &self.grids[i])
    }

    /// Index range of the days falling inside `range`.
    pub fn range_indices(&self, range: DateRange) -> Result<Range<usize>> {
        let lo = self.grids.partition_point(|g| g.date < range.start);
        let hi = self.grids.partition_point(|g| g.date <= range.end);
        if lo >= hi {
            return Err(Error::EmptyRange(format!("no archive days in {range}")));
        }
        Ok(lo..hi)
    }

    pub fn days_in(&self, range: DateRange) -> Result<&[SicGrid]> {
        Ok(&self.grids[self.range_indices(range)?])
    }

    pub fn splits_or_err(&self) -> Result<Splits> {
        self.splits
            .ok_or_else(|| Error::InvalidConfig("archive has no train/val/test splits".into()))
    }

    /// Inserts linearly interpolated grids for every missing calendar day,
    /// flagging them as gaps.
    pub fn fill_gaps(&self) -> Result<GridArchive> {
        let mut grids = Vec::with_capacity(self.grids.len());
        let mut flags = Vec::with_capacity(self.grids.len());
        for (i, g) in self.grids.iter().enumerate() {
            if i > 0 {
                let prev = &self.grids[i - 1];
                let span = (g.date - prev.date).num_days();
                for k in 1..span {
                    let w = k as f64 / span as f64;
                    let date = prev.date + chrono::Duration::days(k);
                    let values = prev
                        .values
                        .iter()
                        .zip(&g.values)
                        .map(|(&a, &b)| f64::from(a) * (1.0 - w) + f64::from(b) * w);
                    grids.push(SicGrid::from_clipped(date, values, self.mask.clone()));
                    flags.push(true);
                }
            }
            grids.push(g.clone());
            flags.push(self.gap_flags[i]);
        }
        let mut out = GridArchive::new(self.mask.clone(), grids, flags, self.cell_area_km2)?;
        out.splits = self.splits;
        Ok(out)
    }
}

/// Sea-ice extent in km²: ocean cells with concentration strictly above
/// `threshold`, plus every pole-hole cell, times the cell area.
pub fn sea_ice_extent(grid: &SicGrid, threshold: f64, cell_area_km2: f64) -> f64 {
    // Compare at storage precision so a stored 0.15 is not above 0.15.
    let threshold = threshold as f32;
    let ocean = grid.ocean_values().filter(|&v| v > threshold).count();
    let pole = grid.mask.count(CellKind::PoleHole);
    (ocean + pole) as f64 * cell_area_km2
}
