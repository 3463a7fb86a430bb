//! Forecast and reconstruction skill metrics.
//!
//! All metrics read ocean cells only. Inputs are `f32` grids; every
//! reduction accumulates in `f64` in a fixed order so results are
//! reproducible run to run.

mod detrend;
mod report;
mod ssim;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::grid::{Mask, SicGrid};
use crate::{Error, Result};

pub use detrend::{detrended_metrics, linear_fit, DetrendedStats};
pub use report::{EvalSample, MetricReport, ReportBuilder, METRIC_NAMES};
pub use ssim::{ssim, ssim_field, SSIM_C1, SSIM_C2, SSIM_WINDOW};

/// Denominators below this make a ratio metric undefined.
pub const EPS: f64 = 1e-12;

/// A metric value. Undefined results are explicit rather than NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    Value(f64),
    /// PSNR of a perfect prediction (zero error).
    Exact,
    Undefined,
}

impl Score {
    pub fn value(self) -> Option<f64> {
        match self {
            Score::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_defined(self) -> bool {
        !matches!(self, Score::Undefined)
    }

    /// Value for sorting and thresholds: `Exact` is `+inf`, `Undefined` is NaN.
    pub fn as_f64(self) -> f64 {
        match self {
            Score::Value(v) => v,
            Score::Exact => f64::INFINITY,
            Score::Undefined => f64::NAN,
        }
    }

    fn from_ratio(num: f64, den: f64, f: impl FnOnce(f64) -> f64) -> Self {
        if den.abs() < EPS || !num.is_finite() || !den.is_finite() {
            Score::Undefined
        } else {
            Score::Value(f(num / den))
        }
    }
}

impl std::fmt::Display for Score {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Score::Value(v) => write!(f, "{v}"),
            Score::Exact => f.write_str("exact"),
            Score::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Score::Value(v) => s.serialize_f64(*v),
            Score::Exact => s.serialize_str("exact"),
            Score::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Score::Value(v)),
            Raw::Str(s) if s == "exact" => Ok(Score::Exact),
            Raw::Str(s) if s == "undefined" => Ok(Score::Undefined),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unknown score '{s}'"))),
        }
    }
}

/// A prediction/truth pair of full grids (row-major, mask-sized).
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub pred: &'a [f32],
    pub truth: &'a [f32],
}

impl<'a> Sample<'a> {
    pub fn new(pred: &'a [f32], truth: &'a [f32]) -> Self {
        Self { pred, truth }
    }

    pub fn from_grids(pred: &'a SicGrid, truth: &'a SicGrid) -> Self {
        Self::new(pred.values(), truth.values())
    }
}

fn check(samples: &[Sample], mask: &Mask) -> Result<()> {
    if mask.ocean_count() == 0 {
        return Err(Error::EmptyMask);
    }
    if samples.is_empty() {
        return Err(Error::EmptyRange("no samples".into()));
    }
    for s in samples {
        for len in [s.pred.len(), s.truth.len()] {
            if len != mask.len() {
                return Err(Error::shape(&[mask.rows(), mask.cols()], &[len]));
            }
        }
    }
    Ok(())
}

pub(crate) fn check_field(field: &[f32], mask: &Mask) -> Result<()> {
    if field.len() != mask.len() {
        return Err(Error::shape(&[mask.rows(), mask.cols()], &[field.len()]));
    }
    Ok(())
}

fn sum_sq_err(s: &Sample, mask: &Mask) -> f64 {
    mask.ocean_indices()
        .iter()
        .map(|&i| {
            let e = f64::from(s.truth[i]) - f64::from(s.pred[i]);
            e * e
        })
        .sum()
}

fn sum_abs_err(s: &Sample, mask: &Mask) -> f64 {
    mask.ocean_indices()
        .iter()
        .map(|&i| (f64::from(s.truth[i]) - f64::from(s.pred[i])).abs())
        .sum()
}

fn n_values(samples: &[Sample], mask: &Mask) -> f64 {
    (samples.len() * mask.ocean_count()) as f64
}

/// Mean squared error over ocean cells of every sample.
pub fn mse(samples: &[Sample], mask: &Mask) -> Result<f64> {
    check(samples, mask)?;
    let sse: f64 = samples.iter().map(|s| sum_sq_err(s, mask)).sum();
    Ok(sse / n_values(samples, mask))
}

pub fn rmse(samples: &[Sample], mask: &Mask) -> Result<f64> {
    mse(samples, mask).map(f64::sqrt)
}

pub fn mae(samples: &[Sample], mask: &Mask) -> Result<f64> {
    check(samples, mask)?;
    let sae: f64 = samples.iter().map(|s| sum_abs_err(s, mask)).sum();
    Ok(sae / n_values(samples, mask))
}

/// Sum of squared deviations of the truth from its own spatial mean.
fn spatial_ss(truth: &[f32], mask: &Mask) -> f64 {
    let idx = mask.ocean_indices();
    let mean = idx.iter().map(|&i| f64::from(truth[i])).sum::<f64>() / idx.len() as f64;
    idx.iter()
        .map(|&i| {
            let d = f64::from(truth[i]) - mean;
            d * d
        })
        .sum()
}

/// Nash–Sutcliffe efficiency against the per-sample spatial mean of the
/// truth. Numerator and denominator are pooled over samples.
pub fn nse(samples: &[Sample], mask: &Mask) -> Result<Score> {
    check(samples, mask)?;
    let num: f64 = samples.iter().map(|s| sum_sq_err(s, mask)).sum();
    let den: f64 = samples.iter().map(|s| spatial_ss(s.truth, mask)).sum();
    Ok(Score::from_ratio(num, den, |r| 1.0 - r))
}

/// Coefficient of determination against the per-pixel temporal mean of the
/// truth over the given samples.
pub fn r2(samples: &[Sample], mask: &Mask) -> Result<Score> {
    check(samples, mask)?;
    let idx = mask.ocean_indices();
    let t = samples.len() as f64;
    let mut den = 0.0;
    for &i in idx {
        let mean = samples.iter().map(|s| f64::from(s.truth[i])).sum::<f64>() / t;
        den += samples
            .iter()
            .map(|s| {
                let d = f64::from(s.truth[i]) - mean;
                d * d
            })
            .sum::<f64>();
    }
    let num: f64 = samples.iter().map(|s| sum_sq_err(s, mask)).sum();
    Ok(Score::from_ratio(num, den, |r| 1.0 - r))
}

/// Anomaly correlation of one field against climatology `clim`.
///
/// The climatology is the only reference removed; anomaly means are not
/// subtracted again.
pub fn acc_field(pred: &[f32], truth: &[f32], clim: &[f32], mask: &Mask) -> Result<Score> {
    if mask.ocean_count() == 0 {
        return Err(Error::EmptyMask);
    }
    for f in [pred, truth, clim] {
        check_field(f, mask)?;
    }
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for &i in mask.ocean_indices() {
        let c = f64::from(clim[i]);
        let p = f64::from(pred[i]) - c;
        let t = f64::from(truth[i]) - c;
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let (np, nt) = (pp.sqrt(), tt.sqrt());
    if np < EPS || nt < EPS {
        return Ok(Score::Undefined);
    }
    Ok(Score::Value((pt / (np * nt)).clamp(-1.0, 1.0)))
}

/// ACC over a window: the mean of per-day ACCs, skipping undefined days.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccSummary {
    pub score: Score,
    pub skipped: usize,
}

pub fn acc(samples: &[Sample], clims: &[&[f32]], mask: &Mask) -> Result<AccSummary> {
    check(samples, mask)?;
    if clims.len() != samples.len() {
        return Err(Error::shape(&[samples.len()], &[clims.len()]));
    }
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for (s, c) in samples.iter().zip(clims) {
        match acc_field(s.pred, s.truth, c, mask)? {
            Score::Value(v) => {
                sum += v;
                n += 1;
            }
            _ => skipped += 1,
        }
    }
    let score = if n == 0 {
        Score::Undefined
    } else {
        Score::Value(sum / n as f64)
    };
    Ok(AccSummary { score, skipped })
}

/// Peak signal-to-noise ratio in dB, `10 log10(max² / MSE)`.
pub fn psnr(samples: &[Sample], mask: &Mask, max_val: f64) -> Result<Score> {
    let m = mse(samples, mask)?;
    Ok(psnr_from_mse(m, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> Score {
    if mse == 0.0 {
        Score::Exact
    } else {
        Score::Value(10.0 * (max_val * max_val / mse).log10())
    }
}
