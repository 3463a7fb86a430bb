use serde::{Deserialize, Serialize};

use super::Score;
use crate::{Error, Result};

/// Yearly-series skill with and without linear trends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetrendedStats {
    /// RMSE between the two series after each has its own trend removed.
    pub rmse_detrend: Score,
    /// Correlation of the detrended residuals.
    pub acc_detrend: Score,
    /// Correlation of raw anomalies about the mean of the truth series.
    pub acc: Score,
}

/// Least-squares line through `(i, y[i])`; returns `(intercept, slope)`.
pub fn linear_fit(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (v - ym);
        sxx += dx * dx;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (ym - slope * xm, slope)
}

fn residuals(y: &[f64]) -> Vec<f64> {
    let (a, b) = linear_fit(y);
    y.iter()
        .enumerate()
        .map(|(i, v)| v - (a + b * i as f64))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Correlation that is undefined when either vector is negligible relative
/// to the scale of the series it came from.
fn correlation(a: &[f64], b: &[f64], scale_a: f64, scale_b: f64) -> Score {
    let (na, nb) = (norm(a), norm(b));
    let tiny = |n: f64, scale: f64| n <= 1e-10 * scale.max(1.0) || n < super::EPS;
    if tiny(na, scale_a) || tiny(nb, scale_b) {
        return Score::Undefined;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Score::Value((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn detrended_metrics(pred: &[f64], truth: &[f64]) -> Result<DetrendedStats> {
    if pred.len() != truth.len() {
        return Err(Error::shape(&[truth.len()], &[pred.len()]));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(
            "non-finite value in yearly series".into(),
        ));
    }
    let (sp, st) = (norm(pred), norm(truth));

    let acc = if truth.is_empty() {
        Score::Undefined
    } else {
        let m = truth.iter().sum::<f64>() / truth.len() as f64;
        let pa: Vec<f64> = pred.iter().map(|v| v - m).collect();
        let ta: Vec<f64> = truth.iter().map(|v| v - m).collect();
        correlation(&pa, &ta, sp, st)
    };

    if pred.len() < 3 {
        return Ok(DetrendedStats {
            rmse_detrend: Score::Undefined,
            acc_detrend: Score::Undefined,
            acc,
        });
    }
    let rp = residuals(pred);
    let rt = residuals(truth);
    let mse = rp
        .iter()
        .zip(&rt)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / rp.len() as f64;
    Ok(DetrendedStats {
        rmse_detrend: Score::Value(mse.sqrt()),
        acc_detrend: correlation(&rp, &rt, sp, st),
        acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_hand_regression() {
        // Residuals worked by hand: truth slope -0.11, pred slope -0.07.
        let truth = [5.0, 4.8, 4.9, 4.6];
        let pred = [4.9, 4.9, 4.8, 4.7];
        let s = detrended_metrics(&pred, &truth).unwrap();
        assert!((s.rmse_detrend.value().unwrap() - 0.008f64.sqrt()).abs() < 1e-12);
        assert!((s.acc_detrend.value().unwrap() + 1.0 / 9.0).abs() < 1e-10);
        let acc = 0.0375 / (0.0275f64 * 0.0875).sqrt();
        assert!((s.acc.value().unwrap() - acc).abs() < 1e-10);
    }

    #[test]
    fn perfect_prediction() {
        let t = [3.0, 2.5, 2.9, 2.2, 2.4];
        let s = detrended_metrics(&t, &t).unwrap();
        assert_eq!(s.rmse_detrend, Score::Value(0.0));
        assert!((s.acc_detrend.value().unwrap() - 1.0).abs() < 1e-12);
        assert!((s.acc.value().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_absorbed_by_intercept() {
        let t = [3.0, 2.5, 2.9, 2.2, 2.4];
        let p: Vec<f64> = t.iter().map(|v| v + 0.7).collect();
        let s = detrended_metrics(&p, &t).unwrap();
        assert!(s.rmse_detrend.value().unwrap() < 1e-12);
    }

    #[test]
    fn fewer_than_three_years_undefined() {
        let s = detrended_metrics(&[1.0, 2.0], &[1.0, 2.5]).unwrap();
        assert_eq!(s.rmse_detrend, Score::Undefined);
        assert_eq!(s.acc_detrend, Score::Undefined);
        assert!(s.acc.is_defined());
    }

    #[test]
    fn perfect_line_truth_has_undefined_residual_correlation() {
        let t: Vec<f64> = (0..6).map(|i| 5.0 - 0.1 * i as f64).collect();
        let p = [4.91, 4.95, 4.7, 4.72, 4.6, 4.4];
        assert_eq!(
            detrended_metrics(&p, &t).unwrap().acc_detrend,
            Score::Undefined
        );
    }
}
