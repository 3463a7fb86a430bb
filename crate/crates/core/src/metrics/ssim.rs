use super::{check_field, Sample, Score};
use crate::grid::Mask;
use crate::{Error, Result};

/// Side length of the square, uniformly weighted SSIM window.
pub const SSIM_WINDOW: usize = 7;
/// `(0.01 L)²` with dynamic range `L = 1`.
pub const SSIM_C1: f64 = 1e-4;
/// `(0.03 L)²` with dynamic range `L = 1`.
pub const SSIM_C2: f64 = 9e-4;

/// Mean SSIM over every 7×7 window lying entirely on ocean cells.
///
/// Window statistics use population (1/N) moments.
pub fn ssim_field(pred: &[f32], truth: &[f32], mask: &Mask) -> Result<Score> {
    check_field(pred, mask)?;
    check_field(truth, mask)?;
    let (rows, cols) = mask.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Ok(Score::Undefined);
    }

    // Column-wise run lengths of ocean cells let each window be tested in O(W).
    let mut ocean_run = vec![0usize; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            ocean_run[i] = if mask.is_ocean(i) {
                1 + if r > 0 { ocean_run[i - cols] } else { 0 }
            } else {
                0
            };
        }
    }

    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut windows) = (0.0, 0usize);
    for r0 in 0..=rows - SSIM_WINDOW {
        let bottom = r0 + SSIM_WINDOW - 1;
        'win: for c0 in 0..=cols - SSIM_WINDOW {
            for c in c0..c0 + SSIM_WINDOW {
                if ocean_run[bottom * cols + c] < SSIM_WINDOW {
                    continue 'win;
                }
            }
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let i = r * cols + c;
                    let x = f64::from(pred[i]);
                    let y = f64::from(truth[i]);
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = sxx / n - mx * mx;
            let vy = syy / n - my * my;
            let cxy = sxy / n - mx * my;
            let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            total += s;
            windows += 1;
        }
    }
    if windows == 0 {
        return Ok(Score::Undefined);
    }
    Ok(Score::Value((total / windows as f64).clamp(-1.0, 1.0)))
}

/// Mean of per-sample SSIM, skipping samples with no valid window.
pub fn ssim(samples: &[Sample], mask: &Mask) -> Result<Score> {
    if samples.is_empty() {
        return Err(Error::EmptyRange("no samples".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        if let Score::Value(v) = ssim_field(s.pred, s.truth, mask)? {
            sum += v;
            n += 1;
        }
    }
    Ok(if n == 0 {
        Score::Undefined
    } else {
        Score::Value(sum / n as f64)
    })
}
