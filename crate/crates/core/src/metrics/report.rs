use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{acc_field, psnr_from_mse, ssim_field, Score, EPS};
use crate::grid::Mask;
use crate::{Error, Result};

/// Metric names in report order.
pub const METRIC_NAMES: [&str; 8] = ["mse", "rmse", "mae", "nse", "r2", "acc", "psnr", "ssim"];

/// One forecast/truth pair with its lead and target date.
#[derive(Debug, Clone, Copy)]
pub struct EvalSample<'a> {
    pub lead: u32,
    pub target: NaiveDate,
    pub pred: &'a [f32],
    pub truth: &'a [f32],
    /// Climatology for the target day; without it the sample's ACC is skipped.
    pub clim: Option<&'a [f32]>,
}

pub type MetricMap = BTreeMap<String, Score>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_metric: MetricMap,
    pub per_lead: BTreeMap<u32, MetricMap>,
    /// Keyed by calendar month (1-12) of the target date.
    pub per_month: BTreeMap<u32, MetricMap>,
    pub n_samples: usize,
    /// Samples whose ACC was undefined and left out of the ACC mean.
    pub acc_skipped: usize,
}

impl MetricReport {
    pub fn get(&self, metric: &str) -> Score {
        self.per_metric
            .get(metric)
            .copied()
            .unwrap_or(Score::Undefined)
    }

    pub fn lead(&self, lead: u32, metric: &str) -> Score {
        self.per_lead
            .get(&lead)
            .and_then(|m| m.get(metric).copied())
            .unwrap_or(Score::Undefined)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV: `scope,key,metric,value`, one row per metric for the whole
    /// report, then per lead, then per month.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["scope", "key", "metric", "value"])?;
        let mut rows = |scope: &str, key: String, map: &MetricMap| -> Result<()> {
            for name in METRIC_NAMES {
                if let Some(v) = map.get(name) {
                    wtr.write_record([scope, &key, name, &v.to_string()])?;
                }
            }
            Ok(())
        };
        rows("all", String::new(), &self.per_metric)?;
        for (lead, m) in &self.per_lead {
            rows("lead", lead.to_string(), m)?;
        }
        for (month, m) in &self.per_month {
            rows("month", month.to_string(), m)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        let csv_path = csv_path.as_ref();
        let f = std::fs::File::create(csv_path).map_err(|e| Error::io(csv_path, e))?;
        self.write_csv(f)
    }
}

#[derive(Debug, Clone)]
struct GroupAcc {
    n_samples: usize,
    sse: f64,
    sae: f64,
    nse_den: f64,
    acc_sum: f64,
    acc_n: usize,
    acc_skipped: usize,
    ssim_sum: f64,
    ssim_n: usize,
    // Welford accumulators of the truth per ocean cell, for R².
    pix_mean: Vec<f64>,
    pix_m2: Vec<f64>,
}

impl GroupAcc {
    fn new(n_ocean: usize) -> Self {
        Self {
            n_samples: 0,
            sse: 0.0,
            sae: 0.0,
            nse_den: 0.0,
            acc_sum: 0.0,
            acc_n: 0,
            acc_skipped: 0,
            ssim_sum: 0.0,
            ssim_n: 0,
            pix_mean: vec![0.0; n_ocean],
            pix_m2: vec![0.0; n_ocean],
        }
    }

    fn add(&mut self, stats: &SampleStats, truth: &[f32], mask: &Mask) {
        self.n_samples += 1;
        self.sse += stats.sse;
        self.sae += stats.sae;
        self.nse_den += stats.spatial_ss;
        match stats.acc {
            Score::Value(v) => {
                self.acc_sum += v;
                self.acc_n += 1;
            }
            _ => self.acc_skipped += 1,
        }
        if let Some(s) = stats.ssim {
            self.ssim_sum += s;
            self.ssim_n += 1;
        }
        let k = self.n_samples as f64;
        for (j, &i) in mask.ocean_indices().iter().enumerate() {
            let y = f64::from(truth[i]);
            let delta = y - self.pix_mean[j];
            self.pix_mean[j] += delta / k;
            self.pix_m2[j] += delta * (y - self.pix_mean[j]);
        }
    }

    fn finish(&self, n_ocean: usize) -> MetricMap {
        let n = (self.n_samples * n_ocean) as f64;
        let mut m = MetricMap::new();
        if self.n_samples == 0 {
            for name in METRIC_NAMES {
                m.insert(name.to_string(), Score::Undefined);
            }
            return m;
        }
        let mse = self.sse / n;
        let ratio = |den: f64| {
            if den < EPS {
                Score::Undefined
            } else {
                Score::Value(1.0 - self.sse / den)
            }
        };
        let r2_den: f64 = self.pix_m2.iter().sum();
        m.insert("mse".into(), Score::Value(mse));
        m.insert("rmse".into(), Score::Value(mse.sqrt()));
        m.insert("mae".into(), Score::Value(self.sae / n));
        m.insert("nse".into(), ratio(self.nse_den));
        m.insert("r2".into(), ratio(r2_den));
        m.insert(
            "acc".into(),
            if self.acc_n == 0 {
                Score::Undefined
            } else {
                Score::Value(self.acc_sum / self.acc_n as f64)
            },
        );
        m.insert("psnr".into(), psnr_from_mse(mse, 1.0));
        m.insert(
            "ssim".into(),
            if self.ssim_n == 0 {
                Score::Undefined
            } else {
                Score::Value(self.ssim_sum / self.ssim_n as f64)
            },
        );
        m
    }
}

struct SampleStats {
    sse: f64,
    sae: f64,
    spatial_ss: f64,
    acc: Score,
    ssim: Option<f64>,
}

/// Streams samples into overall, per-lead and per-target-month groups.
///
/// Samples are reduced in insertion order, so the same inputs always give
/// the same report.
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    mask: std::sync::Arc<Mask>,
    with_ssim: bool,
    all: GroupAcc,
    leads: BTreeMap<u32, GroupAcc>,
    months: BTreeMap<u32, GroupAcc>,
}

impl ReportBuilder {
    pub fn new(mask: std::sync::Arc<Mask>) -> Self {
        let n = mask.ocean_count();
        Self {
            mask,
            with_ssim: true,
            all: GroupAcc::new(n),
            leads: BTreeMap::new(),
            months: BTreeMap::new(),
        }
    }

    /// Skips the windowed SSIM, which dominates the cost on large grids.
    pub fn without_ssim(mut self) -> Self {
        self.with_ssim = false;
        self
    }

    pub fn add(&mut self, s: &EvalSample) -> Result<()> {
        let mask = &*self.mask;
        if mask.ocean_count() == 0 {
            return Err(Error::EmptyMask);
        }
        super::check_field(s.pred, mask)?;
        super::check_field(s.truth, mask)?;
        let idx = mask.ocean_indices();
        let (mut sse, mut sae, mut tsum) = (0.0, 0.0, 0.0);
        for &i in idx {
            let t = f64::from(s.truth[i]);
            let e = t - f64::from(s.pred[i]);
            sse += e * e;
            sae += e.abs();
            tsum += t;
        }
        let tmean = tsum / idx.len() as f64;
        let spatial_ss = idx
            .iter()
            .map(|&i| (f64::from(s.truth[i]) - tmean).powi(2))
            .sum();
        let acc = match s.clim {
            Some(c) => acc_field(s.pred, s.truth, c, mask)?,
            None => Score::Undefined,
        };
        let ssim = if self.with_ssim {
            ssim_field(s.pred, s.truth, mask)?.value()
        } else {
            None
        };
        let stats = SampleStats {
            sse,
            sae,
            spatial_ss,
            acc,
            ssim,
        };
        let n = idx.len();
        self.all.add(&stats, s.truth, mask);
        self.leads
            .entry(s.lead)
            .or_insert_with(|| GroupAcc::new(n))
            .add(&stats, s.truth, mask);
        self.months
            .entry(s.target.month())
            .or_insert_with(|| GroupAcc::new(n))
            .add(&stats, s.truth, mask);
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let n = self.mask.ocean_count();
        MetricReport {
            per_metric: self.all.finish(n),
            per_lead: self.leads.iter().map(|(k, g)| (*k, g.finish(n))).collect(),
            per_month: self.months.iter().map(|(k, g)| (*k, g.finish(n))).collect(),
            n_samples: self.all.n_samples,
            acc_skipped: self.all.acc_skipped,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn d(m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, m, day).unwrap()
    }

    #[test]
    fn two_leads_pool_to_mean_mse() {
        let mask = Arc::new(Mask::all_ocean(2, 2));
        let truth = vec![0.5f32; 4];
        let p1 = vec![0.5f32 + 0.1; 4];
        let p3 = vec![0.5f32 + 0.3f32.sqrt() / 10f32.sqrt(); 4];
        let mut b = ReportBuilder::new(mask);
        for (lead, p) in [(1, &p1), (2, &p3)] {
            b.add(&EvalSample {
                lead,
                target: d(1, lead),
                pred: p,
                truth: &truth,
                clim: None,
            })
            .unwrap();
        }
        let r = b.finish();
        assert!((r.lead(1, "mse").as_f64() - 0.01).abs() < 1e-7);
        assert!((r.lead(2, "mse").as_f64() - 0.03).abs() < 1e-7);
        assert!((r.get("mse").as_f64() - 0.02).abs() < 1e-7);
        assert_eq!(r.get("acc"), Score::Undefined);
        assert_eq!(r.acc_skipped, 2);
    }

    #[test]
    fn month_keyed_by_target_date() {
        // Three forecasts initialised in January; targets land in Jan, Feb, Mar.
        let mask = Arc::new(Mask::all_ocean(2, 2));
        let truth = vec![0.2f32, 0.4, 0.6, 0.8];
        let pred = vec![0.25f32, 0.4, 0.6, 0.8];
        let mut b = ReportBuilder::new(mask);
        for (lead, target) in [(10u32, d(1, 25)), (25, d(2, 9)), (60, d(3, 16))] {
            b.add(&EvalSample {
                lead,
                target,
                pred: &pred,
                truth: &truth,
                clim: None,
            })
            .unwrap();
        }
        let r = b.finish();
        assert_eq!(
            r.per_month.keys().copied().collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(r.n_samples, 3);
    }

    #[test]
    fn csv_has_row_per_group_metric() {
        let mask = Arc::new(Mask::all_ocean(2, 2));
        let t = vec![0.2f32, 0.4, 0.6, 0.8];
        let mut b = ReportBuilder::new(mask);
        b.add(&EvalSample {
            lead: 1,
            target: d(5, 1),
            pred: &t,
            truth: &t,
            clim: None,
        })
        .unwrap();
        let mut out = Vec::new();
        b.finish().write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * 8);
        assert!(text.contains("lead,1,mse,0"));
        assert!(text.contains("month,5,psnr,exact"));
    }
}
