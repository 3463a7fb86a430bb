//! Weighted multi-model averaging in grid space.
//!
//! Weights live on the probability simplex and are fitted by accelerated
//! projected gradient on the validation MSE. The objective is quadratic, so
//! fitting only needs the members' Gram matrix against each other and the
//! truth, which is accumulated in one pass over the runs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::grid::{GridArchive, SicGrid};
use crate::rollout::ForecastRun;
use crate::{Error, Result};

/// Member counts of the ranked tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Top 4.
    Rank1,
    /// Top 7.
    Rank2,
    /// Every member.
    Rank3,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Rank1, Tier::Rank2, Tier::Rank3];

    pub fn size(self, available: usize) -> usize {
        match self {
            Tier::Rank1 => available.min(4),
            Tier::Rank2 => available.min(7),
            Tier::Rank3 => available,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Rank1 => "rank1",
            Tier::Rank2 => "rank2",
            Tier::Rank3 => "rank3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown tier '{s}'")))
    }
}

/// Validation skill used to rank a candidate member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberScore {
    pub id: String,
    /// 180-day validation ACC.
    pub acc: f64,
    pub rmse: f64,
}

/// ACC descending, then RMSE ascending, then id. Undefined scores sort last.
pub fn rank_members(scores: &[MemberScore]) -> Vec<MemberScore> {
    let desc = |a: f64, b: f64| match (a.is_nan(), b.is_nan()) {
        (false, false) => b.partial_cmp(&a).unwrap_or(Ordering::Equal),
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (true, true) => Ordering::Equal,
    };
    let asc = |a: f64, b: f64| {
        desc(b, a).then_with(|| match (a.is_nan(), b.is_nan()) {
            (true, false) => Ordering::Greater,
            (false, true) => Ordering::Less,
            _ => Ordering::Equal,
        })
    };
    let mut v = scores.to_vec();
    v.sort_by(|a, b| {
        desc(a.acc, b.acc)
            .then_with(|| asc(a.rmse, b.rmse))
            .then_with(|| a.id.cmp(&b.id))
    });
    v
}

/// Euclidean projection onto `{w ≥ 0, Σw = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        css += uj;
        let t = (css - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// Second moments of member predictions and the truth over a fitting set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    /// `E[p_i p_j]`, row-major `m × m`.
    pub gram: Vec<f64>,
    /// `E[p_i t]`.
    pub cross: Vec<f64>,
    /// `E[t²]`.
    pub tt: f64,
    pub count: usize,
}

impl Moments {
    pub fn new(m: usize) -> Self {
        Self {
            gram: vec![0.0; m * m],
            cross: vec![0.0; m],
            tt: 0.0,
            count: 0,
        }
    }

    pub fn members(&self) -> usize {
        self.cross.len()
    }

    /// Adds one point: member predictions `p` and truth `t`.
    pub fn add(&mut self, p: &[f64], t: f64) {
        let m = self.members();
        for i in 0..m {
            self.cross[i] += p[i] * t;
            for j in i..m {
                self.gram[i * m + j] += p[i] * p[j];
            }
        }
        self.tt += t * t;
        self.count += 1;
    }

    fn finish(mut self) -> Result<Self> {
        if self.count == 0 {
            return Err(Error::EmptyRange("no fitting points".into()));
        }
        let m = self.members();
        let c = self.count as f64;
        for i in 0..m {
            for j in i..m {
                let v = self.gram[i * m + j] / c;
                self.gram[i * m + j] = v;
                self.gram[j * m + i] = v;
            }
            self.cross[i] /= c;
        }
        self.tt /= c;
        Ok(self)
    }

    /// Accumulates over paired runs: `members[k][r]` is member `k`'s run
    /// for the `r`-th init date. Every lead with an observed target counts.
    pub fn from_runs(members: &[&[ForecastRun]], archive: &GridArchive) -> Result<Self> {
        let m = members.len();
        if m == 0 {
            return Err(Error::InvalidConfig("no ensemble members".into()));
        }
        let n_runs = members[0].len();
        let idx = archive.mask().ocean_indices();
        let mut acc = Self::new(m);
        let mut p = vec![0.0; m];
        for r in 0..n_runs {
            let runs: Vec<&ForecastRun> = members
                .iter()
                .map(|k| {
                    k.get(r).ok_or_else(|| {
                        Error::InvalidData("members hold different run counts".into())
                    })
                })
                .collect::<Result<_>>()?;
            check_aligned(&runs)?;
            for lead in 0..runs[0].horizon() {
                let date = runs[0].grids[lead].date;
                let Some(truth) = archive.get(date) else {
                    continue;
                };
                for &i in idx {
                    for (k, run) in runs.iter().enumerate() {
                        p[k] = f64::from(run.grids[lead].values()[i]);
                    }
                    acc.add(&p, f64::from(truth.values()[i]));
                }
            }
        }
        acc.finish()
    }

    /// Builds moments directly from aligned flat arrays.
    pub fn from_arrays(preds: &[&[f64]], truth: &[f64]) -> Result<Self> {
        let m = preds.len();
        if preds.iter().any(|p| p.len() != truth.len()) {
            return Err(Error::shape(
                &[m, truth.len()],
                &[preds.iter().map(|p| p.len()).sum()],
            ));
        }
        let mut acc = Self::new(m);
        let mut p = vec![0.0; m];
        for (t_i, t) in truth.iter().enumerate() {
            for k in 0..m {
                p[k] = preds[k][t_i];
            }
            acc.add(&p, *t);
        }
        acc.finish()
    }

    /// Mean squared error of the `w`-weighted mean.
    pub fn mse(&self, w: &[f64]) -> f64 {
        let m = self.members();
        let mut q = 0.0;
        for i in 0..m {
            for j in 0..m {
                q += w[i] * self.gram[i * m + j] * w[j];
            }
        }
        let lin: f64 = w.iter().zip(&self.cross).map(|(a, b)| a * b).sum();
        (q - 2.0 * lin + self.tt).max(0.0)
    }

    fn grad(&self, w: &[f64]) -> Vec<f64> {
        let m = self.members();
        (0..m)
            .map(|i| {
                2.0 * ((0..m).map(|j| self.gram[i * m + j] * w[j]).sum::<f64>() - self.cross[i])
            })
            .collect()
    }

    /// Largest eigenvalue of the Gram matrix by power iteration.
    fn lipschitz(&self) -> f64 {
        let m = self.members();
        let mut v = vec![1.0 / (m as f64).sqrt(); m];
        let mut lam = 0.0;
        for _ in 0..200 {
            let w: Vec<f64> = (0..m)
                .map(|i| (0..m).map(|j| self.gram[i * m + j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lam = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        2.0 * lam
    }
}

fn check_aligned(runs: &[&ForecastRun]) -> Result<()> {
    let first = runs[0];
    for r in &runs[1..] {
        if r.init != first.init || r.horizon() != first.horizon() {
            return Err(Error::InvalidData(format!(
                "run {} at {} ({} days) does not match {} at {} ({} days)",
                r.model_id,
                r.init,
                r.horizon(),
                first.model_id,
                first.init,
                first.horizon()
            )));
        }
        if r.grids[0].mask() != first.grids[0].mask() {
            return Err(Error::InvalidData(format!(
                "run {} uses a different mask",
                r.model_id
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when one projected-gradient step from the iterate moves it
    /// less than this in max-norm.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: Vec<f64>,
    pub mse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The Gram matrix is singular, so other weights reach the same loss.
    pub degenerate: bool,
    pub member_mse: Vec<f64>,
}

/// Simplex-constrained least squares by accelerated projected gradient
/// (FISTA with function-value restarts) from uniform weights. The best point
/// seen, including the one-hot corners, is returned.
pub fn fit_simplex(mom: &Moments, opts: &FitOptions) -> WeightFit {
    let m = mom.members();
    let corners: Vec<Vec<f64>> = (0..m)
        .map(|k| (0..m).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let member_mse: Vec<f64> = corners.iter().map(|c| mom.mse(c)).collect();
    let l = mom.lipschitz();
    let mut w = vec![1.0 / m as f64; m];
    let mut best = (mom.mse(&w), w.clone());
    let mut iterations = 0;
    let mut converged = l == 0.0;
    if !converged {
        let step = 1.0 / l;
        let mut y = w.clone();
        let mut t = 1.0f64;
        let pg_step = |x: &[f64]| -> Vec<f64> {
            let g = mom.grad(x);
            project_simplex(
                &x.iter()
                    .zip(&g)
                    .map(|(a, b)| a - step * b)
                    .collect::<Vec<_>>(),
            )
        };
        let mut f_w = best.0;
        let mut restarted = false;
        for it in 1..=opts.max_iter {
            iterations = it;
            let next = pg_step(&y);
            let f = mom.mse(&next);
            if f < best.0 {
                best = (f, next.clone());
            }
            let residual = pg_step(&next)
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if residual < opts.tol {
                converged = true;
                break;
            }
            if f > f_w && !restarted {
                // Momentum overshot: retry from the last iterate. A plain
                // projected step is then taken even if rounding makes it
                // look uphill.
                t = 1.0;
                y = w.clone();
                restarted = true;
                continue;
            }
            restarted = false;
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            y = next
                .iter()
                .zip(&w)
                .map(|(a, b)| a + (t - 1.0) / t_next * (a - b))
                .collect();
            w = next;
            f_w = f;
            t = t_next;
        }
    }
    for c in corners {
        let f = mom.mse(&c);
        if f < best.0 {
            best = (f, c);
        }
    }
    let max_diag = (0..m).map(|i| mom.gram[i * m + i]).fold(0.0, f64::max);
    let degenerate =
        m > 1 && min_eigenvalue(&mom.gram, m) <= 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    WeightFit {
        weights: best.1,
        mse: best.0,
        iterations,
        converged,
        degenerate,
        member_mse,
    }
}

fn min_eigenvalue(gram: &[f64], m: usize) -> f64 {
    let g = nalgebra::DMatrix::from_row_slice(m, m, gram);
    g.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Members, weights and fit record of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub id: String,
    pub members: Vec<String>,
    pub weights: Vec<f64>,
    pub tier: Tier,
    pub selection_metric: String,
    pub fit: Option<WeightFit>,
}

impl EnsembleSpec {
    pub fn new(
        id: impl Into<String>,
        members: Vec<String>,
        weights: Vec<f64>,
        tier: Tier,
    ) -> Result<Self> {
        let spec = Self {
            id: id.into(),
            members,
            weights,
            tier,
            selection_metric: "acc_180".into(),
            fit: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() || self.members.len() != self.weights.len() {
            return Err(Error::InvalidConfig(format!(
                "{} members with {} weights",
                self.members.len(),
                self.weights.len()
            )));
        }
        let mut ids = self.members.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != self.members.len() {
            return Err(Error::InvalidConfig(
                "ensemble members must be distinct".into(),
            ));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "weights {:?} are not on the simplex",
                self.weights
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fits weights for the top members of `ranked` in `tier`. `runs[k]` holds
/// the fitting-set runs of `ranked[k]`.
pub fn fit_weights(
    ranked: &[MemberScore],
    runs: &[&[ForecastRun]],
    archive: &GridArchive,
    tier: Tier,
    opts: &FitOptions,
) -> Result<EnsembleSpec> {
    if ranked.len() != runs.len() {
        return Err(Error::shape(&[ranked.len()], &[runs.len()]));
    }
    let k = tier.size(ranked.len());
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "tier {} needs at least two members",
            tier.name()
        )));
    }
    let mom = Moments::from_runs(&runs[..k], archive)?;
    let fit = fit_simplex(&mom, opts);
    let mut spec = EnsembleSpec::new(
        format!("ensemble-{}", tier.name()),
        ranked[..k].iter().map(|m| m.id.clone()).collect(),
        fit.weights.clone(),
        tier,
    )?;
    spec.fit = Some(fit);
    Ok(spec)
}

/// Per-day, per-cell weighted mean of the member runs, clipped to `[0, 1]`.
/// Runs are matched to members by model id, so their order is irrelevant.
pub fn apply_ensemble(spec: &EnsembleSpec, runs: &[&ForecastRun]) -> Result<ForecastRun> {
    spec.validate()?;
    let ordered: Vec<&ForecastRun> = spec
        .members
        .iter()
        .map(|id| {
            runs.iter()
                .copied()
                .find(|r| r.model_id == *id)
                .ok_or_else(|| Error::InvalidData(format!("no run for member {id}")))
        })
        .collect::<Result<_>>()?;
    check_aligned(&ordered)?;
    let first = ordered[0];
    let mask = first.grids[0].mask().clone();
    let idx = mask.ocean_indices();
    let mut grids = Vec::with_capacity(first.horizon());
    for lead in 0..first.horizon() {
        let mut acc = vec![0.0f64; mask.len()];
        for (run, w) in ordered.iter().zip(&spec.weights) {
            let v = run.grids[lead].values();
            for &i in idx {
                acc[i] += w * f64::from(v[i]);
            }
        }
        grids.push(SicGrid::from_clipped(
            first.grids[lead].date,
            acc,
            mask.clone(),
        ));
    }
    let hash = format!(
        "{:08x}",
        crc32fast::hash(serde_json::to_string(spec)?.as_bytes())
    );
    ForecastRun::new(
        spec.id.clone(),
        first.init,
        0,
        Vec::new(),
        grids,
        hash,
        first.cell_area_km2,
    )
}
