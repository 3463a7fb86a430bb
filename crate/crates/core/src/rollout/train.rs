//! Chained-stage training with teacher forcing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RolloutConfig;
use crate::autodiff::{adam_step, OptimState, Tape, Var};
use crate::backbones::{day_number, LatentForecaster};
use crate::grid::DateRange;
use crate::latent::LatentSeries;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0-based; the forcing ratio is evaluated at this index.
    pub epoch: usize,
    pub ratio: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rollout: RolloutConfig,
    pub n_train_samples: usize,
    pub n_val_samples: usize,
    /// True when the validation range held no complete sample and the
    /// training samples stood in.
    pub val_on_train: bool,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    /// `None` when no epoch beat the initial weights.
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochStats>,
}

/// Values seen while unrolling one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrollOutput {
    pub loss: f64,
    /// Stage inputs, `[samples·dim, n]` row-major, normalised.
    pub inputs: Vec<Vec<f64>>,
    /// Stage outputs, `[samples·dim, p]`.
    pub outputs: Vec<Vec<f64>>,
    /// Parameter gradients in store order; empty unless requested.
    pub grads: Vec<Vec<f64>>,
}

/// Normalised series plus the day numbers used for cycle lookup.
pub(crate) struct SeriesView {
    z: Vec<f64>,
    dim: usize,
    days: Vec<i64>,
}

impl SeriesView {
    pub(crate) fn new(series: &LatentSeries) -> Self {
        Self {
            z: series.normalized(),
            dim: series.dim,
            days: series.dates.iter().map(|d| day_number(*d)).collect(),
        }
    }

    /// Rows `(sample, channel)`, columns `len` days from `start + offset`.
    fn rows(&self, idx: &[usize], offset: usize, len: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = Vec::with_capacity(idx.len() * d * len);
        for &i in idx {
            for c in 0..d {
                out.extend((0..len).map(|j| self.z[(i + offset + j) * d + c]));
            }
        }
        out
    }
}

/// Window starts whose `span` consecutive days lie inside `range`.
pub(crate) fn sample_starts(
    series: &LatentSeries,
    range: DateRange,
    span: usize,
    stride: usize,
) -> Vec<usize> {
    let dates = &series.dates;
    let lo = dates.partition_point(|d| *d < range.start);
    let mut out = Vec::new();
    let mut i = lo;
    while i + span <= dates.len() {
        let last = dates[i + span - 1];
        if last > range.end {
            break;
        }
        if (last - dates[i]).num_days() == span as i64 - 1 {
            out.push(i);
            i += stride;
        } else {
            i += 1;
        }
    }
    out
}

/// Stage inputs and outputs recorded while unrolling.
type Trace = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn unroll(
    model: &LatentForecaster,
    t: &mut Tape,
    view: &SeriesView,
    idx: &[usize],
    rc: &RolloutConfig,
    forced: &[Vec<bool>],
    trace: Option<&mut Trace>,
) -> Result<Var> {
    let (n, p, h) = (rc.n, rc.p, rc.horizon);
    let rows = idx.len() * view.dim;
    let day0: Vec<i64> = idx.iter().map(|&i| view.days[i]).collect();
    let mut x = t.constant_from(&[rows, n], view.rows(idx, 0, n))?;
    let mut total: Option<Var> = None;
    let mut trace = trace;
    for k in 0..rc.n_rolls {
        let starts: Vec<i64> = day0.iter().map(|d| d + (k * p) as i64).collect();
        let out = model.forward(t, x, &starts)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.0.push(t.value(x).to_vec());
            tr.1.push(t.value(out).to_vec());
        }
        let steps = p.min(h - k * p);
        let pred = if steps == p {
            out
        } else {
            t.slice(out, 1, 0, steps)?
        };
        let truth = t.constant_from(&[rows, steps], view.rows(idx, n + k * p, steps))?;
        let l = t.mse_loss(pred, truth)?;
        let l = t.scale(l, steps as f64 / h as f64);
        total = Some(match total {
            None => l,
            Some(acc) => t.add(acc, l)?,
        });
        if k + 1 == rc.n_rolls {
            break;
        }
        let Some(f) = forced.get(k) else { break };
        let truth_in = || view.rows(idx, (k + 1) * p, n);
        if f.iter().all(|b| *b) {
            x = t.constant_from(&[rows, n], truth_in())?;
            continue;
        }
        let fed = if rc.truncate_gradients {
            t.detach(out)
        } else {
            out
        };
        let model_in = if p >= n {
            t.slice(fed, 1, p - n, n)?
        } else {
            let tail = t.slice(x, 1, p, n - p)?;
            t.concat(&[tail, fed], 1)?
        };
        x = if f.iter().any(|b| *b) {
            let m: Vec<f64> = f
                .iter()
                .flat_map(|&b| std::iter::repeat_n(if b { 1.0 } else { 0.0 }, view.dim * n))
                .collect();
            let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
            let m = t.constant_from(&[rows, n], m)?;
            let inv = t.constant_from(&[rows, n], inv)?;
            let truth = t.constant_from(&[rows, n], truth_in())?;
            let a = t.mul(truth, m)?;
            let b = t.mul(model_in, inv)?;
            t.add(a, b)?
        } else {
            model_in
        };
    }
    total.ok_or_else(|| Error::InvalidConfig("n_rolls must be positive".into()))
}

fn draw_forcing(
    rng: &mut ChaCha8Rng,
    ratio: f64,
    boundaries: usize,
    samples: usize,
) -> Vec<Vec<bool>> {
    (0..boundaries)
        .map(|_| (0..samples).map(|_| rng.random_bool(ratio)).collect())
        .collect()
}

fn check_compatible(
    model: &LatentForecaster,
    series: &LatentSeries,
    rc: &RolloutConfig,
) -> Result<()> {
    rc.validate()?;
    if model.cfg.n != rc.n || model.cfg.p != rc.p {
        return Err(Error::InvalidConfig(format!(
            "rollout window {}/{} does not match model {}/{}",
            rc.n, rc.p, model.cfg.n, model.cfg.p
        )));
    }
    if model.dim != series.dim {
        return Err(Error::shape(&[model.dim], &[series.dim]));
    }
    Ok(())
}

/// Unrolls one batch whose windows start at the given series indices.
/// `forced[k][s]` chooses the truth as input to stage `k + 1` of sample `s`.
pub fn unroll_batch(
    model: &LatentForecaster,
    series: &LatentSeries,
    starts: &[usize],
    rc: &RolloutConfig,
    forced: &[Vec<bool>],
    with_grads: bool,
) -> Result<UnrollOutput> {
    check_compatible(model, series, rc)?;
    let span = rc.n + rc.horizon;
    if starts.iter().any(|&i| i + span > series.len()) {
        return Err(Error::InsufficientHistory(format!(
            "batch needs {span} days per sample"
        )));
    }
    if forced.len() + 1 < rc.n_rolls || forced.iter().any(|f| f.len() != starts.len()) {
        return Err(Error::shape(
            &[rc.n_rolls - 1, starts.len()],
            &[forced.len()],
        ));
    }
    let view = SeriesView::new(series);
    let mut t = Tape::new();
    let mut tr = (Vec::new(), Vec::new());
    let loss = unroll(model, &mut t, &view, starts, rc, forced, Some(&mut tr))?;
    let value = t.value(loss)[0];
    let grads = if with_grads {
        let g = t.backward(loss)?;
        let mut store = model.store.clone();
        store.zero_grad();
        g.apply(&mut store);
        store
            .iter()
            .map(|(_, p)| p.grad.clone().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    } else {
        Vec::new()
    };
    Ok(UnrollOutput {
        loss: value,
        inputs: tr.0,
        outputs: tr.1,
        grads,
    })
}

/// Free-running loss averaged over samples.
fn evaluate(
    model: &LatentForecaster,
    view: &SeriesView,
    idx: &[usize],
    rc: &RolloutConfig,
) -> Result<f64> {
    let bs = model.cfg.batch_size;
    let none: Vec<Vec<bool>> = vec![vec![false; bs]; rc.n_rolls.saturating_sub(1)];
    let mut sum = 0.0;
    for chunk in idx.chunks(bs) {
        let forced: Vec<Vec<bool>> = none.iter().map(|f| f[..chunk.len()].to_vec()).collect();
        let mut t = Tape::new();
        let l = unroll(model, &mut t, view, chunk, rc, &forced, None)?;
        sum += t.value(l)[0] * chunk.len() as f64;
    }
    Ok(sum / idx.len() as f64)
}

/// Trains `model` over chained stages with the forcing schedule of `rc`,
/// keeping the weights with the best free-running validation loss.
pub fn train_autoregressive(
    mut model: LatentForecaster,
    series: &LatentSeries,
    train: DateRange,
    val: DateRange,
    rc: &RolloutConfig,
) -> Result<LatentForecaster> {
    check_compatible(&model, series, rc)?;
    let cfg = model.cfg.clone();
    let span = rc.n + rc.horizon;
    let tr = sample_starts(series, train, span, cfg.sample_stride);
    if tr.is_empty() {
        return Err(Error::InsufficientHistory(format!(
            "training needs {span} consecutive days inside {train}"
        )));
    }
    let mut va = sample_starts(series, val, span, cfg.sample_stride);
    let val_on_train = va.is_empty();
    if val_on_train {
        log::warn!("no complete validation sample in {val}; validating on training samples");
        va = tr.clone();
    }
    let view = SeriesView::new(series);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rc.seed);
    let mut forcing_rng = ChaCha8Rng::seed_from_u64(rc.seed);
    forcing_rng.set_stream(1);

    let initial_train_loss = evaluate(&model, &view, &tr, rc)?;
    let initial_val_loss = evaluate(&model, &view, &va, rc)?;
    if !initial_val_loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            trace: vec![initial_train_loss],
        });
    }
    let mut best = (initial_val_loss, model.store.clone(), None);
    let mut since = 0;
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut opt = OptimState::new();
    let mut order = tr.clone();
    for epoch in 0..cfg.max_epochs {
        let ratio = rc.forcing.ratio(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let forced = draw_forcing(&mut forcing_rng, ratio, rc.n_rolls - 1, chunk.len());
            let mut t = Tape::new();
            let loss = unroll(&model, &mut t, &view, chunk, rc, &forced, None)?;
            let lv = t.value(loss)[0];
            sum += lv * chunk.len() as f64;
            if !lv.is_finite() {
                break;
            }
            t.backward(loss)?.apply(&mut model.store);
            adam_step(&mut model.store, &mut opt, cfg.lr)?;
        }
        let train_loss = sum / tr.len() as f64;
        trace.push(train_loss);
        if !train_loss.is_finite() || !model.store.all_finite() {
            return Err(Error::Diverged { epoch, trace });
        }
        let val_loss = evaluate(&model, &view, &va, rc)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, trace });
        }
        log::debug!(
            "{} epoch {epoch}: ratio {ratio:.3} train {train_loss:.6} val {val_loss:.6}",
            model.id
        );
        history.push(EpochStats {
            epoch,
            ratio,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, model.store.clone(), Some(epoch));
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    model.store = best.1;
    model.report = Some(TrainReport {
        rollout: rc.clone(),
        n_train_samples: tr.len(),
        n_val_samples: va.len(),
        val_on_train,
        initial_train_loss,
        initial_val_loss,
        best_val_loss: best.0,
        best_epoch: best.2,
        history,
    });
    Ok(model)
}
