//! Hierarchical patch autoencoder.
//!
//! Encoder: 2×2 patch embedding, then `stages` levels of per-position MLP
//! mixing. Every level after the first starts with a 2×2 patch merge that
//! halves the resolution and doubles the channels. The coarsest feature map
//! is flattened and mapped to the latent vector by a two-layer MLP. The
//! decoder mirrors this with depth-to-space upsampling.
//!
//! Grids are reflect-padded at the bottom and right to a multiple of
//! `2^stages`; padded and non-ocean cells are excluded from the loss.

use std::sync::Arc;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, reflect_index, Init, Linear, OptimState, ParamStore, Tape, Var};
use crate::grid::{DateRange, GridArchive, Mask, SicGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub latent_dim: usize,
    /// Patch side of the embedding; only 2 is supported.
    pub patch: usize,
    pub stages: usize,
    /// Channels after the patch embedding; doubled at every later stage.
    pub base_channels: usize,
    /// Hidden width of the per-position mixing MLP, as a multiple of the channels.
    pub mlp_ratio: usize,
    /// Width of the MLP between the flattened feature map and the latent.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Trailing fraction of the range held out for checkpoint selection.
    pub val_fraction: f64,
    /// Use every n-th training day.
    pub day_stride: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            patch: 2,
            stages: 4,
            base_channels: 8,
            mlp_ratio: 2,
            hidden: 256,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            val_fraction: 0.15,
            day_stride: 1,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.patch != 2 {
            return bad("autoencoder patch must be 2");
        }
        if self.stages == 0 || self.stages > 8 {
            return bad("autoencoder stages must be in 1..=8");
        }
        if self.latent_dim == 0
            || self.base_channels == 0
            || self.mlp_ratio == 0
            || self.hidden == 0
        {
            return bad("autoencoder widths must be positive");
        }
        if self.batch_size == 0 || self.day_stride == 0 {
            return bad("batch_size and day_stride must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Grid ↔ padded-network-input mapping.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Geometry {
    pub rows: usize,
    pub cols: usize,
    pub prow: usize,
    pub pcol: usize,
    /// Source cell for every padded cell.
    src: Vec<usize>,
    /// Padded position of every ocean cell, in ocean order.
    ocean_pos: Vec<usize>,
}

impl Geometry {
    fn new(mask: &Mask, stages: usize) -> Self {
        let (rows, cols) = mask.shape();
        let m = 1usize << stages;
        let prow = rows.div_ceil(m) * m;
        let pcol = cols.div_ceil(m) * m;
        let mut src = Vec::with_capacity(prow * pcol);
        for r in 0..prow {
            for c in 0..pcol {
                src.push(reflect_index(r as isize, rows) * cols + reflect_index(c as isize, cols));
            }
        }
        let ocean_pos = mask
            .ocean_indices()
            .iter()
            .map(|&i| (i / cols) * pcol + i % cols)
            .collect();
        Self {
            rows,
            cols,
            prow,
            pcol,
            src,
            ocean_pos,
        }
    }

    pub fn padding(&self) -> (usize, usize) {
        (self.prow - self.rows, self.pcol - self.cols)
    }

    fn cells(&self) -> usize {
        self.prow * self.pcol
    }
}

/// Space-to-depth: `[b·h·w, c]` → `[b·(h/2)·(w/2), 4c]`.
fn merge_index(b: usize, h: usize, w: usize, c: usize) -> Arc<[usize]> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h2 {
            for x in 0..w2 {
                for k in 0..4 {
                    let (dy, dx) = (k / 2, k % 2);
                    let base = ((bi * h + 2 * y + dy) * w + 2 * x + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx.into()
}

/// Depth-to-space: `[b·(h/2)·(w/2), 4c]` → `[b·h·w, c]`.
fn split_index(b: usize, h: usize, w: usize, c: usize) -> Arc<[usize]> {
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let k = (y % 2) * 2 + x % 2;
                let base = ((bi * h2 + y / 2) * w2 + x / 2) * 4 * c + k * c;
                idx.extend(base..base + c);
            }
        }
    }
    idx.into()
}

struct BatchIndex {
    batch: usize,
    embed: Arc<[usize]>,
    merge: Vec<Arc<[usize]>>,
    split: Vec<Arc<[usize]>>,
    unembed: Arc<[usize]>,
    loss: Arc<[usize]>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    embed: Linear,
    enc_mix: Vec<(Linear, Linear)>,
    merge: Vec<Linear>,
    to_hidden: Linear,
    to_latent: Linear,
    from_latent: Linear,
    from_hidden: Linear,
    dec_mix: Vec<(Linear, Linear)>,
    up: Vec<Linear>,
    unembed: Linear,
}

/// Trained autoencoder and its input normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub(crate) mask: Arc<Mask>,
    pub(crate) cfg: AeConfig,
    pub(crate) geom: Geometry,
    pub(crate) store: ParamStore,
    layers: Layers,
    /// Per-cell training mean (zero off the ocean).
    pub(crate) cell_mean: Vec<f64>,
    /// Single scale applied to all anomalies.
    pub(crate) scale: f64,
    pub train_range: DateRange,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl Autoencoder {
    /// Builds an untrained network with seeded weights.
    pub(crate) fn init(
        mask: Arc<Mask>,
        cfg: AeConfig,
        cell_mean: Vec<f64>,
        scale: f64,
        train_range: DateRange,
    ) -> Result<Self> {
        cfg.validate()?;
        if mask.ocean_count() == 0 {
            return Err(Error::EmptyMask);
        }
        if cfg.latent_dim >= mask.ocean_count() {
            return Err(Error::InvalidConfig(format!(
                "latent_dim {} must be below the {} ocean cells",
                cfg.latent_dim,
                mask.ocean_count()
            )));
        }
        let geom = Geometry::new(&mask, cfg.stages);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let g = Init::Glorot;
        let mix = |s: &mut ParamStore,
                   name: &str,
                   c: usize,
                   rng: &mut ChaCha8Rng|
         -> Result<(Linear, Linear)> {
            Ok((
                Linear::new(s, &format!("{name}.fc1"), c, c * cfg.mlp_ratio, g, rng)?,
                Linear::new(s, &format!("{name}.fc2"), c * cfg.mlp_ratio, c, g, rng)?,
            ))
        };
        let last = cfg.stages - 1;
        let flat = (geom.prow >> cfg.stages) * (geom.pcol >> cfg.stages) * cfg.channels(last);
        let embed = Linear::new(s, "enc.embed", 4, cfg.channels(0), g, &mut rng)?;
        let mut enc_mix = Vec::new();
        let mut merge = Vec::new();
        for st in 0..cfg.stages {
            if st > 0 {
                let c = cfg.channels(st - 1);
                merge.push(Linear::new(
                    s,
                    &format!("enc.merge{st}"),
                    4 * c,
                    2 * c,
                    g,
                    &mut rng,
                )?);
            }
            enc_mix.push(mix(s, &format!("enc.mix{st}"), cfg.channels(st), &mut rng)?);
        }
        let to_hidden = Linear::new(s, "enc.hidden", flat, cfg.hidden, g, &mut rng)?;
        let to_latent = Linear::new(s, "enc.latent", cfg.hidden, cfg.latent_dim, g, &mut rng)?;
        let from_latent = Linear::new(s, "dec.hidden", cfg.latent_dim, cfg.hidden, g, &mut rng)?;
        let from_hidden = Linear::new(s, "dec.unflat", cfg.hidden, flat, g, &mut rng)?;
        let mut dec_mix = Vec::new();
        let mut up = Vec::new();
        for st in (0..cfg.stages).rev() {
            dec_mix.push(mix(s, &format!("dec.mix{st}"), cfg.channels(st), &mut rng)?);
            if st > 0 {
                let c = cfg.channels(st - 1);
                up.push(Linear::new(
                    s,
                    &format!("dec.up{st}"),
                    2 * c,
                    4 * c,
                    g,
                    &mut rng,
                )?);
            }
        }
        dec_mix.reverse();
        up.reverse();
        let unembed = Linear::new(s, "dec.unembed", cfg.channels(0), 4, g, &mut rng)?;
        Ok(Self {
            mask,
            cfg,
            geom,
            store,
            layers: Layers {
                embed,
                enc_mix,
                merge,
                to_hidden,
                to_latent,
                from_latent,
                from_hidden,
                dec_mix,
                up,
                unembed,
            },
            cell_mean,
            scale,
            train_range,
            history: Vec::new(),
            best_epoch: 0,
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.cfg
    }

    pub fn padding(&self) -> (usize, usize) {
        self.geom.padding()
    }

    pub fn n_params(&self) -> usize {
        self.store.n_values()
    }

    fn resolution(&self, stage: usize) -> (usize, usize) {
        (self.geom.prow >> (stage + 1), self.geom.pcol >> (stage + 1))
    }

    fn batch_index(&self, b: usize) -> BatchIndex {
        let (prow, pcol) = (self.geom.prow, self.geom.pcol);
        let p = self.geom.cells();
        let mut merge = Vec::new();
        let mut split = Vec::new();
        for st in 1..self.cfg.stages {
            let (h, w) = self.resolution(st - 1);
            let c = self.cfg.channels(st - 1);
            merge.push(merge_index(b, h, w, c));
            split.push(split_index(b, h, w, c));
        }
        let loss: Vec<usize> = (0..b)
            .flat_map(|bi| self.geom.ocean_pos.iter().map(move |q| bi * p + q))
            .collect();
        BatchIndex {
            batch: b,
            embed: merge_index(b, prow, pcol, 1),
            merge,
            split,
            unembed: split_index(b, prow, pcol, 1),
            loss: loss.into(),
        }
    }

    fn mix(&self, t: &mut Tape, h: Var, layer: &(Linear, Linear)) -> Result<Var> {
        let a = layer.0.forward(t, &self.store, h)?;
        let a = t.gelu(a);
        let a = layer.1.forward(t, &self.store, a)?;
        t.add(h, a)
    }

    /// `[B, prow·pcol]` normalised input → `[B, latent]`.
    fn encode_tape(&self, t: &mut Tape, x: Var, ix: &BatchIndex) -> Result<Var> {
        let b = ix.batch;
        let l = &self.layers;
        let (h1, w1) = self.resolution(0);
        let mut h = t.gather(x, ix.embed.clone(), &[b * h1 * w1, 4])?;
        h = l.embed.forward(t, &self.store, h)?;
        h = self.mix(t, h, &l.enc_mix[0])?;
        for st in 1..self.cfg.stages {
            let (hh, ww) = self.resolution(st);
            let c = self.cfg.channels(st - 1);
            h = t.gather(h, ix.merge[st - 1].clone(), &[b * hh * ww, 4 * c])?;
            h = l.merge[st - 1].forward(t, &self.store, h)?;
            h = self.mix(t, h, &l.enc_mix[st])?;
        }
        let flat = l.to_hidden.fan_in;
        h = t.reshape(h, &[b, flat])?;
        h = l.to_hidden.forward(t, &self.store, h)?;
        h = t.gelu(h);
        l.to_latent.forward(t, &self.store, h)
    }

    /// `[B, latent]` → `[B, prow·pcol]` normalised output.
    fn decode_tape(&self, t: &mut Tape, z: Var, ix: &BatchIndex) -> Result<Var> {
        let b = ix.batch;
        let l = &self.layers;
        let last = self.cfg.stages - 1;
        let (hl, wl) = self.resolution(last);
        let mut h = l.from_latent.forward(t, &self.store, z)?;
        h = t.gelu(h);
        h = l.from_hidden.forward(t, &self.store, h)?;
        h = t.reshape(h, &[b * hl * wl, self.cfg.channels(last)])?;
        for st in (0..self.cfg.stages).rev() {
            h = self.mix(t, h, &l.dec_mix[st])?;
            if st > 0 {
                let (hh, ww) = self.resolution(st - 1);
                let c = self.cfg.channels(st - 1);
                h = l.up[st - 1].forward(t, &self.store, h)?;
                h = t.gather(h, ix.split[st - 1].clone(), &[b * hh * ww, c])?;
            }
        }
        h = l.unembed.forward(t, &self.store, h)?;
        t.gather(h, ix.unembed.clone(), &[b, self.geom.cells()])
    }

    /// Normalised, padded network input for one day.
    fn input(&self, values: &[f32]) -> Vec<f64> {
        self.geom
            .src
            .iter()
            .map(|&s| {
                if self.mask.is_ocean(s) {
                    (f64::from(values[s]) - self.cell_mean[s]) / self.scale
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn target(&self, values: &[f32]) -> Vec<f64> {
        self.mask
            .ocean_indices()
            .iter()
            .map(|&i| (f64::from(values[i]) - self.cell_mean[i]) / self.scale)
            .collect()
    }

    pub(crate) fn encode_batch(&self, grids: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let b = grids.len();
        let ix = self.batch_index(b);
        let mut t = Tape::new();
        let data: Vec<f64> = grids.iter().flat_map(|g| self.input(g)).collect();
        let x = t.constant_from(&[b, self.geom.cells()], data)?;
        let z = self.encode_tape(&mut t, x, &ix)?;
        Ok(t.value(z)
            .chunks(self.cfg.latent_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    pub(crate) fn decode_batch(&self, zs: &[&[f64]], dates: &[NaiveDate]) -> Result<Vec<SicGrid>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let b = zs.len();
        let ix = self.batch_index(b);
        let mut t = Tape::new();
        let data: Vec<f64> = zs.iter().flat_map(|z| z.iter().copied()).collect();
        let z = t.constant_from(&[b, self.cfg.latent_dim], data)?;
        let out = self.decode_tape(&mut t, z, &ix)?;
        let p = self.geom.cells();
        let vals = t.value(out);
        Ok((0..b)
            .map(|bi| {
                let mut full = vec![0.0; self.mask.len()];
                for (j, &i) in self.mask.ocean_indices().iter().enumerate() {
                    let q = self.geom.ocean_pos[j];
                    full[i] = self.cell_mean[i] + self.scale * vals[bi * p + q];
                }
                SicGrid::from_clipped(dates[bi], full, self.mask.clone())
            })
            .collect())
    }

    /// Mean normalised reconstruction MSE over ocean cells.
    fn loss_on(&self, inputs: &[Vec<f64>], targets: &[Vec<f64>], ids: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in ids.chunks(self.cfg.batch_size) {
            let ix = self.batch_index(chunk.len());
            let mut t = Tape::new();
            let (x, y) = self.batch_vars(&mut t, inputs, targets, chunk)?;
            let z = self.encode_tape(&mut t, x, &ix)?;
            let out = self.decode_tape(&mut t, z, &ix)?;
            let n = self.mask.ocean_count();
            let pred = t.gather(out, ix.loss.clone(), &[chunk.len(), n])?;
            let loss = t.mse_loss(pred, y)?;
            total += t.value(loss)[0] * chunk.len() as f64;
        }
        Ok(total / ids.len().max(1) as f64)
    }

    fn batch_vars(
        &self,
        t: &mut Tape,
        inputs: &[Vec<f64>],
        targets: &[Vec<f64>],
        ids: &[usize],
    ) -> Result<(Var, Var)> {
        let b = ids.len();
        let x: Vec<f64> = ids
            .iter()
            .flat_map(|&i| inputs[i].iter().copied())
            .collect();
        let y: Vec<f64> = ids
            .iter()
            .flat_map(|&i| targets[i].iter().copied())
            .collect();
        Ok((
            t.constant_from(&[b, self.geom.cells()], x)?,
            t.constant_from(&[b, self.mask.ocean_count()], y)?,
        ))
    }
}

/// Trains on `range`, holding out its trailing `val_fraction` for
/// checkpoint selection, and returns the best-validation weights.
pub fn train_autoencoder(
    archive: &GridArchive,
    range: DateRange,
    cfg: &AeConfig,
) -> Result<Autoencoder> {
    cfg.validate()?;
    let grids = archive.days_in(range)?;
    if grids.is_empty() {
        return Err(Error::EmptyRange(format!("no days in {range}")));
    }
    let mask = archive.mask().clone();
    let n_val = ((grids.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(grids.len().saturating_sub(1));
    let n_train = grids.len() - n_val;

    // Normalisation from the training part only.
    let mut cell_mean = vec![0.0; mask.len()];
    for g in &grids[..n_train] {
        for &i in mask.ocean_indices() {
            cell_mean[i] += f64::from(g.values()[i]);
        }
    }
    cell_mean.iter_mut().for_each(|v| *v /= n_train as f64);
    let mut ss = 0.0;
    for g in &grids[..n_train] {
        for &i in mask.ocean_indices() {
            ss += (f64::from(g.values()[i]) - cell_mean[i]).powi(2);
        }
    }
    let sd = (ss / (n_train * mask.ocean_count()) as f64).sqrt();
    let scale = if sd > 1e-6 { sd } else { 1.0 };

    let mut model = Autoencoder::init(mask, cfg.clone(), cell_mean, scale, range)?;
    let inputs: Vec<Vec<f64>> = grids.iter().map(|g| model.input(g.values())).collect();
    let targets: Vec<Vec<f64>> = grids.iter().map(|g| model.target(g.values())).collect();
    let train_ids: Vec<usize> = (0..n_train).step_by(cfg.day_stride).collect();
    let val_ids: Vec<usize> = if n_val > 0 {
        (n_train..grids.len()).collect()
    } else {
        train_ids.clone()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_0000);
    let mut opt = OptimState::new();
    let mut best = model.loss_on(&inputs, &targets, &val_ids)?;
    let mut best_store = model.store.clone();
    let mut trace = Vec::new();
    let full_ix = model.batch_index(cfg.batch_size);
    let n = model.mask.ocean_count();

    for epoch in 1..=cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let part;
            let ix = if chunk.len() == cfg.batch_size {
                &full_ix
            } else {
                part = model.batch_index(chunk.len());
                &part
            };
            let mut t = Tape::new();
            let (x, y) = model.batch_vars(&mut t, &inputs, &targets, chunk)?;
            let z = model.encode_tape(&mut t, x, ix)?;
            let out = model.decode_tape(&mut t, z, ix)?;
            let pred = t.gather(out, ix.loss.clone(), &[chunk.len(), n])?;
            let loss = t.mse_loss(pred, y)?;
            let lv = t.value(loss)[0];
            if !lv.is_finite() {
                trace.push(lv);
                return Err(Error::Diverged { epoch, trace });
            }
            sum += lv * chunk.len() as f64;
            t.backward(loss)?.apply(&mut model.store);
            adam_step(&mut model.store, &mut opt, cfg.lr)?;
        }
        let train_loss = sum / order.len() as f64;
        let val_loss = model.loss_on(&inputs, &targets, &val_ids)?;
        trace.push(train_loss);
        if !val_loss.is_finite() || !model.store.all_finite() {
            return Err(Error::Diverged { epoch, trace });
        }
        log::info!("autoencoder epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        model.history.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best {
            best = val_loss;
            best_store = model.store.clone();
            model.best_epoch = epoch;
        }
    }
    model.store = best_store;
    model.store.zero_grad();
    Ok(model)
}

/// Rebuilds a network from its configuration and checkpointed parameters.
pub(crate) fn restore(
    mask: Arc<Mask>,
    cfg: AeConfig,
    cell_mean: Vec<f64>,
    scale: f64,
    train_range: DateRange,
    params: &ParamStore,
) -> Result<Autoencoder> {
    let mut model = Autoencoder::init(mask, cfg, cell_mean, scale, train_range)?;
    model.store.load_values(params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_then_split_is_identity() {
        let (b, h, w, c) = (2, 4, 6, 3);
        let m = merge_index(b, h, w, c);
        let s = split_index(b, h, w, c);
        let composed: Vec<usize> = s.iter().map(|&i| m[i]).collect();
        assert_eq!(composed, (0..b * h * w * c).collect::<Vec<_>>());
    }

    #[test]
    fn geometry_pads_to_multiple() {
        let mask = Mask::all_ocean(56, 38);
        let g = Geometry::new(&mask, 4);
        assert_eq!((g.prow, g.pcol), (64, 48));
        assert_eq!(g.padding(), (8, 10));
        // Row 56 mirrors row 54.
        assert_eq!(g.src[56 * 48], 54 * 38);
        assert_eq!(g.ocean_pos[38], 48);
    }
}
