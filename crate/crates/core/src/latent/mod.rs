//! Compression of daily grids into latent vectors and back.

mod autoencoder;
mod eof;

use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_params, save_params, write_params, ParamStore, Tensor};
use crate::grid::{CellKind, DateRange, GridArchive, Mask, SicGrid};
use crate::metrics::{EvalSample, MetricReport, ReportBuilder};
use crate::{Error, Result};

pub use autoencoder::{train_autoencoder, AeConfig, Autoencoder, EpochLog};
pub use eof::{ocean_matrix, EofBasis, EofCompressor, EXACT_SVD_LIMIT};

pub const CHECKPOINT_FILE: &str = "compressor.ckpt";
pub const SIDECAR_FILE: &str = "compressor.json";

/// Days encoded or decoded per network pass.
const BATCH: usize = 64;

/// Grid ↔ latent mapping.
pub trait Codec: Send + Sync {
    fn latent_dim(&self) -> usize;
    fn mask(&self) -> &Arc<Mask>;
    fn encode_many(&self, grids: &[&SicGrid]) -> Result<Vec<Vec<f64>>>;
    /// Decodes each latent to a grid with ocean values clipped to `[0, 1]`.
    fn decode_many(&self, zs: &[&[f64]], dates: &[NaiveDate]) -> Result<Vec<SicGrid>>;

    fn encode(&self, grid: &SicGrid) -> Result<Vec<f64>> {
        Ok(self.encode_many(&[grid])?.remove(0))
    }

    fn decode(&self, z: &[f64], date: NaiveDate) -> Result<SicGrid> {
        Ok(self.decode_many(&[z], &[date])?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompressorKind {
    Eof,
    Autoencoder,
}

impl std::fmt::Display for CompressorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CompressorKind::Eof => "eof",
            CompressorKind::Autoencoder => "autoencoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Compressor {
    Eof(EofCompressor),
    Autoencoder(Autoencoder),
}

/// JSON written next to a compressor checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorMeta {
    pub kind: CompressorKind,
    pub id: String,
    pub latent_dim: usize,
    pub rows: usize,
    pub cols: usize,
    /// Rows and columns added at the bottom and right before encoding.
    pub padding: [usize; 2],
    pub train_range: DateRange,
    /// Anomaly scale of the network input; 1 for EOF.
    pub input_scale: f64,
    #[serde(default)]
    pub config: Option<AeConfig>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub history: Vec<EpochLog>,
    #[serde(default)]
    pub best_epoch: usize,
}

impl Compressor {
    pub fn fit_eof(archive: &GridArchive, range: DateRange, k: usize) -> Result<Self> {
        EofCompressor::fit(archive, range, k).map(Compressor::Eof)
    }

    pub fn train_autoencoder(
        archive: &GridArchive,
        range: DateRange,
        cfg: &AeConfig,
    ) -> Result<Self> {
        train_autoencoder(archive, range, cfg).map(Compressor::Autoencoder)
    }

    pub fn kind(&self) -> CompressorKind {
        match self {
            Compressor::Eof(_) => CompressorKind::Eof,
            Compressor::Autoencoder(_) => CompressorKind::Autoencoder,
        }
    }

    pub fn train_range(&self) -> DateRange {
        match self {
            Compressor::Eof(e) => e.train_range,
            Compressor::Autoencoder(a) => a.train_range,
        }
    }

    fn params(&self) -> Result<ParamStore> {
        let mask = Codec::mask(self);
        let mut s = ParamStore::new();
        s.add(
            "mask",
            Tensor::new(
                &[mask.rows(), mask.cols()],
                mask.cells().iter().map(|c| f64::from(c.code())).collect(),
            )?,
        )?;
        match self {
            Compressor::Eof(e) => {
                let b = e.basis();
                s.add("eof.mean", Tensor::new(&[b.n], b.mean.clone())?)?;
                s.add("eof.basis", Tensor::new(&[b.k, b.n], b.basis.clone())?)?;
                s.add(
                    "eof.singular_values",
                    Tensor::new(&[b.k], b.singular_values.clone())?,
                )?;
            }
            Compressor::Autoencoder(a) => {
                s.add(
                    "ae.cell_mean",
                    Tensor::new(&[mask.len()], a.cell_mean.clone())?,
                )?;
                for (name, t) in a.store.iter() {
                    s.add(name, Tensor::new(t.shape(), t.data().to_vec())?)?;
                }
            }
        }
        Ok(s)
    }

    /// Stable identifier: kind, latent size and a checksum of the parameters.
    pub fn id(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_params(&self.params()?, &mut buf)?;
        Ok(format!(
            "{}-{}-{:08x}",
            self.kind(),
            self.latent_dim(),
            crc32fast::hash(&buf)
        ))
    }

    pub fn meta(&self) -> Result<CompressorMeta> {
        let mask = Codec::mask(self);
        let (padding, input_scale, config, warnings, history, best_epoch) = match self {
            Compressor::Eof(e) => ([0, 0], 1.0, None, e.warnings().to_vec(), Vec::new(), 0),
            Compressor::Autoencoder(a) => {
                let (r, c) = a.padding();
                (
                    [r, c],
                    a.scale,
                    Some(a.cfg.clone()),
                    Vec::new(),
                    a.history.clone(),
                    a.best_epoch,
                )
            }
        };
        Ok(CompressorMeta {
            kind: self.kind(),
            id: self.id()?,
            latent_dim: self.latent_dim(),
            rows: mask.rows(),
            cols: mask.cols(),
            padding,
            train_range: self.train_range(),
            input_scale,
            config,
            warnings,
            history,
            best_epoch,
        })
    }

    /// Writes the parameter container and its JSON sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_params(&self.params()?, dir.join(CHECKPOINT_FILE))?;
        let meta = serde_json::to_string_pretty(&self.meta()?)?;
        let p = dir.join(SIDECAR_FILE);
        std::fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join(SIDECAR_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let meta: CompressorMeta = serde_json::from_str(&text)?;
        let params = load_params(dir.join(CHECKPOINT_FILE))?;
        let get = |name: &str| {
            params
                .id(name)
                .map(|id| params.get(id))
                .ok_or_else(|| Error::Format(format!("compressor checkpoint lacks {name}")))
        };
        let codes = get("mask")?;
        if codes.shape() != [meta.rows, meta.cols] {
            return Err(Error::shape(&[meta.rows, meta.cols], codes.shape()));
        }
        let cells = codes
            .data()
            .iter()
            .map(|v| {
                CellKind::from_code(*v as u8)
                    .ok_or_else(|| Error::Format(format!("bad mask code {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = Arc::new(Mask::new(meta.rows, meta.cols, cells)?);
        let out = match meta.kind {
            CompressorKind::Eof => {
                let basis = get("eof.basis")?;
                let (k, n) = (basis.shape()[0], basis.shape()[1]);
                if n != mask.ocean_count() {
                    return Err(Error::shape(&[mask.ocean_count()], &[n]));
                }
                Compressor::Eof(EofCompressor {
                    mask,
                    fit: EofBasis {
                        mean: get("eof.mean")?.data().to_vec(),
                        basis: basis.data().to_vec(),
                        singular_values: get("eof.singular_values")?.data().to_vec(),
                        k,
                        n,
                        warnings: meta.warnings.clone(),
                    },
                    train_range: meta.train_range,
                })
            }
            CompressorKind::Autoencoder => {
                let cfg = meta
                    .config
                    .clone()
                    .ok_or_else(|| Error::Format("autoencoder sidecar lacks config".into()))?;
                let cell_mean = get("ae.cell_mean")?.data().to_vec();
                let mut a = autoencoder::restore(
                    mask,
                    cfg,
                    cell_mean,
                    meta.input_scale,
                    meta.train_range,
                    &params,
                )?;
                a.history = meta.history.clone();
                a.best_epoch = meta.best_epoch;
                Compressor::Autoencoder(a)
            }
        };
        if out.latent_dim() != meta.latent_dim {
            return Err(Error::Format(format!(
                "sidecar latent_dim {} does not match checkpoint {}",
                meta.latent_dim,
                out.latent_dim()
            )));
        }
        Ok(out)
    }
}

fn check_grid(mask: &Mask, g: &SicGrid) -> Result<()> {
    if g.mask().as_ref() != mask {
        let (r, c) = g.shape();
        return Err(Error::shape(&[mask.rows(), mask.cols()], &[r, c]));
    }
    Ok(())
}

impl Codec for Compressor {
    fn latent_dim(&self) -> usize {
        match self {
            Compressor::Eof(e) => e.basis().k,
            Compressor::Autoencoder(a) => a.cfg.latent_dim,
        }
    }

    fn mask(&self) -> &Arc<Mask> {
        match self {
            Compressor::Eof(e) => &e.mask,
            Compressor::Autoencoder(a) => &a.mask,
        }
    }

    fn encode_many(&self, grids: &[&SicGrid]) -> Result<Vec<Vec<f64>>> {
        let mask = Codec::mask(self).clone();
        for g in grids {
            check_grid(&mask, g)?;
        }
        match self {
            Compressor::Eof(e) => Ok(grids.iter().map(|g| e.encode_values(g.values())).collect()),
            Compressor::Autoencoder(a) => {
                let mut out = Vec::with_capacity(grids.len());
                for chunk in grids.chunks(BATCH) {
                    let vals: Vec<&[f32]> = chunk.iter().map(|g| g.values()).collect();
                    out.extend(a.encode_batch(&vals)?);
                }
                Ok(out)
            }
        }
    }

    fn decode_many(&self, zs: &[&[f64]], dates: &[NaiveDate]) -> Result<Vec<SicGrid>> {
        let k = self.latent_dim();
        if zs.len() != dates.len() {
            return Err(Error::shape(&[zs.len()], &[dates.len()]));
        }
        if let Some(z) = zs.iter().find(|z| z.len() != k) {
            return Err(Error::shape(&[k], &[z.len()]));
        }
        match self {
            Compressor::Eof(e) => Ok(zs
                .iter()
                .zip(dates)
                .map(|(z, d)| e.decode_values(z, *d))
                .collect()),
            Compressor::Autoencoder(a) => {
                let mut out = Vec::with_capacity(zs.len());
                for (zc, dc) in zs.chunks(BATCH).zip(dates.chunks(BATCH)) {
                    out.extend(a.decode_batch(zc, dc)?);
                }
                Ok(out)
            }
        }
    }
}

/// Per-dimension z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Stats over the rows of an `n × dim` matrix. Dimensions with
    /// negligible spread get unit scale.
    pub fn fit(rows: &[f64], dim: usize) -> Result<Self> {
        let n = rows.len() / dim.max(1);
        if n == 0 || dim == 0 || rows.len() != n * dim {
            return Err(Error::EmptyRange("no rows for normalization".into()));
        }
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            var.iter_mut()
                .zip(r)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m).powi(2));
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Normalises rows of a flat `n × dim` buffer in place.
    pub fn normalize(&self, rows: &mut [f64]) {
        let d = self.dim();
        for r in rows.chunks_exact_mut(d) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn denormalize(&self, rows: &mut [f64]) {
        let d = self.dim();
        for r in rows.chunks_exact_mut(d) {
            for ((v, m), s) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
    }
}

/// Encoded days, one latent vector per day in date order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeries {
    pub dates: Vec<NaiveDate>,
    pub dim: usize,
    vectors: Vec<f64>,
    pub compressor_id: String,
    /// Computed from the training range only.
    pub norm: Normalizer,
    pub norm_range: DateRange,
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesMeta {
    compressor_id: String,
    dim: usize,
    dates: Vec<NaiveDate>,
    norm_range: DateRange,
}

impl LatentSeries {
    pub fn new(
        dates: Vec<NaiveDate>,
        dim: usize,
        vectors: Vec<f64>,
        compressor_id: String,
        norm_range: DateRange,
    ) -> Result<Self> {
        if vectors.len() != dates.len() * dim {
            return Err(Error::shape(&[dates.len(), dim], &[vectors.len()]));
        }
        if dates.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidData("latent dates must increase".into()));
        }
        let lo = dates.partition_point(|d| *d < norm_range.start);
        let hi = dates.partition_point(|d| *d <= norm_range.end);
        let norm = Normalizer::fit(&vectors[lo * dim..hi * dim], dim)?;
        Ok(Self {
            dates,
            dim,
            vectors,
            compressor_id,
            norm,
            norm_range,
        })
    }

    /// Encodes every day of `range`; normalisation uses `train_range` only.
    pub fn encode(
        codec: &dyn Codec,
        compressor_id: &str,
        archive: &GridArchive,
        range: DateRange,
        train_range: DateRange,
    ) -> Result<Self> {
        let grids = archive.days_in(range)?;
        let dim = codec.latent_dim();
        let mut vectors = Vec::with_capacity(grids.len() * dim);
        for chunk in grids.chunks(BATCH) {
            let refs: Vec<&SicGrid> = chunk.iter().collect();
            for z in codec.encode_many(&refs)? {
                vectors.extend(z);
            }
        }
        let dates = grids.iter().map(|g| g.date).collect();
        Self::new(dates, dim, vectors, compressor_id.to_string(), train_range)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// All vectors after the z-score transform.
    pub fn normalized(&self) -> Vec<f64> {
        let mut v = self.vectors.clone();
        self.norm.normalize(&mut v);
        v
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut s = ParamStore::new();
        s.add(
            "vectors",
            Tensor::new(&[self.len(), self.dim], self.vectors.clone())?,
        )?;
        s.add(
            "norm.mean",
            Tensor::new(&[self.dim], self.norm.mean.clone())?,
        )?;
        s.add("norm.std", Tensor::new(&[self.dim], self.norm.std.clone())?)?;
        save_params(&s, dir.join("latents.ckpt"))?;
        let meta = SeriesMeta {
            compressor_id: self.compressor_id.clone(),
            dim: self.dim,
            dates: self.dates.clone(),
            norm_range: self.norm_range,
        };
        let p = dir.join("latents.json");
        std::fs::write(&p, serde_json::to_string(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let p = dir.join("latents.json");
        let meta: SeriesMeta =
            serde_json::from_str(&std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
        let s = load_params(dir.join("latents.ckpt"))?;
        let vectors = s
            .id("vectors")
            .map(|id| s.get(id).data().to_vec())
            .ok_or_else(|| Error::Format("latents checkpoint lacks vectors".into()))?;
        Self::new(
            meta.dates,
            meta.dim,
            vectors,
            meta.compressor_id,
            meta.norm_range,
        )
    }
}

/// Reconstruction skill of `codec` over `range`, scored in grid space.
pub fn evaluate_reconstruction(
    codec: &dyn Codec,
    archive: &GridArchive,
    range: DateRange,
) -> Result<MetricReport> {
    let grids = archive.days_in(range)?;
    if grids.is_empty() {
        return Err(Error::EmptyRange(format!("no days in {range}")));
    }
    let mut rb = ReportBuilder::new(archive.mask().clone());
    for chunk in grids.chunks(BATCH) {
        let refs: Vec<&SicGrid> = chunk.iter().collect();
        let zs = codec.encode_many(&refs)?;
        let zr: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let dates: Vec<NaiveDate> = chunk.iter().map(|g| g.date).collect();
        let recon = codec.decode_many(&zr, &dates)?;
        for (g, r) in chunk.iter().zip(&recon) {
            rb.add(&EvalSample {
                lead: 0,
                target: g.date,
                pred: r.values(),
                truth: g.values(),
                clim: None,
            })?;
        }
    }
    Ok(rb.finish())
}
