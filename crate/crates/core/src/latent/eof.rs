//! Empirical orthogonal functions: a truncated SVD of the day × cell
//! anomaly matrix.

use std::sync::Arc;

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gemm;
use crate::grid::{DateRange, GridArchive, Mask, SicGrid};
use crate::{Error, Result};

/// Above this many rows and columns the randomized solver is used.
pub const EXACT_SVD_LIMIT: usize = 2000;

/// Singular values below this fraction of the largest count as zero.
const RANK_RTOL: f64 = 1e-6;

/// Leading right singular vectors of a centred data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EofBasis {
    /// Column means, length `n`.
    pub mean: Vec<f64>,
    /// `k × n`, orthonormal rows.
    pub basis: Vec<f64>,
    pub singular_values: Vec<f64>,
    pub k: usize,
    pub n: usize,
    pub warnings: Vec<String>,
}

/// Orthonormalises the rows of a `k × n` matrix in order.
fn orthonormalize_rows(v: &mut [f64], k: usize, n: usize) {
    for i in 0..k {
        for _ in 0..2 {
            for j in 0..i {
                let (head, tail) = v.split_at_mut(i * n);
                let vj = &head[j * n..(j + 1) * n];
                let vi = &mut tail[..n];
                let d: f64 = vi.iter().zip(vj).map(|(a, b)| a * b).sum();
                vi.iter_mut().zip(vj).for_each(|(a, b)| *a -= d * b);
            }
        }
        let row = &mut v[i * n..(i + 1) * n];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

/// Eigenpairs of a symmetric matrix, largest first.
fn sorted_eigen(g: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(g);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let vals = order.iter().map(|i| eig.eigenvalues[*i].max(0.0)).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (vals, vecs)
}

/// Right singular vectors of the `m × n` row-major matrix `a` via the
/// eigendecomposition of the smaller Gram matrix. Returns `(σ, V)` with `V`
/// as `d × n` rows, `d = min(m, n)`.
fn exact_svd(a: &[f64], m: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    if m >= n {
        let mut g = vec![0.0; n * n];
        gemm(n, m, n, a, true, a, false, &mut g, 0.0);
        let (vals, vecs) = sorted_eigen(DMatrix::from_row_slice(n, n, &g));
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                v[i * n + j] = vecs[(j, i)];
            }
        }
        (vals.into_iter().map(f64::sqrt).collect(), v)
    } else {
        let mut g = vec![0.0; m * m];
        gemm(m, n, m, a, false, a, true, &mut g, 0.0);
        let (vals, vecs) = sorted_eigen(DMatrix::from_row_slice(m, m, &g));
        let sig: Vec<f64> = vals.into_iter().map(f64::sqrt).collect();
        // V = Aᵀ U Σ⁻¹, stored as rows.
        let mut u = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                u[i * m + j] = vecs[(j, i)];
            }
        }
        let mut v = vec![0.0; m * n];
        gemm(m, m, n, &u, false, a, false, &mut v, 0.0);
        for (i, s) in sig.iter().enumerate() {
            if *s > 0.0 {
                v[i * n..(i + 1) * n].iter_mut().for_each(|x| *x /= s);
            }
        }
        orthonormalize_rows(&mut v, m, n);
        (sig, v)
    }
}

/// Randomized subspace iteration for the top `l` right singular vectors.
fn randomized_svd(a: &[f64], m: usize, n: usize, l: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Y = A Ω, Ω: n × l
    let omega: Vec<f64> = (0..n * l)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut y = vec![0.0; m * l];
    gemm(m, n, l, a, false, &omega, false, &mut y, 0.0);
    let orth = |y: &[f64], rows: usize| -> Vec<f64> {
        let q = DMatrix::from_row_slice(rows, l, y).qr().q();
        let mut out = vec![0.0; rows * l];
        for r in 0..rows {
            for c in 0..l {
                out[r * l + c] = q[(r, c)];
            }
        }
        out
    };
    let mut q = orth(&y, m);
    for _ in 0..4 {
        // Z = Aᵀ Q (n × l), Y = A Z
        let mut z = vec![0.0; n * l];
        gemm(n, m, l, a, true, &q, false, &mut z, 0.0);
        let z = orth(&z, n);
        gemm(m, n, l, a, false, &z, false, &mut y, 0.0);
        q = orth(&y, m);
    }
    // B = Qᵀ A (l × n); its right singular vectors approximate A's.
    let mut b = vec![0.0; l * n];
    gemm(l, m, n, &q, true, a, false, &mut b, 0.0);
    let (sig, v) = exact_svd(&b, l, n);
    (sig, v)
}

impl EofBasis {
    /// Fits a rank-`k` basis to the `m × n` row-major matrix `data`.
    ///
    /// `k` is reduced to the numerical rank of the centred matrix, with a
    /// warning recorded.
    pub fn fit(data: &[f64], m: usize, n: usize, k: usize) -> Result<Self> {
        if data.len() != m * n {
            return Err(Error::shape(&[m, n], &[data.len()]));
        }
        if k == 0 {
            return Err(Error::InvalidConfig("latent_dim must be positive".into()));
        }
        if m < k {
            return Err(Error::InsufficientHistory(format!(
                "{m} days for {k} components"
            )));
        }
        let mut mean = vec![0.0; n];
        for row in data.chunks_exact(n) {
            mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        mean.iter_mut().for_each(|x| *x /= m as f64);
        let anom: Vec<f64> = data
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&mean).map(|(x, mu)| x - mu))
            .collect();

        let d = m.min(n);
        let (sig, v) = if d <= EXACT_SVD_LIMIT {
            exact_svd(&anom, m, n)
        } else {
            randomized_svd(&anom, m, n, (k + 10).min(d), 0x5EED)
        };
        let smax = sig.first().copied().unwrap_or(0.0);
        let rank = sig
            .iter()
            .take_while(|s| **s > RANK_RTOL * smax && **s > 0.0)
            .count();
        let mut warnings = Vec::new();
        let mut k_used = k;
        if k > rank {
            let msg = format!(
                "latent_dim {k} exceeds numerical rank {rank}; reduced to {}",
                rank.max(1)
            );
            log::warn!("{msg}");
            warnings.push(msg);
            k_used = rank.max(1);
        }
        Ok(Self {
            mean,
            basis: v[..k_used * n].to_vec(),
            singular_values: sig[..k_used].to_vec(),
            k: k_used,
            n,
            warnings,
        })
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        let mut z = vec![0.0; self.k];
        gemm(
            self.k,
            self.n,
            1,
            &self.basis,
            false,
            &centred,
            false,
            &mut z,
            0.0,
        );
        z
    }

    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        gemm(1, self.k, self.n, z, false, &self.basis, false, &mut x, 1.0);
        x
    }

    /// Frobenius norm of `data - reconstruct(project(data))`, without clipping.
    pub fn reconstruction_error(&self, data: &[f64]) -> f64 {
        data.chunks_exact(self.n)
            .map(|row| {
                let r = self.reconstruct(&self.project(row));
                row.iter()
                    .zip(&r)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// EOF compressor over the ocean cells of a fixed mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EofCompressor {
    pub(crate) mask: Arc<Mask>,
    pub(crate) fit: EofBasis,
    pub train_range: DateRange,
}

pub fn ocean_matrix(grids: &[SicGrid], mask: &Mask) -> Result<Vec<f64>> {
    let idx = mask.ocean_indices();
    let mut data = Vec::with_capacity(grids.len() * idx.len());
    for g in grids {
        if g.mask().as_ref() != mask {
            return Err(Error::shape(
                &[mask.rows(), mask.cols()],
                &[g.shape().0, g.shape().1],
            ));
        }
        data.extend(idx.iter().map(|&i| f64::from(g.values()[i])));
    }
    Ok(data)
}

impl EofCompressor {
    pub fn fit(archive: &GridArchive, range: DateRange, k: usize) -> Result<Self> {
        let grids = archive.days_in(range)?;
        let mask = archive.mask().clone();
        if mask.ocean_count() == 0 {
            return Err(Error::EmptyMask);
        }
        if grids.len() < k {
            return Err(Error::InsufficientHistory(format!(
                "{} days in {range} for {k} components",
                grids.len()
            )));
        }
        if k >= mask.ocean_count() {
            return Err(Error::InvalidConfig(format!(
                "latent_dim {k} must be below the {} ocean cells",
                mask.ocean_count()
            )));
        }
        let data = ocean_matrix(grids, &mask)?;
        let fit = EofBasis::fit(&data, grids.len(), mask.ocean_count(), k)?;
        Ok(Self {
            mask,
            fit,
            train_range: range,
        })
    }

    pub fn basis(&self) -> &EofBasis {
        &self.fit
    }

    pub fn warnings(&self) -> &[String] {
        &self.fit.warnings
    }

    pub(crate) fn encode_values(&self, values: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = self
            .mask
            .ocean_indices()
            .iter()
            .map(|&i| f64::from(values[i]))
            .collect();
        self.fit.project(&x)
    }

    pub(crate) fn decode_values(&self, z: &[f64], date: NaiveDate) -> SicGrid {
        let x = self.fit.reconstruct(z);
        let mut full = vec![0.0; self.mask.len()];
        for (&i, v) in self.mask.ocean_indices().iter().zip(x) {
            full[i] = v;
        }
        SicGrid::from_clipped(date, full, self.mask.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn gram_err(b: &EofBasis) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..b.k {
            for j in 0..b.k {
                let d: f64 = (0..b.n)
                    .map(|c| b.basis[i * b.n + c] * b.basis[j * b.n + c])
                    .sum();
                worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    #[test]
    fn rank_one_exact() {
        let (m, n) = (40, 25);
        let pattern: Vec<f64> = (0..n).map(|j| (j as f64 * 0.3).sin()).collect();
        let data: Vec<f64> = (0..m)
            .flat_map(|t| {
                let a = (t as f64 * 0.17).cos() + 0.1;
                pattern.iter().map(move |p| 0.5 + a * p).collect::<Vec<_>>()
            })
            .collect();
        let b = EofBasis::fit(&data, m, n, 1).unwrap();
        assert!(b.reconstruction_error(&data) < 1e-6);
        assert!(b.warnings.is_empty());
    }

    #[test]
    fn rank_reduction_is_recorded() {
        let (m, n) = (30, 12);
        let data: Vec<f64> = (0..m * n)
            .map(|i| ((i / n) as f64 * 0.1).sin() * (i % n) as f64)
            .collect();
        let b = EofBasis::fit(&data, m, n, 5).unwrap();
        assert_eq!(b.k, 1);
        assert_eq!(b.warnings.len(), 1);
    }

    #[test]
    fn both_gram_orientations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, n) in [(9, 20), (20, 9)] {
            let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Centred rank is min(m - 1, n).
            let k = (m - 1).min(n);
            let b = EofBasis::fit(&data, m, n, k).unwrap();
            assert!(gram_err(&b) < 1e-10, "{m}x{n}");
            assert!(b.reconstruction_error(&data) < 1e-8, "{m}x{n}");
        }
    }

    #[test]
    fn randomized_matches_exact_on_low_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, n, r) = (60, 80, 4);
        let u: Vec<f64> = (0..m * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..r * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; m * n];
        gemm(m, r, n, &u, false, &w, false, &mut a, 0.0);
        let (s_exact, _) = exact_svd(&a, m, n);
        let (s_rand, _) = randomized_svd(&a, m, n, 8, 1);
        for i in 0..r {
            assert!((s_exact[i] - s_rand[i]).abs() < 1e-8 * s_exact[0]);
        }
    }

    #[test]
    fn full_rank_is_lossless_and_error_falls_with_k() {
        let (m, n) = (60, 20);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..m * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let errs: Vec<f64> = (1..=n)
            .map(|k| {
                EofBasis::fit(&data, m, n, k)
                    .unwrap()
                    .reconstruction_error(&data)
            })
            .collect();
        assert!(errs[n - 1] < 1e-5, "{}", errs[n - 1]);
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{errs:?}");
    }
}
