//! Minimal reverse-mode autodiff over dense f64 tensors.

mod checkpoint;
mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_params, read_params, save_params, write_params};
pub use nn::{Init, Linear};
pub use optim::{adam_step, sgd_step, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{gemm, reflect_index};

use rustfft::{num_complex::Complex, FftPlanner};

/// `|X_k|` for `k = 0..=n/2` of a real sequence.
pub fn rfft_magnitude(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfft_peak_at_cycle_count() {
        let x: Vec<f64> = (0..400)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 50.0).sin())
            .collect();
        let m = rfft_magnitude(&x);
        assert_eq!(m.len(), 201);
        let peak = (1..m.len()).max_by(|a, b| m[*a].total_cmp(&m[*b])).unwrap();
        assert_eq!(peak, 8);
        assert!((m[8] - 200.0).abs() < 1e-9);
    }

    #[test]
    fn grad_of_linear_mse_matches_closed_form() {
        // d/dW mean((W x - y)²) = 2/n (W x - y) xᵀ
        let mut store = ParamStore::new();
        let w0 = Tensor::from_fn(&[2, 3], |i| 0.1 * i as f64 - 0.2);
        let wid = store.add("w", w0.clone()).unwrap();
        let x = [0.5, -1.0, 2.0];
        let y = [0.3, -0.7];
        let mut t = Tape::new();
        let w = t.param(&store, wid);
        let xv = t.constant(Tensor::new(&[3, 1], x.to_vec()).unwrap());
        let yv = t.constant(Tensor::new(&[2, 1], y.to_vec()).unwrap());
        let p = t.matmul(w, xv).unwrap();
        let l = t.mse_loss(p, yv).unwrap();
        let g = t.backward(l).unwrap();
        let got = g.get(w).unwrap();
        for i in 0..2 {
            let pred: f64 = (0..3).map(|j| w0.data()[i * 3 + j] * x[j]).sum();
            for j in 0..3 {
                let want = 2.0 / 2.0 * (pred - y[i]) * x[j];
                assert!((got[i * 3 + j] - want).abs() < 1e-12);
            }
        }
        g.apply(&mut store);
        assert_eq!(store.get(wid).grad.as_deref(), Some(got));
    }
}
