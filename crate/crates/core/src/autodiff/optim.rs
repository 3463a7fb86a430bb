use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn take_grad(store: &mut ParamStore, id: super::ParamId) -> Result<Vec<f64>> {
    let name = store.name(id).to_string();
    store
        .get_mut(id)
        .grad
        .take()
        .ok_or(Error::MissingGrad(name))
}

fn check_grads(store: &ParamStore) -> Result<()> {
    for id in store.ids() {
        if store.get(id).grad.is_none() {
            return Err(Error::MissingGrad(store.name(id).to_string()));
        }
    }
    Ok(())
}

/// Plain gradient descent. Gradients are reset to zero afterwards.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    check_grads(store)?;
    for id in store.ids().collect::<Vec<_>>() {
        let g = take_grad(store, id)?;
        let t = store.get_mut(id);
        t.data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(p, g)| *p -= lr * g);
        t.grad = Some(vec![0.0; g.len()]);
    }
    Ok(())
}

/// First and second moment estimates for [`adam_step`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update with bias correction. Gradients are reset to zero.
pub fn adam_step(store: &mut ParamStore, state: &mut OptimState, lr: f64) -> Result<()> {
    check_grads(store)?;
    if state.m.len() != store.len() {
        state.m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for id in store.ids().collect::<Vec<_>>() {
        let g = take_grad(store, id)?;
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = store.get_mut(id);
        for (((p, g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(&g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        p.grad = Some(vec![0.0; g.len()]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    fn quad_store(x0: &[f64]) -> (ParamStore, super::super::ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("x", Tensor::new(&[x0.len()], x0.to_vec()).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn sgd_on_quadratic_bowl() {
        let target = [1.0, -2.0, 0.5];
        let (mut s, id) = quad_store(&[0.0, 0.0, 0.0]);
        for _ in 0..100 {
            let mut t = Tape::new();
            let x = t.param(&s, id);
            let c = t.constant(Tensor::new(&[3], target.to_vec()).unwrap());
            // 0.5 * |x - target|²
            let m = t.mse_loss(x, c).unwrap();
            let l = t.scale(m, 1.5);
            t.backward(l).unwrap().apply(&mut s);
            sgd_step(&mut s, 0.1).unwrap();
        }
        for (a, b) in s.get(id).data().iter().zip(target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let (mut s, id) = quad_store(&[0.3, -0.4]);
        let before = s.get(id).data().to_vec();
        sgd_step(&mut s, 0.5).unwrap();
        assert_eq!(s.get(id).data(), &before[..]);
        let mut st = OptimState::new();
        adam_step(&mut s, &mut st, 0.5).unwrap();
        assert_eq!(s.get(id).data(), &before[..]);
    }

    #[test]
    fn adam_on_abs_decreases() {
        let (mut s, id) = quad_store(&[2.0]);
        let mut st = OptimState::new();
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let x = s.get(id).data()[0];
            assert!(x.abs() < prev);
            prev = x.abs();
            s.get_mut(id).grad = Some(vec![x.signum()]);
            adam_step(&mut s, &mut st, 0.1).unwrap();
        }
        assert!(s.get(id).data()[0].abs() < prev);
    }

    #[test]
    fn missing_grad_errors() {
        let (mut s, id) = quad_store(&[1.0]);
        s.get_mut(id).grad = None;
        assert!(matches!(sgd_step(&mut s, 0.1), Err(Error::MissingGrad(n)) if n == "x"));
        let mut st = OptimState::new();
        assert!(matches!(
            adam_step(&mut s, &mut st, 0.1),
            Err(Error::MissingGrad(_))
        ));
    }
}
