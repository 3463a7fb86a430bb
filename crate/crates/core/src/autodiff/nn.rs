use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Glorot,
    Zeros,
    /// Every weight set to the value; bias zero.
    Const(f64),
}

/// Dense layer `x · w + b` over the last axis of a `[rows, fan_in]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = match init {
            Init::Glorot => store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng)?,
            Init::Zeros => store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?,
            Init::Const(v) => {
                store.add(format!("{name}.w"), Tensor::full(&[fan_in, fan_out], v))?
            }
        };
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Self {
            w,
            b,
            fan_in,
            fan_out,
        })
    }

    /// Looks up an existing layer by name, e.g. after loading a checkpoint.
    pub fn find(store: &ParamStore, name: &str) -> Option<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let s = store.get(w).shape();
        Some(Self {
            w,
            b,
            fan_in: s[0],
            fan_out: s[1],
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.affine(x, w, b)
    }
}
