//! Tape-level forward passes of the learned backbones.
//!
//! Inputs are `[rows, n]` with one row per (sample, channel), rows ordered
//! sample-major. Outputs are `[rows, p]`.

use std::sync::Arc;

use rand::Rng;

use super::{BackboneConfig, BackboneKind};
use crate::autodiff::{Init, Linear, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-batch information beyond the input values.
pub(crate) struct BatchCtx<'a> {
    pub samples: usize,
    pub dim: usize,
    /// Absolute day number of each sample's first input day.
    pub starts: &'a [i64],
}

/// Two-layer tanh MLP over the time axis; the output layer starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    a: Linear,
    b: Linear,
}

impl Mlp {
    fn new(
        s: &mut ParamStore,
        name: &str,
        len: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            a: Linear::new(s, &format!("{name}.a"), len, hidden, Init::Glorot, rng)?,
            b: Linear::new(s, &format!("{name}.b"), hidden, len, Init::Zeros, rng)?,
        })
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let h = self.a.forward(t, s, x)?;
        let h = t.tanh(h);
        self.b.forward(t, s, h)
    }
}

/// Separate `n → p` maps for each channel: weights `[dim, p, n]`, bias `[dim, p]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ChannelLinear {
    w: ParamId,
    b: ParamId,
    dim: usize,
    n: usize,
    p: usize,
}

impl ChannelLinear {
    fn new(
        s: &mut ParamStore,
        name: &str,
        dim: usize,
        n: usize,
        p: usize,
        w0: f64,
    ) -> Result<Self> {
        Ok(Self {
            w: s.add(format!("{name}.w"), Tensor::full(&[dim, p, n], w0))?,
            b: s.add(format!("{name}.b"), Tensor::zeros(&[dim, p]))?,
            dim,
            n,
            p,
        })
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let rows = t.shape(x)[0];
        let (d, n, p) = (self.dim, self.n, self.p);
        let samples = rows / d;
        // Each row repeated p times: [samples, dim, p, n].
        let idx: Arc<[usize]> = (0..rows)
            .flat_map(|r| (0..p).flat_map(move |_| (0..n).map(move |j| r * n + j)))
            .collect();
        let xr = t.gather(x, idx, &[samples, d, p, n])?;
        let w = t.param(s, self.w);
        let prod = t.mul(xr, w)?;
        let prod = t.reshape(prod, &[rows * p, n])?;
        let ones = t.constant(Tensor::full(&[n, 1], 1.0));
        let y = t.matmul(prod, ones)?;
        let y = t.reshape(y, &[samples, d, p])?;
        let b = t.param(s, self.b);
        let y = t.add(y, b)?;
        t.reshape(y, &[rows, p])
    }
}

/// A time-axis map shared by all channels or held per channel.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Head {
    Shared(Linear),
    PerChannel(ChannelLinear),
}

impl Head {
    #[allow(clippy::too_many_arguments)]
    fn new(
        s: &mut ParamStore,
        name: &str,
        individual: bool,
        dim: usize,
        n: usize,
        p: usize,
        w0: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(if individual {
            Head::PerChannel(ChannelLinear::new(s, name, dim, n, p, w0)?)
        } else {
            Head::Shared(Linear::new(s, name, n, p, Init::Const(w0), rng)?)
        })
    }

    fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Head::Shared(l) => l.forward(t, s, x),
            Head::PerChannel(c) => c.forward(t, s, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Interact {
    phi: Mlp,
    psi: Mlp,
    rho: Mlp,
    eta: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::enum_variant_names)]
pub(crate) enum Net {
    DLinear {
        trend: Head,
        seasonal: Head,
        kernel: usize,
    },
    NLinear {
        lin: Linear,
    },
    CycleNet {
        q: ParamId,
        period: usize,
        lin: Linear,
    },
    SciNet {
        levels: usize,
        n_pad: usize,
        /// Tree nodes in breadth-first order.
        blocks: Vec<Interact>,
        dec: Linear,
    },
}

/// Length after front padding to a multiple of `2^levels`.
pub(crate) fn scinet_len(n: usize, levels: usize) -> usize {
    let m = 1 << levels;
    n.div_ceil(m) * m
}

/// Column indices `start, start+2, ...` of every row of a `[rows, len]` matrix.
fn stride_index(rows: usize, len: usize, start: usize) -> Arc<[usize]> {
    (0..rows)
        .flat_map(|r| (start..len).step_by(2).map(move |j| r * len + j))
        .collect()
}

/// Gather index that interleaves `[even | odd]` (concatenated on the time axis)
/// back into time order.
fn interleave_index(rows: usize, half: usize) -> Arc<[usize]> {
    let len = 2 * half;
    (0..rows)
        .flat_map(|r| {
            (0..len).map(move |j| r * len + if j % 2 == 0 { j / 2 } else { half + j / 2 })
        })
        .collect()
}

pub(crate) fn split_even_odd(t: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let (rows, len) = (t.shape(x)[0], t.shape(x)[1]);
    if len % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "cannot split odd length {len}"
        )));
    }
    let h = len / 2;
    let even = t.gather(x, stride_index(rows, len, 0), &[rows, h])?;
    let odd = t.gather(x, stride_index(rows, len, 1), &[rows, h])?;
    Ok((even, odd))
}

pub(crate) fn interleave(t: &mut Tape, even: Var, odd: Var) -> Result<Var> {
    let (rows, h) = (t.shape(even)[0], t.shape(even)[1]);
    let cat = t.concat(&[even, odd], 1)?;
    t.gather(cat, interleave_index(rows, h), &[rows, 2 * h])
}

/// Per-row last value broadcast to `[rows, width]`.
fn last_value(t: &mut Tape, x: Var, width: usize) -> Result<Var> {
    let (rows, len) = (t.shape(x)[0], t.shape(x)[1]);
    let idx: Arc<[usize]> = (0..rows)
        .flat_map(|r| std::iter::repeat_n(r * len + len - 1, width))
        .collect();
    t.gather(x, idx, &[rows, width])
}

impl Net {
    pub fn new(
        cfg: &BackboneConfig,
        dim: usize,
        period: usize,
        s: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (n, p) = (cfg.n, cfg.p);
        Ok(match cfg.kind {
            BackboneKind::DLinear => Net::DLinear {
                trend: Head::new(s, "trend", cfg.individual, dim, n, p, 1.0 / n as f64, rng)?,
                seasonal: Head::new(
                    s,
                    "seasonal",
                    cfg.individual,
                    dim,
                    n,
                    p,
                    1.0 / n as f64,
                    rng,
                )?,
                kernel: cfg.ma_kernel,
            },
            BackboneKind::NLinear => Net::NLinear {
                lin: Linear::new(s, "linear", n, p, Init::Zeros, rng)?,
            },
            BackboneKind::CycleNet => Net::CycleNet {
                q: s.add("cycle", Tensor::zeros(&[period, dim]))?,
                period,
                lin: Linear::new(s, "linear", n, p, Init::Zeros, rng)?,
            },
            BackboneKind::SciNet => {
                let n_pad = scinet_len(n, cfg.levels);
                if n_pad != n && !cfg.pad_input {
                    return Err(Error::InvalidConfig(format!(
                        "input length {n} is not divisible by 2^{}",
                        cfg.levels
                    )));
                }
                let mut blocks = Vec::new();
                for level in 0..cfg.levels {
                    let half = n_pad >> (level + 1);
                    for node in 0..1usize << level {
                        let name = format!("block{level}.{node}");
                        blocks.push(Interact {
                            phi: Mlp::new(s, &format!("{name}.phi"), half, cfg.hidden, rng)?,
                            psi: Mlp::new(s, &format!("{name}.psi"), half, cfg.hidden, rng)?,
                            rho: Mlp::new(s, &format!("{name}.rho"), half, cfg.hidden, rng)?,
                            eta: Mlp::new(s, &format!("{name}.eta"), half, cfg.hidden, rng)?,
                        });
                    }
                }
                Net::SciNet {
                    levels: cfg.levels,
                    n_pad,
                    blocks,
                    dec: Linear::new(s, "decoder", n_pad, p, Init::Glorot, rng)?,
                }
            }
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, ctx: &BatchCtx) -> Result<Var> {
        match self {
            Net::DLinear {
                trend,
                seasonal,
                kernel,
            } => {
                let tr = t.moving_average_1d(x, *kernel)?;
                let se = t.sub(x, tr)?;
                let a = trend.forward(t, s, tr)?;
                let b = seasonal.forward(t, s, se)?;
                t.add(a, b)
            }
            Net::NLinear { lin } => {
                let n = t.shape(x)[1];
                let last_in = last_value(t, x, n)?;
                let centred = t.sub(x, last_in)?;
                let y = lin.forward(t, s, centred)?;
                let last_out = last_value(t, x, lin.fan_out)?;
                t.add(y, last_out)
            }
            Net::CycleNet { q, period, lin } => {
                let n = t.shape(x)[1];
                let p = lin.fan_out;
                let qv = t.param(s, *q);
                let cyc_in = t.gather(
                    qv,
                    cycle_index(ctx, *period, 0, n),
                    &[ctx.samples * ctx.dim, n],
                )?;
                let cyc_out = t.gather(
                    qv,
                    cycle_index(ctx, *period, n, p),
                    &[ctx.samples * ctx.dim, p],
                )?;
                let resid = t.sub(x, cyc_in)?;
                let y = lin.forward(t, s, resid)?;
                t.add(y, cyc_out)
            }
            Net::SciNet {
                levels,
                n_pad,
                blocks,
                dec,
            } => {
                let (rows, n) = (t.shape(x)[0], t.shape(x)[1]);
                let xp = if *n_pad > n {
                    let idx: Arc<[usize]> = (0..rows)
                        .flat_map(|r| (0..*n_pad).map(move |j| r * n + j.saturating_sub(n_pad - n)))
                        .collect();
                    t.gather(x, idx, &[rows, *n_pad])?
                } else {
                    x
                };
                let last_in = last_value(t, xp, *n_pad)?;
                let centred = t.sub(xp, last_in)?;
                let h = scinet_tree(t, s, blocks, *levels, centred, 0, 0)?;
                let y = dec.forward(t, s, h)?;
                let last_out = last_value(t, x, dec.fan_out)?;
                t.add(y, last_out)
            }
        }
    }

    /// Sets the cycle table of a CycleNet from `[period, dim]` values.
    pub fn set_cycle(&self, s: &mut ParamStore, values: &[f64]) -> Result<()> {
        if let Net::CycleNet { q, .. } = self {
            let dst = s.get_mut(*q).data_mut();
            if dst.len() != values.len() {
                return Err(Error::shape(&[dst.len()], &[values.len()]));
            }
            dst.copy_from_slice(values);
        }
        Ok(())
    }
}

/// Gather index into the `[period, dim]` cycle table for steps
/// `offset..offset+len` after each sample's start.
fn cycle_index(ctx: &BatchCtx, period: usize, offset: usize, len: usize) -> Arc<[usize]> {
    let w = period as i64;
    let mut idx = Vec::with_capacity(ctx.samples * ctx.dim * len);
    for &start in ctx.starts {
        for c in 0..ctx.dim {
            for j in 0..len {
                let phase = (start + (offset + j) as i64).rem_euclid(w) as usize;
                idx.push(phase * ctx.dim + c);
            }
        }
    }
    idx.into()
}

fn scinet_tree(
    t: &mut Tape,
    s: &ParamStore,
    blocks: &[Interact],
    levels: usize,
    x: Var,
    level: usize,
    node: usize,
) -> Result<Var> {
    if level == levels {
        return Ok(x);
    }
    let b = &blocks[(1 << level) - 1 + node];
    let (even, odd) = split_even_odd(t, x)?;
    let phi = b.phi.forward(t, s, even)?;
    let phi = t.exp(phi);
    let psi = b.psi.forward(t, s, even)?;
    let odd = t.mul(odd, phi)?;
    let odd = t.add(odd, psi)?;
    let rho = b.rho.forward(t, s, odd)?;
    let rho = t.exp(rho);
    let eta = b.eta.forward(t, s, odd)?;
    let even = t.mul(even, rho)?;
    let even = t.add(even, eta)?;
    let even = scinet_tree(t, s, blocks, levels, even, level + 1, 2 * node)?;
    let odd = scinet_tree(t, s, blocks, levels, odd, level + 1, 2 * node + 1)?;
    interleave(t, even, odd)
}

/// Dominant period of `x` from its magnitude spectrum: `round(N / k)` for
/// the strongest non-zero bin `k`, capped at 366. Falls back to 365 when the
/// spectrum is flat.
pub fn detect_period(x: &[f64]) -> usize {
    const FALLBACK: usize = 365;
    let n = x.len();
    if n < 4 {
        return FALLBACK;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let mag = crate::autodiff::rfft_magnitude(&centred);
    let (k, peak) =
        mag.iter().enumerate().skip(1).fold(
            (0, 0.0),
            |(bk, bv), (k, v)| if *v > bv { (k, *v) } else { (bk, bv) },
        );
    let total: f64 = mag.iter().skip(1).sum();
    let bins = (mag.len() - 1) as f64;
    // Flat: the peak does not stand out from an even spread of energy.
    if k == 0 || peak <= 1e-12 || peak <= 2.0 * total / bins {
        return FALLBACK;
    }
    ((n as f64 / k as f64).round() as usize).clamp(2, 366)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn interleave_inverts_split() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[3, 8], |i| i as f64 * 0.5));
        let (e, o) = split_even_odd(&mut t, x).unwrap();
        assert_eq!(&t.value(e)[..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&t.value(o)[..4], &[0.5, 1.5, 2.5, 3.5]);
        let back = interleave(&mut t, e, o).unwrap();
        assert_eq!(t.value(back), t.value(x));
    }

    #[test]
    fn period_of_sinusoid() {
        let x: Vec<f64> = (0..1000)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 50.0).sin())
            .collect();
        assert_eq!(detect_period(&x), 50);
        let yearly: Vec<f64> = (0..3650)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 365.25).cos())
            .collect();
        assert_eq!(detect_period(&yearly), 365);
    }

    #[test]
    fn flat_spectrum_falls_back() {
        assert_eq!(detect_period(&vec![0.4; 500]), 365);
        let impulse: Vec<f64> = (0..512).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(detect_period(&impulse), 365);
    }

    #[test]
    fn scinet_padding_length() {
        assert_eq!(scinet_len(15, 2), 16);
        assert_eq!(scinet_len(16, 2), 16);
        assert_eq!(scinet_len(7, 2), 8);
        assert_eq!(scinet_len(15, 0), 15);
    }

    #[test]
    fn untrained_scinet_tree_is_identity() {
        let cfg = BackboneConfig::new(BackboneKind::SciNet);
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let net = Net::new(&cfg, 2, 1, &mut store, &mut rng).unwrap();
        let Net::SciNet {
            levels,
            blocks,
            dec,
            ..
        } = &net
        else {
            unreachable!()
        };
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[4, 16], |i| (i as f64 * 0.37).sin()));
        let h = scinet_tree(&mut t, &store, blocks, *levels, x, 0, 0).unwrap();
        assert_eq!(t.value(h), t.value(x));
        // Output is the decoder of the last-value-centred input plus that value.
        let raw = t.constant(Tensor::from_fn(&[4, 16], |i| (i as f64 * 0.37).sin()));
        let ctx = BatchCtx {
            samples: 2,
            dim: 2,
            starts: &[0, 0],
        };
        let y = net.forward(&mut t, &store, raw, &ctx).unwrap();
        let last = last_value(&mut t, raw, 16).unwrap();
        let c = t.sub(raw, last).unwrap();
        let d = dec.forward(&mut t, &store, c).unwrap();
        let l = last_value(&mut t, raw, cfg.p).unwrap();
        let want = t.add(d, l).unwrap();
        assert_eq!(t.value(y), t.value(want));
    }

    #[test]
    fn cycle_phase_wraps_at_the_period() {
        let ctx = BatchCtx {
            samples: 1,
            dim: 2,
            starts: &[48],
        };
        let idx = cycle_index(&ctx, 50, 0, 4);
        // Channel 0 then channel 1, phases 48, 49, 0, 1.
        assert_eq!(&idx[..], &[96, 98, 0, 2, 97, 99, 1, 3]);
        let ctx = BatchCtx {
            samples: 1,
            dim: 1,
            starts: &[-3],
        };
        assert_eq!(&cycle_index(&ctx, 50, 15, 2)[..], &[12, 13]);
    }
}
