//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse, consuming it. Training loops record a fresh
//! tape per step.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Scale(Var, f64),
    Mean(Var),
    MseLoss(Var, Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    MovingAvg(Var, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// How the right operand of an elementwise op maps onto the left one.
#[derive(Debug, Clone, Copy)]
enum Bcast {
    Same,
    /// Right operand repeats every `inner` elements of the left.
    Repeat(usize),
}

fn bcast(a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    let b_trim: &[usize] = {
        let lead = b.iter().take_while(|d| **d == 1).count();
        &b[lead..]
    };
    if b_trim.len() <= a.len() && a[a.len() - b_trim.len()..] == *b_trim {
        return Ok(Bcast::Repeat(numel(b_trim)));
    }
    Err(Error::shape(a, b))
}

/// Mirror index into `0..len` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: buffer lengths match the dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[outer, axis, inner]` view of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it receives a gradient when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf(None), rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf(None), false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Records a trainable parameter from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf(Some(id)),
            true,
        )
    }

    /// Copies `v` into a new leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf(None), false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// True when `v` is a leaf that does not propagate gradients.
    pub fn is_detached(&self, v: Var) -> bool {
        let n = self.node(v);
        matches!(n.op, Op::Leaf(None)) && !n.needs_grad
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let kind = bcast(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let value: Vec<f64> = match kind {
            Bcast::Same => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Repeat(inner) => av
                .iter()
                .enumerate()
                .map(|(i, x)| f(*x, bv[i % inner]))
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, value, op, ng))
    }

    /// `a + b`; `b` may broadcast over leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            0.0,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::shape(sx, sw));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        if numel(sb) != n {
            return Err(Error::shape(&[n], sb));
        }
        let bias = self.value(b);
        let mut out: Vec<f64> = (0..m * n).map(|i| bias[i % n]).collect();
        gemm(
            m,
            k,
            n,
            self.value(x),
            false,
            self.value(w),
            false,
            &mut out,
            1.0,
        );
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(vec![m, n], out, Op::Affine(x, w, b), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a]);
        self.push(shape, value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(&[a]);
        self.push(vec![], vec![m], Op::Mean(a), ng)
    }

    /// `mean((a - b)²)` as a scalar.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let m = s / av.len().max(1) as f64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![], vec![m], Op::MseLoss(a, b), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidData("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(&base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::shape(&base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::shape(&sa, &[axis, start, len]));
        }
        let (outer, alen, inner) = split_axis(&sa, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let ng = self.ng(&[a]);
        Ok(self.push(
            shape,
            out,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            ng,
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::shape(&[0, 0], sa));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::shape(shape, self.shape(a)));
        }
        let value = self.value(a).to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    /// `out[i] = a.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(Error::shape(shape, &[index.len()]));
        }
        let src = self.value(a);
        if let Some(bad) = index.iter().find(|i| **i >= src.len()) {
            return Err(Error::shape(&[src.len()], &[*bad]));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Gather(a, index), ng))
    }

    /// Centred moving average of width `k` along the last axis, with mirror
    /// padding at both ends.
    pub fn moving_average_1d(&mut self, a: Var, k: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let len = *sa.last().ok_or_else(|| Error::shape(&[0], &sa))?;
        if k == 0 || len == 0 {
            return Err(Error::InvalidConfig(format!(
                "moving average k={k} over length {len}"
            )));
        }
        let pad = ((k - 1) / 2) as isize;
        let src = self.value(a);
        let rows = src.len() / len;
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * len..(r + 1) * len];
            for j in 0..len {
                let s: f64 = (0..k)
                    .map(|o| row[reflect_index(j as isize - pad + o as isize, len)])
                    .sum();
                out[r * len + j] = s / k as f64;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(sa, out, Op::MovingAvg(a, k), ng))
    }

    /// Magnitude spectrum of each row along the last axis. Not differentiable:
    /// the result is a constant.
    pub fn rfft_magnitude(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let len = *sa.last().ok_or_else(|| Error::shape(&[0], &sa))?;
        let src = self.value(a);
        let rows = src.len().checked_div(len).unwrap_or(0);
        let bins = len / 2 + 1;
        let mut out = Vec::with_capacity(rows * bins);
        for r in 0..rows {
            out.extend(super::rfft_magnitude(&src[r * len..(r + 1) * len]));
        }
        let mut shape = sa;
        *shape.last_mut().expect("non-empty shape") = bins;
        Ok(self.push(shape, out, Op::Leaf(None), false))
    }

    /// Back-propagates from the scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut nodes[id].op, Op::Leaf(None));
            if let Op::Leaf(pid) = op {
                leaves.push((Var(id), pid, g));
                continue;
            }
            backprop(&nodes, id, &op, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn reduce_bcast(g: &[f64], kind: Bcast, out: &mut [f64], sign: f64) {
    match kind {
        Bcast::Same => out.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x),
        Bcast::Repeat(inner) => g
            .iter()
            .enumerate()
            .for_each(|(i, x)| out[i % inner] += sign * x),
    }
}

fn backprop(nodes: &[Node], id: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let shape = |v: Var| &nodes[v.0].shape;
    match op {
        Op::Leaf(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let kind = bcast(shape(*a), shape(*b)).expect("checked in forward");
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)
            });
            acc(grads, nodes, *b, |gb| reduce_bcast(g, kind, gb, sign));
        }
        Op::Mul(a, b) => {
            let kind = bcast(shape(*a), shape(*b)).expect("checked in forward");
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |ga| match kind {
                Bcast::Same => ga
                    .iter_mut()
                    .zip(g)
                    .zip(bv)
                    .for_each(|((o, x), y)| *o += x * y),
                Bcast::Repeat(inner) => ga
                    .iter_mut()
                    .zip(g)
                    .enumerate()
                    .for_each(|(i, (o, x))| *o += x * bv[i % inner]),
            });
            let prod: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
            acc(grads, nodes, *b, |gb| reduce_bcast(&prod, kind, gb, 1.0));
        }
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |ga| {
                gemm(m, n, k, g, false, bv, true, ga, 1.0)
            });
            acc(grads, nodes, *b, |gb| {
                gemm(k, m, n, av, true, g, false, gb, 1.0)
            });
        }
        Op::Affine(x, w, b) => {
            let (m, k) = (shape(*x)[0], shape(*x)[1]);
            let n = shape(*w)[1];
            let (xv, wv) = (val(*x), val(*w));
            acc(grads, nodes, *x, |gx| {
                gemm(m, n, k, g, false, wv, true, gx, 1.0)
            });
            acc(grads, nodes, *w, |gw| {
                gemm(k, m, n, xv, true, g, false, gw, 1.0)
            });
            acc(grads, nodes, *b, |gb| {
                for (i, x) in g.iter().enumerate() {
                    gb[i % n] += x;
                }
            });
        }
        Op::Relu(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |ga| {
                for ((o, x), v) in ga.iter_mut().zip(g).zip(av) {
                    if *v > 0.0 {
                        *o += x;
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let av = val(*a);
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(av)
                    .for_each(|((o, x), v)| *o += x * gelu_grad(*v))
            });
        }
        Op::Tanh(a) => {
            let yv = &nodes[id].value;
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(yv)
                    .for_each(|((o, x), y)| *o += x * (1.0 - y * y))
            });
        }
        Op::Exp(a) => {
            let yv = &nodes[id].value;
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut()
                    .zip(g)
                    .zip(yv)
                    .for_each(|((o, x), y)| *o += x * y)
            });
        }
        Op::Scale(a, c) => {
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x * c)
            });
        }
        Op::Mean(a) => {
            let n = val(*a).len().max(1) as f64;
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut().for_each(|o| *o += g[0] / n)
            });
        }
        Op::MseLoss(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let s = 2.0 * g[0] / av.len().max(1) as f64;
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut()
                    .zip(av)
                    .zip(bv)
                    .for_each(|((o, x), y)| *o += s * (x - y))
            });
            acc(grads, nodes, *b, |gb| {
                gb.iter_mut()
                    .zip(av)
                    .zip(bv)
                    .for_each(|((o, x), y)| *o -= s * (x - y))
            });
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(&nodes[id].shape, *axis);
            let mut offset = 0;
            for p in parts {
                let len = shape(*p)[*axis];
                acc(grads, nodes, *p, |gp| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for j in 0..len * inner {
                            gp[dst + j] += g[src + j];
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Slice { src, axis, start } => {
            let (outer, alen, inner) = split_axis(shape(*src), *axis);
            let len = nodes[id].shape[*axis];
            acc(grads, nodes, *src, |gs| {
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    for j in 0..len * inner {
                        gs[base + j] += g[o * len * inner + j];
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = (shape(*a)[0], shape(*a)[1]);
            acc(grads, nodes, *a, |ga| {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Reshape(a) => {
            acc(grads, nodes, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(o, x)| *o += x)
            });
        }
        Op::Gather(a, index) => {
            acc(grads, nodes, *a, |ga| {
                for (x, &i) in g.iter().zip(index.iter()) {
                    ga[i] += x;
                }
            });
        }
        Op::MovingAvg(a, k) => {
            let len = *shape(*a).last().expect("non-empty");
            let pad = ((k - 1) / 2) as isize;
            let kf = *k as f64;
            acc(grads, nodes, *a, |ga| {
                for r in 0..g.len() / len {
                    for j in 0..len {
                        let gj = g[r * len + j] / kf;
                        for o in 0..*k {
                            ga[r * len + reflect_index(j as isize - pad + o as isize, len)] += gj;
                        }
                    }
                }
            });
        }
    }
}

/// Gradients of the leaves reached by a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: Vec<(Var, Option<ParamId>, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves
            .iter()
            .find(|(l, ..)| *l == v)
            .map(|(_, _, g)| g.as_slice())
    }

    /// Adds parameter gradients into `store`.
    pub fn apply(&self, store: &mut ParamStore) {
        for (_, pid, g) in &self.leaves {
            if let Some(pid) = pid {
                store.accumulate_grad(*pid, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(3));
        let a = t.constant(Tensor::from_fn(&[3, 2], |k| k as f64 * 0.5 - 1.0));
        let out = t.matmul(i, a).unwrap();
        assert_eq!(t.value(out), t.value(a));
    }

    #[test]
    fn transpose_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn(&[2, 3], |k| k as f64));
        let at = t.transpose(a).unwrap();
        assert_eq!(t.shape(at), &[3, 2]);
        assert_eq!(t.value(at), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn moving_average_of_constant() {
        for k in [1, 2, 5, 25, 40] {
            let mut t = Tape::new();
            let a = t.constant(Tensor::full(&[3, 7], 0.37));
            let m = t.moving_average_1d(a, k).unwrap();
            for v in t.value(m) {
                assert!((v - 0.37).abs() < 1e-15, "k={k}: {v}");
            }
        }
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        match t.matmul(a, b) {
            Err(Error::Shape { expected, actual }) => {
                assert_eq!(expected, vec![2, 3]);
                assert_eq!(actual, vec![2, 2]);
            }
            other => panic!("{other:?}"),
        }
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn broadcast_over_leading_dim() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_fn(&[2, 3], |k| k as f64));
        let b = t.constant(Tensor::new(&[3], vec![10.0, 20.0, 30.0]).unwrap());
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let c = t.scalar(2.0);
        let p = t.mul(a, c).unwrap();
        assert_eq!(t.value(p), &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2]).with_grad());
        assert!(matches!(t.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detached_leaf_gets_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[3], 2.0).with_grad());
        let y = t.mul(x, x).unwrap();
        let d = t.detach(y);
        let z = t.mul(d, x).unwrap();
        let loss = t.mean(z);
        let g = t.backward(loss).unwrap();
        assert!(g.get(d).is_none());
        // d/dx mean(d * x) with d held fixed at 4.
        for v in g.get(x).unwrap() {
            assert!((v - 4.0 / 3.0).abs() < 1e-12);
        }
    }
}
