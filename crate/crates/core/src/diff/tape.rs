use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use super::array::gemm;
use super::{DenseArray, DiffError, Gradients, ParamId, ParamStore};
use crate::spline::SplineBasis;

/// Pointwise nonlinearities available to layers.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// `x * sigmoid(x)`
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    #[inline]
    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    #[inline]
    pub fn deriv2(self, x: f64) -> f64 {
        match self {
            Activation::Identity | Activation::Relu => 0.0,
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
        }
    }

    /// `(σ'(x), σ''(x))` sharing one transcendental evaluation.
    #[inline]
    pub fn derivs(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Identity | Activation::Relu => (self.deriv(x), 0.0),
            Activation::Tanh => {
                let t = x.tanh();
                let s = 1.0 - t * t;
                (s, -2.0 * t * s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                (s * (1.0 + x * (1.0 - s)), s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s)))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `log(a_max * (1 - tanh(pre)^2))`, stable for large `|pre|`.
#[inline]
pub fn tanh_log_det(pre: f64, a_max: f64) -> f64 {
    a_max.ln() + 2.0 * (LN_2 - pre - softplus(-2.0 * pre))
}

pub(crate) const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log N(pre; μ, diag σ²) - Σ_i log(a_max_i (1 - tanh²(pre_i)))`.
pub fn squashed_gaussian_log_prob(mu: &[f64], log_std: &[f64], pre: &[f64], a_max: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..mu.len() {
        let z = (pre[i] - mu[i]) * (-log_std[i]).exp();
        lp += -0.5 * z * z - log_std[i] - HALF_LN_2PI - tanh_log_det(pre[i], a_max[i]);
    }
    lp
}

/// Spatial layout of one 2-D convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    AddBroadcast { x: Var, e: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Act { x: Var, act: Activation },
    ScaledTanh { x: Var, half: f64 },
    SplineBank { u: Var, coef: Var, bias: Var, basis: Arc<SplineBasis> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    ChannelsToTokens { x: Var },
    PrependToken { p: Var, v: Var },
    PoolTokens { y: Var },
    MeanTokens { y: Var },
    ConcatCols { a: Var, b: Var },
    SliceCols { x: Var, start: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
    Reshape { x: Var },
    GaussianLogProb { mu: Var, log_std: Var, sample: Vec<f64> },
    GaussianEntropy { log_std: Var },
    PpoSurrogate { logp: Var, old: Vec<f64>, adv: Vec<f64>, eps: f64 },
    Mse { v: Var, target: Vec<f64> },
    JacobianPenalty { s: Var, proj: Var, coef: Var, bias: Var, basis: Arc<SplineBasis>, act: Activation, stride: usize },
    Curvature { coef: Var },
    Sum { x: Var },
    Mean { x: Var },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Option<DenseArray>,
    op: Op,
    needs_grad: bool,
}

/// Record of executed primitives over one [`ParamStore`].
///
/// Parameter leaves read values from the store without copying; the reverse
/// sweep returns [`Gradients`] which the caller folds back into the store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    track_kinks: bool,
    kinks: u64,
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> DiffError {
    DiffError::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

fn slot<'g>(grads: &'g mut [Option<DenseArray>], v: Var, shape: &[usize]) -> &'g mut DenseArray {
    grads[v.0].get_or_insert_with(|| DenseArray::zeros(shape))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), track_kinks: false, kinks: 0xcbf2_9ce4_8422_2325 }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    /// Hash non-differentiable branch decisions (ReLU signs, clamp and clip
    /// regions) into [`Tape::kink_signature`].
    pub fn set_track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    #[inline]
    fn kink(&mut self, bit: bool) {
        self.kinks ^= bit as u64 + 1;
        self.kinks = self.kinks.wrapping_mul(0x0100_0000_01b3);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id),
            _ => self.nodes[v.0].value.as_ref().expect("non-leaf node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: DenseArray, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: DenseArray) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Input, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var, DiffError> {
        let id = self.params.id(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        Ok(self.param(id))
    }

    /// `x[..., n] · wᵀ + b` with `w: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return Err(shape_err("linear", &[xs, ws]));
        }
        let (m, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err("linear.bias", &[ws, self.shape(b)]));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / n;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = m;
        let mut out = DenseArray::zeros(&out_shape);
        gemm(rows, n, m, 1.0, xv.data(), n, 1, self.value(w).data(), 1, n, 0.0, out.data_mut(), m);
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(m) {
                for (o, bb) in row.iter_mut().zip(&bv) {
                    *o += bb;
                }
            }
        }
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &ins))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", &[self.shape(a), self.shape(b)]));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds `e` to every leading slice of `x`; `e`'s shape must be a suffix of `x`'s.
    pub fn add_broadcast(&mut self, x: Var, e: Var) -> Result<Var, DiffError> {
        let (xs, es) = (self.shape(x), self.shape(e));
        if es.len() > xs.len() || xs[xs.len() - es.len()..] != *es {
            return Err(shape_err("add_broadcast", &[xs, es]));
        }
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        for chunk in out.data_mut().chunks_mut(ev.len()) {
            for (o, v) in chunk.iter_mut().zip(ev) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::AddBroadcast { x, e }, &[x, e]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let mut out = self.value(x).clone();
        if self.track_kinks && act == Activation::Relu {
            let bits: Vec<bool> = out.data().iter().map(|v| *v > 0.0).collect();
            bits.into_iter().for_each(|b| self.kink(b));
        }
        out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        self.push(out, Op::Act { x, act }, &[x])
    }

    /// `half * tanh(x)`, squashing onto a symmetric spline domain.
    pub fn scaled_tanh(&mut self, x: Var, half: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = half * v.tanh());
        self.push(out, Op::ScaledTanh { x, half }, &[x])
    }

    /// `out[..., j] = bias[j] + Σ_m coef[j, m] · B_m(u[..., j])`.
    pub fn spline_bank(&mut self, u: Var, coef: Var, bias: Var, basis: &Arc<SplineBasis>) -> Result<Var, DiffError> {
        let (us, cs, bs) = (self.shape(u), self.shape(coef), self.shape(bias));
        let j = us.last().copied().unwrap_or(0);
        if cs != [j, basis.count()] || bs != [j] {
            return Err(shape_err("spline_bank", &[us, cs, bs]));
        }
        let m = basis.count();
        let deg = basis.degree();
        let (cv, bv) = (self.value(coef).data(), self.value(bias).data());
        let mut out = self.value(u).clone();
        for row in out.data_mut().chunks_mut(j) {
            for (k, v) in row.iter_mut().enumerate() {
                let local = basis.eval_values(*v);
                let w = &cv[k * m..(k + 1) * m];
                let mut acc = bv[k];
                for i in 0..=deg {
                    acc += w[local.first + i] * local.values[i];
                }
                *v = acc;
            }
        }
        Ok(self.push(out, Op::SplineBank { u, coef, bias, basis: basis.clone() }, &[u, coef, bias]))
    }

    /// Zero-padded 2-D convolution, `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var, DiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || bs != [ws[0]] {
            return Err(shape_err("conv2d", &[xs, ws, bs]));
        }
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = match (geom.out_size(h, k), geom.out_size(wd, k)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(shape_err("conv2d", &[xs, ws])),
        };
        let kk = c * k * k;
        let p = ho * wo;
        let mut out = DenseArray::zeros(&[batch, o, ho, wo]);
        let mut cols = vec![0.0; p * kk];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for bi in 0..batch {
            im2col(&xv[bi * c * h * wd..(bi + 1) * c * h * wd], c, h, wd, k, geom, ho, wo, &mut cols);
            let y = &mut out.data_mut()[bi * o * p..(bi + 1) * o * p];
            gemm(o, kk, p, 1.0, wv, kk, 1, &cols, 1, kk, 0.0, y, p);
            for (oc, chunk) in y.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[oc]);
            }
        }
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b]))
    }

    /// Normalizes each trailing-axis row, then applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DiffError> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &[self.shape(x), self.shape(gamma), self.shape(beta)]));
        }
        let mut out = self.value(x).clone();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let rows = out.rows();
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in out.data_mut().chunks_mut(d) {
            let (mean, rstd) = row_stats(row);
            for (i, v) in row.iter_mut().enumerate() {
                *v = g[i] * ((*v - mean) * rstd) + bt[i];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, &[x, gamma, beta]))
    }

    /// `[B, C, G1, G2] -> [B, G1*G2, C]`, tokens in row-major grid order.
    pub fn channels_to_tokens(&mut self, x: Var) -> Result<Var, DiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("channels_to_tokens", &[&xs]));
        }
        let (b, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = DenseArray::zeros(&[b, n, c]);
        let od = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..n {
                    od[(bi * n + t) * c + ci] = xv[(bi * c + ci) * n + t];
                }
            }
        }
        Ok(self.push(out, Op::ChannelsToTokens { x }, &[x]))
    }

    /// `p: [B, d]`, `v: [B, N, d]` -> `[B, 1+N, d]`.
    pub fn prepend_token(&mut self, p: Var, v: Var) -> Result<Var, DiffError> {
        let (ps, vs) = (self.shape(p), self.shape(v));
        if ps.len() != 2 || vs.len() != 3 || ps[0] != vs[0] || ps[1] != vs[2] {
            return Err(shape_err("prepend_token", &[ps, vs]));
        }
        let (b, n, d) = (vs[0], vs[1], vs[2]);
        let (pv, vv) = (self.value(p).data(), self.value(v).data());
        let mut out = DenseArray::zeros(&[b, n + 1, d]);
        let od = out.data_mut();
        for bi in 0..b {
            let base = bi * (n + 1) * d;
            od[base..base + d].copy_from_slice(&pv[bi * d..(bi + 1) * d]);
            od[base + d..base + (n + 1) * d].copy_from_slice(&vv[bi * n * d..(bi + 1) * n * d]);
        }
        Ok(self.push(out, Op::PrependToken { p, v }, &[p, v]))
    }

    /// `[B, 1+N, d] -> [B, 2d]`: the first token followed by the mean of the rest.
    pub fn pool_tokens(&mut self, y: Var) -> Result<Var, DiffError> {
        let ys = self.shape(y);
        if ys.len() != 3 || ys[1] < 2 {
            return Err(shape_err("pool_tokens", &[ys]));
        }
        let (b, t, d) = (ys[0], ys[1], ys[2]);
        let yv = self.value(y).data();
        let mut out = DenseArray::zeros(&[b, 2 * d]);
        let od = out.data_mut();
        let inv = 1.0 / (t - 1) as f64;
        for bi in 0..b {
            let src = &yv[bi * t * d..(bi + 1) * t * d];
            let dst = &mut od[bi * 2 * d..(bi + 1) * 2 * d];
            dst[..d].copy_from_slice(&src[..d]);
            for tok in src[d..].chunks(d) {
                for (o, v) in dst[d..].iter_mut().zip(tok) {
                    *o += v;
                }
            }
            dst[d..].iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(out, Op::PoolTokens { y }, &[y]))
    }

    /// `[B, T, d] -> [B, d]` mean over tokens.
    pub fn mean_tokens(&mut self, y: Var) -> Result<Var, DiffError> {
        let ys = self.shape(y);
        if ys.len() != 3 || ys[1] == 0 {
            return Err(shape_err("mean_tokens", &[ys]));
        }
        let (b, t, d) = (ys[0], ys[1], ys[2]);
        let yv = self.value(y).data();
        let mut out = DenseArray::zeros(&[b, d]);
        let inv = 1.0 / t as f64;
        for bi in 0..b {
            let dst = &mut out.data_mut()[bi * d..(bi + 1) * d];
            for tok in yv[bi * t * d..(bi + 1) * t * d].chunks(d) {
                for (o, v) in dst.iter_mut().zip(tok) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(self.push(out, Op::MeanTokens { y }, &[y]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(shape_err("concat_cols", &[as_, bs]));
        }
        let (r, p, q) = (as_[0], as_[1], bs[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = DenseArray::zeros(&[r, p + q]);
        for (i, row) in out.data_mut().chunks_mut(p + q).enumerate() {
            row[..p].copy_from_slice(&av[i * p..(i + 1) * p]);
            row[p..].copy_from_slice(&bv[i * q..(i + 1) * q]);
        }
        Ok(self.push(out, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let xs = self.shape(x);
        if xs.len() != 2 || start + len > xs[1] {
            return Err(shape_err("slice_cols", &[xs]));
        }
        let (r, n) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = DenseArray::zeros(&[r, len]);
        for (i, row) in out.data_mut().chunks_mut(len.max(1)).enumerate().take(r) {
            row.copy_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Elementwise clamp; the gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let mut out = self.value(x).clone();
        if self.track_kinks {
            let bits: Vec<bool> = out.data().iter().map(|v| *v >= lo && *v <= hi).collect();
            bits.into_iter().for_each(|b| self.kink(b));
        }
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    /// Log-density of a tanh-squashed diagonal Gaussian at stored pre-squash
    /// samples `[B, A]`, returning `[B]`.
    pub fn gaussian_log_prob(&mut self, mu: Var, log_std: Var, sample: &DenseArray, a_max: &[f64]) -> Result<Var, DiffError> {
        let (ms, ls) = (self.shape(mu), self.shape(log_std));
        if ms.len() != 2 || ms != ls || sample.shape() != ms || a_max.len() != ms[1] {
            return Err(shape_err("gaussian_log_prob", &[ms, ls, sample.shape()]));
        }
        let (b, a) = (ms[0], ms[1]);
        let (mv, lv, sv) = (self.value(mu).data(), self.value(log_std).data(), sample.data());
        let mut out = DenseArray::zeros(&[b]);
        for (bi, o) in out.data_mut().iter_mut().enumerate() {
            let r = bi * a..(bi + 1) * a;
            *o = squashed_gaussian_log_prob(&mv[r.clone()], &lv[r.clone()], &sv[r], a_max);
        }
        Ok(self.push(out, Op::GaussianLogProb { mu, log_std, sample: sample.data().to_vec() }, &[mu, log_std]))
    }

    /// Closed-form entropy of the pre-squash Gaussian per row.
    pub fn gaussian_entropy(&mut self, log_std: Var) -> Result<Var, DiffError> {
        let ls = self.shape(log_std);
        if ls.len() != 2 {
            return Err(shape_err("gaussian_entropy", &[ls]));
        }
        let (b, a) = (ls[0], ls[1]);
        let c = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        let lv = self.value(log_std).data();
        let mut out = DenseArray::zeros(&[b]);
        for (bi, o) in out.data_mut().iter_mut().enumerate() {
            *o = lv[bi * a..(bi + 1) * a].iter().map(|l| c + l).sum();
        }
        Ok(self.push(out, Op::GaussianEntropy { log_std }, &[log_std]))
    }

    /// `-mean(min(ρA, clip(ρ, 1-ε, 1+ε)A))` with `ρ = exp(logp - old)`.
    pub fn ppo_surrogate(&mut self, logp: Var, old: &[f64], adv: &[f64], eps: f64) -> Result<Var, DiffError> {
        let n = self.value(logp).len();
        if old.len() != n || adv.len() != n || n == 0 {
            return Err(shape_err("ppo_surrogate", &[self.shape(logp), &[old.len()], &[adv.len()]]));
        }
        let lv = self.value(logp).data().to_vec();
        let mut total = 0.0;
        for i in 0..n {
            let rho = (lv[i] - old[i]).exp();
            let s1 = rho * adv[i];
            let s2 = rho.clamp(1.0 - eps, 1.0 + eps) * adv[i];
            if self.track_kinks {
                self.kink(s1 <= s2);
                self.kink(rho >= 1.0 - eps && rho <= 1.0 + eps);
            }
            total += s1.min(s2);
        }
        let out = DenseArray::scalar(-total / n as f64);
        Ok(self.push(out, Op::PpoSurrogate { logp, old: old.to_vec(), adv: adv.to_vec(), eps }, &[logp]))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, v: Var, target: &[f64]) -> Result<Var, DiffError> {
        let vv = self.value(v).data();
        if vv.len() != target.len() || target.is_empty() {
            return Err(shape_err("mse", &[self.shape(v), &[target.len()]]));
        }
        let s: f64 = vv.iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum();
        let out = DenseArray::scalar(s / target.len() as f64);
        Ok(self.push(out, Op::Mse { v, target: target.to_vec() }, &[v]))
    }

    /// Mean over rows of `‖∂φ/∂x‖_F²` for a KAN layer whose projected
    /// pre-squash inputs are `s = x·projᵀ + offset`, using every
    /// `stride`-th row.
    ///
    /// With `u = h·tanh(s)` the Jacobian row of unit `j` is
    /// `σ'(pre_j) · Σ_m w_jm B'_m(u_j) · u'(s_j) · proj_j`, so the squared
    /// Frobenius norm is `Σ_j G_j² ‖proj_j‖²`.
    pub fn jacobian_penalty(
        &mut self,
        s: Var,
        proj: Var,
        coef: Var,
        bias: Var,
        basis: &Arc<SplineBasis>,
        act: Activation,
        stride: usize,
    ) -> Result<Var, DiffError> {
        let stride = stride.max(1);
        let j = self.value(s).cols();
        let (ps, cs, bs) = (self.shape(proj), self.shape(coef), self.shape(bias));
        if ps.len() != 2 || ps[0] != j || cs != [j, basis.count()] || bs != [j] {
            return Err(shape_err("jacobian_penalty", &[self.shape(s), ps, cs, bs]));
        }
        let rows = self.value(s).rows();
        if rows == 0 {
            return Err(DiffError::EmptyBatch("jacobian_penalty"));
        }
        let din = ps[1];
        let pv = self.value(proj).data();
        let a2: Vec<f64> = pv.chunks(din).map(|r| r.iter().map(|v| v * v).sum()).collect();
        let (cv, bv) = (self.value(coef).data(), self.value(bias).data());
        let m = basis.count();
        let half = basis.domain().1;
        let mut total = 0.0;
        for row in self.value(s).data().chunks(j).step_by(stride) {
            for (k, &sv) in row.iter().enumerate() {
                let g = jac_terms(sv, half, &cv[k * m..(k + 1) * m], bv[k], basis, act).g;
                total += g * g * a2[k];
            }
        }
        let used = rows.div_ceil(stride);
        let out = DenseArray::scalar(total / used as f64);
        Ok(self.push(
            out,
            Op::JacobianPenalty { s, proj, coef, bias, basis: basis.clone(), act, stride },
            &[s, proj, coef, bias],
        ))
    }

    /// `Σ_j Σ_m (w_{j,m+1} - 2w_{j,m} + w_{j,m-1})²` over `coef: [J, M]`.
    pub fn curvature(&mut self, coef: Var) -> Result<Var, DiffError> {
        let cs = self.shape(coef);
        if cs.len() != 2 {
            return Err(shape_err("curvature", &[cs]));
        }
        let m = cs[1];
        let mut total = 0.0;
        if m >= 3 {
            for row in self.value(coef).data().chunks(m) {
                for w in row.windows(3) {
                    let d = w[2] - 2.0 * w[1] + w[0];
                    total += d * d;
                }
            }
        }
        Ok(self.push(DenseArray::scalar(total), Op::Curvature { coef }, &[coef]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(DenseArray::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len().max(1) as f64;
        self.push(DenseArray::scalar(s), Op::Mean { x }, &[x])
    }

    /// `Σ_i c_i · x_i` over one-element nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, DiffError> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(shape_err("weighted_sum", &[self.shape(v)]));
            }
            s += c * self.scalar(v);
        }
        let ins: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(DenseArray::scalar(s), Op::WeightedSum { terms: terms.to_vec() }, &ins))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        if self.value(loss).len() != 1 {
            return Err(DiffError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<DenseArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseArray::filled(self.shape(loss), 1.0));
        let mut out = Gradients { slots: (0..self.params.len()).map(|_| None).collect() };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(&node.op, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(
        &self,
        op: &Op,
        g: &DenseArray,
        grads: &mut [Option<DenseArray>],
        out: &mut Gradients,
    ) -> Result<(), DiffError> {
        let gd = g.data();
        match op {
            Op::Input => {}
            Op::Param(id) => {
                let dst = out.slots[id.0].get_or_insert_with(|| DenseArray::zeros(g.shape()));
                dst.add_assign(g);
            }
            Op::Linear { x, w, b } => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = g.len() / m;
                if self.needs(*x) {
                    let dx = slot(grads, *x, self.shape(*x));
                    gemm(rows, m, n, 1.0, gd, m, 1, self.value(*w).data(), n, 1, 1.0, dx.data_mut(), n);
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, &[m, n]);
                    gemm(m, rows, n, 1.0, gd, 1, m, self.value(*x).data(), n, 1, 1.0, dw.data_mut(), n);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = slot(grads, *b, &[m]);
                        for row in gd.chunks(m) {
                            for (d, v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::AddBroadcast { x, e } => {
                if self.needs(*x) {
                    slot(grads, *x, g.shape()).add_assign(g);
                }
                if self.needs(*e) {
                    let es = self.shape(*e).to_vec();
                    let de = slot(grads, *e, &es);
                    let n = de.len();
                    for chunk in gd.chunks(n) {
                        for (d, v) in de.data_mut().iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let da = slot(grads, *a, g.shape());
                    for ((d, gv), bb) in da.data_mut().iter_mut().zip(gd).zip(bv) {
                        *d += gv * bb;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let db = slot(grads, *b, g.shape());
                    for ((d, gv), aa) in db.data_mut().iter_mut().zip(gd).zip(av) {
                        *d += gv * aa;
                    }
                }
            }
            Op::Scale { x, s } => {
                let dx = slot(grads, *x, g.shape());
                for (d, gv) in dx.data_mut().iter_mut().zip(gd) {
                    *d += gv * s;
                }
            }
            Op::Act { x, act } => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.shape());
                for ((d, gv), xx) in dx.data_mut().iter_mut().zip(gd).zip(xv) {
                    *d += gv * act.deriv(*xx);
                }
            }
            Op::ScaledTanh { x, half } => {
                let xv = self.value(*x).data();
                let dx = slot(grads, *x, g.shape());
                for ((d, gv), xx) in dx.data_mut().iter_mut().zip(gd).zip(xv) {
                    let t = xx.tanh();
                    *d += gv * half * (1.0 - t * t);
                }
            }
            Op::SplineBank { u, coef, bias, basis } => {
                let j = self.shape(*coef)[0];
                let m = basis.count();
                let deg = basis.degree();
                let uv = self.value(*u).data();
                let cv = self.value(*coef).data();
                let mut du = if self.needs(*u) { Some(vec![0.0; uv.len()]) } else { None };
                let mut dc = vec![0.0; j * m];
                let mut db = vec![0.0; j];
                for (idx, (&uu, &gv)) in uv.iter().zip(gd).enumerate() {
                    let k = idx % j;
                    let local = basis.eval_local(uu);
                    let w = &cv[k * m..(k + 1) * m];
                    db[k] += gv;
                    let mut dsum = 0.0;
                    for i in 0..=deg {
                        dc[k * m + local.first + i] += gv * local.values[i];
                        dsum += w[local.first + i] * local.d1[i];
                    }
                    if let Some(du) = du.as_mut() {
                        du[idx] = gv * dsum;
                    }
                }
                if let Some(du) = du {
                    let dst = slot(grads, *u, g.shape());
                    for (d, v) in dst.data_mut().iter_mut().zip(du) {
                        *d += v;
                    }
                }
                if self.needs(*coef) {
                    let dst = slot(grads, *coef, &[j, m]);
                    for (d, v) in dst.data_mut().iter_mut().zip(dc) {
                        *d += v;
                    }
                }
                if self.needs(*bias) {
                    let dst = slot(grads, *bias, &[j]);
                    for (d, v) in dst.data_mut().iter_mut().zip(db) {
                        *d += v;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let gs = g.shape();
                let (ho, wo) = (gs[2], gs[3]);
                let (kk, p) = (c * k * k, ho * wo);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.needs(*x);
                let mut dw = vec![0.0; o * kk];
                let mut dbias = vec![0.0; o];
                let mut cols = vec![0.0; p * kk];
                let mut dcols = if need_x { vec![0.0; p * kk] } else { Vec::new() };
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let img = c * h * wd;
                for bi in 0..batch {
                    let dy = &gd[bi * o * p..(bi + 1) * o * p];
                    im2col(&xv[bi * img..(bi + 1) * img], c, h, wd, k, *geom, ho, wo, &mut cols);
                    gemm(o, p, kk, 1.0, dy, p, 1, &cols, kk, 1, 1.0, &mut dw, kk);
                    for (oc, chunk) in dy.chunks(p).enumerate() {
                        dbias[oc] += chunk.iter().sum::<f64>();
                    }
                    if need_x {
                        gemm(p, o, kk, 1.0, dy, 1, p, wv, kk, 1, 0.0, &mut dcols, kk);
                        col2im(&dcols, c, h, wd, k, *geom, ho, wo, &mut dx[bi * img..(bi + 1) * img]);
                    }
                }
                if need_x {
                    let dst = slot(grads, *x, &xs);
                    for (d, v) in dst.data_mut().iter_mut().zip(dx) {
                        *d += v;
                    }
                }
                if self.needs(*w) {
                    let dst = slot(grads, *w, &ws);
                    for (d, v) in dst.data_mut().iter_mut().zip(dw) {
                        *d += v;
                    }
                }
                if self.needs(*b) {
                    let dst = slot(grads, *b, &[o]);
                    for (d, v) in dst.data_mut().iter_mut().zip(dbias) {
                        *d += v;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut dg = vec![0.0; d];
                let mut dbt = vec![0.0; d];
                let need_x = self.needs(*x);
                let mut dx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..mean.len() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for i in 0..d {
                        xhat[i] = (xr[i] - mu) * rs;
                        dg[i] += gr[i] * xhat[i];
                        dbt[i] += gr[i];
                        dxhat[i] = gr[i] * gam[i];
                        s1 += dxhat[i];
                        s2 += dxhat[i] * xhat[i];
                    }
                    if need_x {
                        let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                        for i in 0..d {
                            dx[r * d + i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                if need_x {
                    let dst = slot(grads, *x, g.shape());
                    for (a, v) in dst.data_mut().iter_mut().zip(dx) {
                        *a += v;
                    }
                }
                if self.needs(*gamma) {
                    let dst = slot(grads, *gamma, &[d]);
                    for (a, v) in dst.data_mut().iter_mut().zip(dg) {
                        *a += v;
                    }
                }
                if self.needs(*beta) {
                    let dst = slot(grads, *beta, &[d]);
                    for (a, v) in dst.data_mut().iter_mut().zip(dbt) {
                        *a += v;
                    }
                }
            }
            Op::ChannelsToTokens { x } => {
                let xs = self.shape(*x).to_vec();
                let (b, c, n) = (xs[0], xs[1], xs[2] * xs[3]);
                let dst = slot(grads, *x, &xs);
                let dd = dst.data_mut();
                for bi in 0..b {
                    for ci in 0..c {
                        for t in 0..n {
                            dd[(bi * c + ci) * n + t] += gd[(bi * n + t) * c + ci];
                        }
                    }
                }
            }
            Op::PrependToken { p, v } => {
                let vs = self.shape(*v).to_vec();
                let (b, n, d) = (vs[0], vs[1], vs[2]);
                if self.needs(*p) {
                    let dst = slot(grads, *p, &[b, d]);
                    for bi in 0..b {
                        let src = &gd[bi * (n + 1) * d..bi * (n + 1) * d + d];
                        for (a, s) in dst.data_mut()[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                }
                if self.needs(*v) {
                    let dst = slot(grads, *v, &vs);
                    for bi in 0..b {
                        let src = &gd[bi * (n + 1) * d + d..(bi + 1) * (n + 1) * d];
                        for (a, s) in dst.data_mut()[bi * n * d..(bi + 1) * n * d].iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                }
            }
            Op::PoolTokens { y } => {
                let ys = self.shape(*y).to_vec();
                let (b, t, d) = (ys[0], ys[1], ys[2]);
                let inv = 1.0 / (t - 1) as f64;
                let dst = slot(grads, *y, &ys);
                let dd = dst.data_mut();
                for bi in 0..b {
                    let gr = &gd[bi * 2 * d..(bi + 1) * 2 * d];
                    let base = bi * t * d;
                    for i in 0..d {
                        dd[base + i] += gr[i];
                    }
                    for tok in 1..t {
                        for i in 0..d {
                            dd[base + tok * d + i] += gr[d + i] * inv;
                        }
                    }
                }
            }
            Op::MeanTokens { y } => {
                let ys = self.shape(*y).to_vec();
                let (b, t, d) = (ys[0], ys[1], ys[2]);
                let inv = 1.0 / t as f64;
                let dst = slot(grads, *y, &ys);
                let dd = dst.data_mut();
                for bi in 0..b {
                    for tok in 0..t {
                        for i in 0..d {
                            dd[(bi * t + tok) * d + i] += gd[bi * d + i] * inv;
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                if self.needs(*a) {
                    let s = self.shape(*a).to_vec();
                    let dst = slot(grads, *a, &s);
                    for (row, gr) in dst.data_mut().chunks_mut(p).zip(gd.chunks(p + q)) {
                        for (x, y) in row.iter_mut().zip(&gr[..p]) {
                            *x += y;
                        }
                    }
                }
                if self.needs(*b) {
                    let s = self.shape(*b).to_vec();
                    let dst = slot(grads, *b, &s);
                    for (row, gr) in dst.data_mut().chunks_mut(q).zip(gd.chunks(p + q)) {
                        for (x, y) in row.iter_mut().zip(&gr[p..]) {
                            *x += y;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xs = self.shape(*x).to_vec();
                let n = xs[1];
                let len = g.cols();
                let dst = slot(grads, *x, &xs);
                for (r, gr) in gd.chunks(len.max(1)).enumerate().take(xs[0]) {
                    for (i, v) in gr.iter().enumerate() {
                        dst.data_mut()[r * n + start + i] += v;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dst = slot(grads, *x, g.shape());
                for ((d, gv), xx) in dst.data_mut().iter_mut().zip(gd).zip(xv) {
                    if *xx >= *lo && *xx <= *hi {
                        *d += gv;
                    }
                }
            }
            Op::Reshape { x } => {
                let xs = self.shape(*x).to_vec();
                let dst = slot(grads, *x, &xs);
                for (d, gv) in dst.data_mut().iter_mut().zip(gd) {
                    *d += gv;
                }
            }
            Op::GaussianLogProb { mu, log_std, sample } => {
                let ms = self.shape(*mu).to_vec();
                let a = ms[1];
                let (mv, lv) = (self.value(*mu).data(), self.value(*log_std).data());
                let mut dmu = vec![0.0; mv.len()];
                let mut dls = vec![0.0; mv.len()];
                for k in 0..mv.len() {
                    let gv = gd[k / a];
                    let inv = (-lv[k]).exp();
                    let z = (sample[k] - mv[k]) * inv;
                    dmu[k] = gv * z * inv;
                    dls[k] = gv * (z * z - 1.0);
                }
                if self.needs(*mu) {
                    let dst = slot(grads, *mu, &ms);
                    for (d, v) in dst.data_mut().iter_mut().zip(dmu) {
                        *d += v;
                    }
                }
                if self.needs(*log_std) {
                    let dst = slot(grads, *log_std, &ms);
                    for (d, v) in dst.data_mut().iter_mut().zip(dls) {
                        *d += v;
                    }
                }
            }
            Op::GaussianEntropy { log_std } => {
                let ls = self.shape(*log_std).to_vec();
                let a = ls[1];
                let dst = slot(grads, *log_std, &ls);
                for (k, d) in dst.data_mut().iter_mut().enumerate() {
                    *d += gd[k / a];
                }
            }
            Op::PpoSurrogate { logp, old, adv, eps } => {
                let lv = self.value(*logp).data();
                let n = lv.len() as f64;
                let ls = self.shape(*logp).to_vec();
                let up = gd[0];
                let dst = slot(grads, *logp, &ls);
                for (i, d) in dst.data_mut().iter_mut().enumerate() {
                    let rho = (lv[i] - old[i]).exp();
                    let s1 = rho * adv[i];
                    let s2 = rho.clamp(1.0 - eps, 1.0 + eps) * adv[i];
                    let inside = rho >= 1.0 - eps && rho <= 1.0 + eps;
                    let grad = if s1 <= s2 || inside { rho * adv[i] } else { 0.0 };
                    *d += -up * grad / n;
                }
            }
            Op::Mse { v, target } => {
                let vv = self.value(*v).data();
                let n = vv.len() as f64;
                let vs = self.shape(*v).to_vec();
                let up = gd[0];
                let dst = slot(grads, *v, &vs);
                for ((d, a), t) in dst.data_mut().iter_mut().zip(vv).zip(target) {
                    *d += up * 2.0 * (a - t) / n;
                }
            }
            Op::JacobianPenalty { s, proj, coef, bias, basis, act, stride } => {
                let sv = self.value(*s).data();
                let j = self.value(*s).cols();
                let rows = self.value(*s).rows();
                let pv = self.value(*proj).data();
                let din = self.shape(*proj)[1];
                let (cv, bv) = (self.value(*coef).data(), self.value(*bias).data());
                let m = basis.count();
                let deg = basis.degree();
                let half = basis.domain().1;
                let a2: Vec<f64> = pv.chunks(din).map(|r| r.iter().map(|v| v * v).sum()).collect();
                let c = gd[0] / rows.div_ceil(*stride) as f64;
                let mut ds = if self.needs(*s) { Some(vec![0.0; sv.len()]) } else { None };
                let mut g2 = vec![0.0; j];
                let mut dc = vec![0.0; j * m];
                let mut db = vec![0.0; j];
                for (idx, &x) in sv.iter().enumerate() {
                    if (idx / j) % stride != 0 {
                        continue;
                    }
                    let k = idx % j;
                    let t = jac_terms(x, half, &cv[k * m..(k + 1) * m], bv[k], basis, *act);
                    g2[k] += t.g * t.g;
                    let dg = c * 2.0 * t.g * a2[k];
                    if let Some(ds) = ds.as_mut() {
                        ds[idx] = dg * t.dg_ds;
                    }
                    // ∂G/∂w_m = σ''(pre) B_m(u) Q + σ'(pre) B'_m(u) u'
                    for i in 0..=deg {
                        let mm = local_index(&t, i);
                        dc[k * m + mm] += dg * (t.s2 * t.local.values[i] * t.q + t.s1 * t.local.d1[i] * t.du);
                    }
                    db[k] += dg * t.s2 * t.q;
                }
                if let Some(ds) = ds {
                    let shape = self.shape(*s).to_vec();
                    let dst = slot(grads, *s, &shape);
                    for (d, v) in dst.data_mut().iter_mut().zip(ds) {
                        *d += v;
                    }
                }
                if self.needs(*proj) {
                    let dst = slot(grads, *proj, &[j, din]);
                    for (k, (drow, prow)) in dst.data_mut().chunks_mut(din).zip(pv.chunks(din)).enumerate() {
                        for (d, p) in drow.iter_mut().zip(prow) {
                            *d += c * 2.0 * g2[k] * p;
                        }
                    }
                }
                if self.needs(*coef) {
                    let dst = slot(grads, *coef, &[j, m]);
                    for (d, v) in dst.data_mut().iter_mut().zip(dc) {
                        *d += v;
                    }
                }
                if self.needs(*bias) {
                    let dst = slot(grads, *bias, &[j]);
                    for (d, v) in dst.data_mut().iter_mut().zip(db) {
                        *d += v;
                    }
                }
            }
            Op::Curvature { coef } => {
                let cs = self.shape(*coef).to_vec();
                let m = cs[1];
                let up = gd[0];
                let cv = self.value(*coef).data();
                let dst = slot(grads, *coef, &cs);
                if m >= 3 {
                    for (drow, row) in dst.data_mut().chunks_mut(m).zip(cv.chunks(m)) {
                        for i in 1..m - 1 {
                            let d = row[i + 1] - 2.0 * row[i] + row[i - 1];
                            drow[i - 1] += up * 2.0 * d;
                            drow[i] += up * -4.0 * d;
                            drow[i + 1] += up * 2.0 * d;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                let xs = self.shape(*x).to_vec();
                let dst = slot(grads, *x, &xs);
                dst.data_mut().iter_mut().for_each(|d| *d += gd[0]);
            }
            Op::Mean { x } => {
                let xs = self.shape(*x).to_vec();
                let dst = slot(grads, *x, &xs);
                let n = dst.len() as f64;
                dst.data_mut().iter_mut().for_each(|d| *d += gd[0] / n);
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        let s = self.shape(v).to_vec();
                        let dst = slot(grads, v, &s);
                        dst.data_mut()[0] += gd[0] * c;
                    }
                }
            }
        }
        Ok(())
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + super::LAYER_NORM_EPS).sqrt())
}

/// Per-unit scalars of the Jacobian penalty at pre-squash input `s`.
pub(crate) struct JacTerms {
    pub local: crate::spline::LocalBasis,
    /// `G = σ'(pre) · Q`
    pub g: f64,
    /// `Q = P'(u) · u'(s)`
    pub q: f64,
    pub du: f64,
    pub s1: f64,
    pub s2: f64,
    pub dg_ds: f64,
}

fn local_index(t: &JacTerms, i: usize) -> usize {
    t.local.first + i
}

pub(crate) fn jac_terms(s: f64, half: f64, w: &[f64], bias: f64, basis: &SplineBasis, act: Activation) -> JacTerms {
    let th = s.tanh();
    let sech2 = 1.0 - th * th;
    let u = half * th;
    let du = half * sech2;
    let ddu = -2.0 * half * th * sech2;
    let local = basis.eval_local(u);
    let (mut p0, mut p1, mut p2) = (0.0, 0.0, 0.0);
    for i in 0..=basis.degree() {
        let wm = w[local.first + i];
        p0 += wm * local.values[i];
        p1 += wm * local.d1[i];
        p2 += wm * local.d2[i];
    }
    let pre = bias + p0;
    let (s1, s2) = act.derivs(pre);
    let q = p1 * du;
    let g = s1 * q;
    let dg_ds = s2 * q * q + s1 * (p2 * du * du + p1 * ddu);
    JacTerms { local, g, q, du, s1, s2, dg_ds }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, geom: ConvGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let kk = c * k * k;
    let pad = geom.pad as isize;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            let y0 = (oy * geom.stride) as isize - pad;
            let x0 = (ox * geom.stride) as isize - pad;
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let yy = y0 + ky as isize;
                    let dst = &mut row[(ci * k + ky) * k..(ci * k + ky + 1) * k];
                    if yy < 0 || yy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let line = &plane[yy as usize * w..(yy as usize + 1) * w];
                    for (kx, d) in dst.iter_mut().enumerate() {
                        let xx = x0 + kx as isize;
                        *d = if xx < 0 || xx >= w as isize { 0.0 } else { line[xx as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, geom: ConvGeom, ho: usize, wo: usize, dx: &mut [f64]) {
    let kk = c * k * k;
    let pad = geom.pad as isize;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            let y0 = (oy * geom.stride) as isize - pad;
            let x0 = (ox * geom.stride) as isize - pad;
            for ci in 0..c {
                for ky in 0..k {
                    let yy = y0 + ky as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = x0 + kx as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dx[ci * h * w + yy as usize * w + xx as usize] += row[(ci * k + ky) * k + kx];
                    }
                }
            }
        }
    }
}
