//! KAN layers: per-unit scalar projection, B-spline expansion, smooth
//! nonlinearity, and the curvature / Jacobian regularizers.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::diff::{jac_terms, Activation, DenseArray, DiffError, ParamId, ParamStore, Tape, Var};
use crate::spline::SplineBasis;

/// Default bank: cubic, 8 bases over `[-3, 3]`.
pub fn default_basis() -> Arc<SplineBasis> {
    Arc::new(SplineBasis::clamped_uniform(3, 8, -3.0, 3.0).expect("valid default basis"))
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SplineRegConfig {
    pub lambda_c: f64,
    pub lambda_l: f64,
    /// Upper bound on rows per layer used to estimate the Jacobian term;
    /// larger inputs are subsampled with a fixed stride. 0 means all rows.
    pub jac_max_rows: usize,
}

impl Default for SplineRegConfig {
    fn default() -> Self {
        Self { lambda_c: 1e-3, lambda_l: 1e-4, jac_max_rows: 256 }
    }
}

impl SplineRegConfig {
    pub fn stride_for(&self, rows: usize) -> usize {
        if self.jac_max_rows == 0 {
            1
        } else {
            rows.div_ceil(self.jac_max_rows).max(1)
        }
    }
}

/// One layer of `d_out` units sharing a basis bank.
///
/// Unit `j` computes `σ(b_j + Σ_m w_jm B_m(h·tanh(a_jᵀx + c_j)))` where `h` is
/// the half-width of the (symmetric) spline domain.
#[derive(Clone, Debug)]
pub struct KanLayer {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub act: Activation,
    basis: Arc<SplineBasis>,
    a: ParamId,
    c: ParamId,
    w: ParamId,
    b: ParamId,
}

/// Tape handles produced by [`KanLayer::forward`].
#[derive(Copy, Clone, Debug)]
pub struct KanOut {
    pub y: Var,
    /// Pre-squash projections `a_jᵀx + c_j`.
    pub s: Var,
    a: Var,
    w: Var,
    b: Var,
}

impl KanLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        basis: &Arc<SplineBasis>,
        act: Activation,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let (lo, hi) = basis.domain();
        if (lo + hi).abs() > 1e-12 || d_in == 0 || d_out == 0 {
            return Err(DiffError::Shape { op: "kan_layer", shapes: vec![vec![d_in, d_out]] });
        }
        let m = basis.count();
        let bound = 1.0 / (d_in as f64).sqrt();
        let ua = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let a: Vec<f64> = (0..d_out * d_in).map(|_| ua.sample(rng)).collect();
        let nw = Normal::new(0.0, 0.1 / (m as f64).sqrt()).expect("finite std");
        let w: Vec<f64> = (0..d_out * m).map(|_| nw.sample(rng)).collect();
        let a = store.insert(&format!("{name}.a"), DenseArray::from_vec(&[d_out, d_in], a)?)?;
        let c = store.insert(&format!("{name}.c"), DenseArray::zeros(&[d_out]))?;
        let w = store.insert(&format!("{name}.w"), DenseArray::from_vec(&[d_out, m], w)?)?;
        let b = store.insert(&format!("{name}.b"), DenseArray::zeros(&[d_out]))?;
        Ok(Self { name: name.to_string(), d_in, d_out, act, basis: basis.clone(), a, c, w, b })
    }

    pub fn basis(&self) -> &Arc<SplineBasis> {
        &self.basis
    }

    pub fn num_params(&self) -> usize {
        self.d_out * (self.d_in + 2 + self.basis.count())
    }

    pub fn coef_id(&self) -> ParamId {
        self.w
    }

    pub fn proj_id(&self) -> ParamId {
        self.a
    }

    pub fn offset_id(&self) -> ParamId {
        self.c
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }

    fn half(&self) -> f64 {
        self.basis.domain().1
    }

    /// Applies the layer row-wise to `x: [..., d_in]`.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<KanOut, DiffError> {
        let (a, c, w, b) = (t.param(self.a), t.param(self.c), t.param(self.w), t.param(self.b));
        let s = t.linear(x, a, Some(c))?;
        let u = t.scaled_tanh(s, self.half());
        let pre = t.spline_bank(u, w, b, &self.basis)?;
        let y = t.activation(pre, self.act);
        Ok(KanOut { y, s, a, w, b })
    }

    /// `λ_c R_curv + λ_L R_jac` over the rows seen by `out`.
    pub fn regularizer(&self, t: &mut Tape, out: &KanOut, cfg: &SplineRegConfig) -> Result<Var, DiffError> {
        let mut terms = Vec::with_capacity(2);
        if cfg.lambda_c > 0.0 {
            if self.basis.count() < 3 {
                log::warn!("{}: curvature penalty needs at least 3 bases, using 0", self.name);
            } else {
                terms.push((t.curvature(out.w)?, cfg.lambda_c));
            }
        }
        if cfg.lambda_l > 0.0 {
            let stride = cfg.stride_for(t.value(out.s).rows());
            terms.push((t.jacobian_penalty(out.s, out.a, out.w, out.b, &self.basis, self.act, stride)?, cfg.lambda_l));
        }
        t.weighted_sum(&terms)
    }

    /// Plain evaluation of one input vector.
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let (a, c, w, b) = self.views(store);
        let m = self.basis.count();
        (0..self.d_out)
            .map(|j| {
                let s: f64 = c[j] + a[j * self.d_in..(j + 1) * self.d_in].iter().zip(x).map(|(p, v)| p * v).sum::<f64>();
                self.act.apply(b[j] + self.basis.combine(&w[j * m..(j + 1) * m], self.half() * s.tanh()).0)
            })
            .collect()
    }

    /// `∂φ/∂x` as a `d_out × d_in` row-major matrix.
    pub fn jacobian(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let (a, c, w, b) = self.views(store);
        let m = self.basis.count();
        let mut out = vec![0.0; self.d_out * self.d_in];
        for j in 0..self.d_out {
            let aj = &a[j * self.d_in..(j + 1) * self.d_in];
            let s: f64 = c[j] + aj.iter().zip(x).map(|(p, v)| p * v).sum::<f64>();
            let g = jac_terms(s, self.half(), &w[j * m..(j + 1) * m], b[j], &self.basis, self.act).g;
            for (o, p) in out[j * self.d_in..(j + 1) * self.d_in].iter_mut().zip(aj) {
                *o = g * p;
            }
        }
        out
    }

    /// Unit `j`'s response `σ(b_j + Σ_m w_jm B_m(u))` at spline input `u`.
    pub fn unit_response(&self, store: &ParamStore, j: usize, u: f64) -> f64 {
        let (_, _, w, b) = self.views(store);
        let m = self.basis.count();
        self.act.apply(b[j] + self.basis.combine(&w[j * m..(j + 1) * m], u).0)
    }

    fn views<'s>(&self, store: &'s ParamStore) -> (&'s [f64], &'s [f64], &'s [f64], &'s [f64]) {
        (
            store.value(self.a).data(),
            store.value(self.c).data(),
            store.value(self.w).data(),
            store.value(self.b).data(),
        )
    }

    pub fn stats(&self, store: &ParamStore) -> SplineStats {
        SplineStats::from_layer(self, store)
    }
}

/// A stack of KAN layers applied in sequence.
#[derive(Clone, Debug)]
pub struct KanStack {
    pub layers: Vec<KanLayer>,
}

impl KanStack {
    /// Builds `widths.len() - 1` layers; every layer uses `hidden_act` except
    /// the last, which uses `out_act`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        basis: &Arc<SplineBasis>,
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let n = widths.len().saturating_sub(1);
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let act = if i + 1 == n { out_act } else { hidden_act };
            layers.push(KanLayer::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], basis, act, rng)?);
        }
        Ok(Self { layers })
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    /// Returns the final output and every layer's handles (for regularizers).
    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<(Var, Vec<KanOut>), DiffError> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let o = l.forward(t, h)?;
            h = o.y;
            outs.push(o);
        }
        Ok((h, outs))
    }

    pub fn regularizer(&self, t: &mut Tape, outs: &[KanOut], cfg: &SplineRegConfig) -> Result<Var, DiffError> {
        let mut terms = Vec::with_capacity(outs.len());
        for (l, o) in self.layers.iter().zip(outs) {
            terms.push((l.regularizer(t, o, cfg)?, 1.0));
        }
        t.weighted_sum(&terms)
    }

    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        self.layers.iter().fold(x.to_vec(), |h, l| l.eval(store, &h))
    }
}

pub const HIST_BINS: usize = 64;
pub const CURVE_POINTS: usize = 256;

/// Weight- and activation-level summaries of one KAN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineStats {
    pub layer: String,
    /// `‖w_j‖₂` per unit.
    pub unit_norms: Vec<f64>,
    /// Mean coefficient per basis index, averaged over units.
    pub mean_coef: Vec<f64>,
    /// Histogram of all coefficients over `[hist_lo, hist_hi]`.
    pub hist: Vec<u64>,
    pub hist_lo: f64,
    pub hist_hi: f64,
    pub abs_mean: f64,
    pub abs_var: f64,
    pub abs_min: f64,
    pub abs_max: f64,
    /// Spline inputs at which `curves` are sampled.
    pub grid: Vec<f64>,
    /// `curves[j][i]` is unit `j`'s response at `grid[i]`.
    pub curves: Vec<Vec<f64>>,
}

impl SplineStats {
    fn from_layer(layer: &KanLayer, store: &ParamStore) -> Self {
        let w = store.value(layer.w).data();
        let m = layer.basis.count();
        let unit_norms: Vec<f64> = w.chunks(m).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let mut mean_coef = vec![0.0; m];
        for r in w.chunks(m) {
            for (a, v) in mean_coef.iter_mut().zip(r) {
                *a += v / layer.d_out as f64;
            }
        }
        let (hist_lo, hist_hi, hist) = histogram(w, HIST_BINS);
        let n = w.len() as f64;
        let abs_mean = w.iter().map(|v| v.abs()).sum::<f64>() / n;
        let abs_var = w.iter().map(|v| (v.abs() - abs_mean).powi(2)).sum::<f64>() / n;
        let abs_min = w.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        let abs_max = w.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let (lo, hi) = layer.basis.domain();
        let grid: Vec<f64> = (0..CURVE_POINTS).map(|i| lo + (hi - lo) * i as f64 / (CURVE_POINTS - 1) as f64).collect();
        let curves = (0..layer.d_out).map(|j| grid.iter().map(|&u| layer.unit_response(store, j, u)).collect()).collect();
        Self {
            layer: layer.name.clone(),
            unit_norms,
            mean_coef,
            hist,
            hist_lo,
            hist_hi,
            abs_mean,
            abs_var,
            abs_min,
            abs_max,
            grid,
            curves,
        }
    }
}

/// Equal-width histogram over the observed range; a degenerate range puts
/// all mass in the bin containing that value.
fn histogram(v: &[f64], bins: usize) -> (f64, f64, Vec<u64>) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut h = vec![0u64; bins];
    if v.is_empty() {
        return (0.0, 0.0, h);
    }
    if hi <= lo {
        h[bins / 2] = v.len() as u64;
        return (lo - 0.5, hi + 0.5, h);
    }
    for x in v {
        let i = (((x - lo) / (hi - lo)) * bins as f64) as usize;
        h[i.min(bins - 1)] += 1;
    }
    (lo, hi, h)
}
