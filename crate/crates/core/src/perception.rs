//! Modality encoders, token assembly, fusion head and the five network
//! variants compared in ablations.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::diff::{Activation, ConvGeom, DenseArray, DiffError, ParamId, ParamStore, Tape, Var};
use crate::kan::{KanLayer, KanOut, KanStack, SplineRegConfig};
use crate::spline::SplineBasis;

pub const PROPRIO_DIM: usize = 84;
pub const ACTION_DIM: usize = 12;
pub const DEPTH_FRAMES: usize = 4;
pub const IMG: usize = 64;
pub const DEPTH_MIN: f64 = 0.3;
pub const DEPTH_MAX: f64 = 10.0;

/// Maps metric depth in `[0.3, 10]` onto `[0, 1]`.
#[inline]
pub fn normalize_depth(d: f64) -> f64 {
    (d - DEPTH_MIN) / (DEPTH_MAX - DEPTH_MIN)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ProprioOnly,
    VisionOnlyMlp,
    VisionOnlyKan,
    MlpFusion,
    QuadKan,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::ProprioOnly, Variant::VisionOnlyMlp, Variant::VisionOnlyKan, Variant::MlpFusion, Variant::QuadKan];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ProprioOnly => "proprio_only",
            Variant::VisionOnlyMlp => "vision_only_mlp",
            Variant::VisionOnlyKan => "vision_only_kan",
            Variant::MlpFusion => "mlp_fusion",
            Variant::QuadKan => "quadkan",
        }
    }

    pub fn uses_proprio(self) -> bool {
        !matches!(self, Variant::VisionOnlyMlp | Variant::VisionOnlyKan)
    }

    pub fn uses_vision(self) -> bool {
        self != Variant::ProprioOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected one of proprio_only, vision_only_mlp, vision_only_kan, mlp_fusion, quadkan)"))
    }
}

/// Architecture sizes. The defaults are the full-size network; tests shrink
/// them to keep finite-difference checks cheap.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Token width (`d = d_p = d_v`).
    pub d: usize,
    /// Fused feature width.
    pub d_h: usize,
    /// Hidden width of the proprio KAN encoder and the heads.
    pub hidden: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    /// Square input image side; three stride-2 convolutions reduce it by 8.
    pub img: usize,
    pub cnn_channels: [usize; 2],
    pub spline_degree: usize,
    pub spline_count: usize,
    pub kan_act: Activation,
    /// Initial value of the log-std outputs (bias of those units).
    pub init_log_std: f64,
    /// When false, log σ is a free parameter vector instead of a head output.
    pub state_dependent_std: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            d: 84,
            d_h: 256,
            hidden: 256,
            proprio_dim: PROPRIO_DIM,
            action_dim: ACTION_DIM,
            img: IMG,
            cnn_channels: [16, 32],
            spline_degree: 3,
            spline_count: 8,
            kan_act: Activation::Silu,
            init_log_std: -1.0,
            state_dependent_std: true,
        }
    }
}

impl NetConfig {
    /// Visual tokens per frame stack.
    pub fn tokens(&self) -> usize {
        let g = self.img / 8;
        g * g
    }
}

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Fully connected layer `act(x·Wᵀ + b)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub d_in: usize,
    pub d_out: usize,
    pub act: Activation,
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        act: Activation,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let bound = gain / (d_in as f64).sqrt();
        let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..d_in * d_out).map(|_| u.sample(rng)).collect();
        let w = store.insert(&format!("{name}.w"), DenseArray::from_vec(&[d_out, d_in], w)?)?;
        let b = store.insert(&format!("{name}.b"), DenseArray::zeros(&[d_out]))?;
        Ok(Self { d_in, d_out, act, w, b })
    }

    pub fn num_params(&self) -> usize {
        self.d_out * (self.d_in + 1)
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let (w, b) = (t.param(self.w), t.param(self.b));
        let y = t.linear(x, w, Some(b))?;
        Ok(t.activation(y, self.act))
    }
}

/// `widths.len() - 1` dense layers: ReLU inside, `out_act` at the end.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        out_act: Activation,
        out_gain: f64,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let n = widths.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let last = i + 1 == n;
            let (act, gain) = if last { (out_act, out_gain) } else { (Activation::Relu, 1.0) };
            layers.push(Dense::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], act, gain, rng)?);
        }
        Ok(Self { layers })
    }

    pub fn count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var, DiffError> {
        let mut h = x;
        for l in &self.layers {
            h = l.forward(t, h)?;
        }
        Ok(h)
    }

    fn last_bias(&self) -> ParamId {
        self.layers[self.layers.len() - 1].b
    }
}

/// Three-stage convolutional encoder producing one token per grid cell.
#[derive(Clone, Debug)]
pub struct DepthCnn {
    convs: Vec<(ParamId, ParamId, ConvGeom)>,
    pub out_channels: usize,
}

impl DepthCnn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &NetConfig, rng: &mut R) -> Result<Self, DiffError> {
        let chans = [DEPTH_FRAMES, cfg.cnn_channels[0], cfg.cnn_channels[1], cfg.d];
        let kernels = [5, 3, 3];
        let mut convs = Vec::new();
        for i in 0..3 {
            let (ci, co, k) = (chans[i], chans[i + 1], kernels[i]);
            let bound = 1.0 / ((ci * k * k) as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w = (0..co * ci * k * k).map(|_| u.sample(rng)).collect();
            let w = store.insert(&format!("{name}.{i}.w"), DenseArray::from_vec(&[co, ci, k, k], w)?)?;
            let b = store.insert(&format!("{name}.{i}.b"), DenseArray::zeros(&[co]))?;
            convs.push((w, b, ConvGeom { stride: 2, pad: k / 2 }));
        }
        Ok(Self { convs, out_channels: cfg.d })
    }

    /// `[B, 4, H, W]` normalized depth -> `[B, N, d]` tokens.
    pub fn forward(&self, t: &mut Tape, img: Var) -> Result<Var, DiffError> {
        let mut h = img;
        for &(w, b, geom) in &self.convs {
            let (w, b) = (t.param(w), t.param(b));
            h = t.conv2d(h, w, b, geom)?;
            h = t.activation(h, Activation::Relu);
        }
        t.channels_to_tokens(h)
    }
}

/// Learned positional table, modality tags and layer norm over the tokens.
#[derive(Clone, Debug)]
pub struct TokenAssembler {
    pub w_p: Option<ParamId>,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub b_p: Option<ParamId>,
    pub e_pos: ParamId,
    pub e_mod_prop: Option<ParamId>,
    pub e_mod_vis: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

fn normal_array<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> DenseArray {
    let n = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    DenseArray::from_vec(shape, (0..len).map(|_| n.sample(rng)).collect()).expect("consistent shape")
}

fn linear_init<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<(ParamId, ParamId), DiffError> {
    let bound = 1.0 / (d_in as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let w = (0..d_in * d_out).map(|_| u.sample(rng)).collect();
    let w = store.insert(&format!("{name}.w"), DenseArray::from_vec(&[d_out, d_in], w)?)?;
    let b = store.insert(&format!("{name}.b"), DenseArray::zeros(&[d_out]))?;
    Ok((w, b))
}

impl TokenAssembler {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &NetConfig, with_proprio: bool, rng: &mut R) -> Result<Self, DiffError> {
        let d = cfg.d;
        let n = cfg.tokens();
        let (w_p, b_p) = if with_proprio {
            let (w, b) = linear_init(store, "assemble.w_p", d, d, rng)?;
            (Some(w), Some(b))
        } else {
            (None, None)
        };
        let (w_v, b_v) = linear_init(store, "assemble.w_v", d, d, rng)?;
        let rows = if with_proprio { n + 1 } else { n };
        let e_pos = store.insert("assemble.e_pos", normal_array(&[rows, d], 0.02, rng))?;
        let e_mod_prop = if with_proprio { Some(store.insert("assemble.e_mod_prop", normal_array(&[d], 0.02, rng))?) } else { None };
        let e_mod_vis = store.insert("assemble.e_mod_vis", normal_array(&[d], 0.02, rng))?;
        let ln_gamma = store.insert("assemble.ln_gamma", DenseArray::filled(&[d], 1.0))?;
        let ln_beta = store.insert("assemble.ln_beta", DenseArray::zeros(&[d]))?;
        Ok(Self { w_p, b_p, w_v, b_v, e_pos, e_mod_prop, e_mod_vis, ln_gamma, ln_beta })
    }

    /// `LN([W_p p ; z_vis W_v] + E_pos + E_mod)`; without a proprio token the
    /// stream holds visual rows only.
    pub fn forward(&self, t: &mut Tape, p: Option<Var>, v: Var) -> Result<Var, DiffError> {
        let (wv, bv) = (t.param(self.w_v), t.param(self.b_v));
        let vis = t.linear(v, wv, Some(bv))?;
        let emv = t.param(self.e_mod_vis);
        let vis = t.add_broadcast(vis, emv)?;
        let all = match (p, self.w_p, self.b_p, self.e_mod_prop) {
            (Some(p), Some(wp), Some(bp), Some(emp)) => {
                let (wp, bp, emp) = (t.param(wp), t.param(bp), t.param(emp));
                let pt = t.linear(p, wp, Some(bp))?;
                let pt = t.add_broadcast(pt, emp)?;
                t.prepend_token(pt, vis)?
            }
            _ => vis,
        };
        let pos = t.param(self.e_pos);
        let all = t.add_broadcast(all, pos)?;
        let (g, b) = (t.param(self.ln_gamma), t.param(self.ln_beta));
        t.layer_norm(all, g, b)
    }
}

/// Batched network inputs.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    /// `[B, proprio_dim]`
    pub proprio: DenseArray,
    /// `[B, 4, img, img]`, already normalized to `[0, 1]`.
    pub depth: DenseArray,
}

impl ObsBatch {
    /// Builds a batch from raw rows; depth is metric and gets normalized.
    /// An empty `depth` slice gives a `[B, 0]` placeholder for variants
    /// without vision.
    pub fn from_raw(cfg: &NetConfig, proprio: &[f64], depth: &[f32]) -> Result<Self, DiffError> {
        let b = proprio.len() / cfg.proprio_dim;
        let proprio = DenseArray::from_vec(&[b, cfg.proprio_dim], proprio.to_vec())?;
        let depth = if depth.is_empty() {
            DenseArray::zeros(&[b, 0])
        } else {
            let depth: Vec<f64> = depth.iter().map(|&v| normalize_depth(v as f64)).collect();
            DenseArray::from_vec(&[b, DEPTH_FRAMES, cfg.img, cfg.img], depth)?
        };
        Ok(Self { proprio, depth })
    }

    pub fn batch(&self) -> usize {
        self.proprio.shape()[0]
    }
}

/// Tape handles for one network evaluation.
#[derive(Clone, Debug)]
pub struct NetOut {
    /// Fused feature `h_t`, `[B, d_h]`.
    pub h: Var,
    /// `[B, A]`
    pub mu: Var,
    /// `[B, A]`, clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Var,
    /// `[B, 1]`
    pub value: Var,
    /// Visual token stream before fusion, when the variant has one.
    pub tokens: Option<Var>,
    kan: Vec<KanOut>,
}

#[derive(Clone, Debug)]
enum ProprioEnc {
    None,
    Kan(KanStack),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
enum Trunk {
    /// Token-wise KAN over the stream, pooled, then a KAN projection.
    KanFusion { g: KanStack, head: KanLayer },
    /// Pooled features through an MLP.
    Mlp(Mlp),
    /// KAN projection of the proprio token only.
    Identity,
}

#[derive(Clone, Debug)]
enum Heads {
    Kan { pi: KanStack, v: KanStack },
    Mlp { pi: Mlp, v: Mlp },
}

/// Plain token projections used by the MLP variants.
#[derive(Clone, Debug)]
struct Projections {
    p: Option<(ParamId, ParamId)>,
    v: (ParamId, ParamId),
}

/// A policy/value network of one [`Variant`].
#[derive(Clone, Debug)]
pub struct Network {
    pub variant: Variant,
    pub cfg: NetConfig,
    basis: Arc<SplineBasis>,
    proprio: ProprioEnc,
    cnn: Option<DepthCnn>,
    assemble: Option<TokenAssembler>,
    proj: Option<Projections>,
    trunk: Trunk,
    heads: Heads,
    free_log_std: Option<ParamId>,
    /// Hidden width picked for MLP parts (parameter matching).
    pub mlp_hidden: usize,
}

/// Per-component scalar counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCounts {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

fn kan_count(widths: &[usize], m: usize) -> usize {
    widths.windows(2).map(|w| w[1] * (w[0] + 2 + m)).sum()
}

/// Width in `[8, 2048]` whose count is closest to `target`.
fn match_width(target: usize, count: impl Fn(usize) -> usize) -> usize {
    (8..=2048).min_by_key(|&h| count(h).abs_diff(target)).unwrap_or(8)
}

impl Network {
    pub fn new<R: Rng>(variant: Variant, cfg: &NetConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self, DiffError> {
        let basis = Arc::new(
            SplineBasis::clamped_uniform(cfg.spline_degree, cfg.spline_count, -3.0, 3.0)
                .map_err(|e| DiffError::StoreMismatch(format!("spline basis: {e}")))?,
        );
        let (d, dh, hid, m) = (cfg.d, cfg.d_h, cfg.hidden, cfg.spline_count);
        let a = cfg.action_dim;
        let pi_out = if cfg.state_dependent_std { 2 * a } else { a };
        let act = cfg.kan_act;
        let n = cfg.tokens();

        let mlp_hidden = match variant {
            Variant::VisionOnlyMlp => {
                let target = n * d + 3 * d + 3 * kan_count(&[d, d], m) + kan_count(&[d, dh], m)
                    + kan_count(&[dh, hid, pi_out], m)
                    + kan_count(&[dh, hid, 1], m);
                match_width(target, |h| Mlp::count(&[d, h, dh]) + Mlp::count(&[dh, h, pi_out]) + Mlp::count(&[dh, h, 1]))
            }
            Variant::MlpFusion => {
                let target = kan_count(&[cfg.proprio_dim, hid, d], m) + (n + 1) * d + 4 * d
                    + 3 * kan_count(&[d, d], m)
                    + kan_count(&[2 * d, dh], m)
                    + kan_count(&[dh, hid, pi_out], m)
                    + kan_count(&[dh, hid, 1], m);
                let fixed = Mlp::count(&[cfg.proprio_dim, hid, d]);
                match_width(target.saturating_sub(fixed), |h| {
                    Mlp::count(&[2 * d, h, dh]) + Mlp::count(&[dh, h, pi_out]) + Mlp::count(&[dh, h, 1])
                })
            }
            _ => hid,
        };

        let proprio = match variant {
            Variant::QuadKan | Variant::ProprioOnly => {
                ProprioEnc::Kan(KanStack::new(store, "proprio", &[cfg.proprio_dim, hid, d], &basis, act, act, rng)?)
            }
            Variant::MlpFusion => {
                ProprioEnc::Mlp(Mlp::new(store, "proprio", &[cfg.proprio_dim, hid, d], Activation::Relu, 1.0, rng)?)
            }
            _ => ProprioEnc::None,
        };
        let cnn = if variant.uses_vision() { Some(DepthCnn::new(store, "cnn", cfg, rng)?) } else { None };
        let assemble = match variant {
            Variant::QuadKan => Some(TokenAssembler::new(store, cfg, true, rng)?),
            Variant::VisionOnlyKan => Some(TokenAssembler::new(store, cfg, false, rng)?),
            _ => None,
        };
        let proj = match variant {
            Variant::VisionOnlyMlp => Some(Projections { p: None, v: linear_init(store, "assemble.w_v", d, d, rng)? }),
            Variant::MlpFusion => Some(Projections {
                p: Some(linear_init(store, "assemble.w_p", d, d, rng)?),
                v: linear_init(store, "assemble.w_v", d, d, rng)?,
            }),
            _ => None,
        };
        let trunk = match variant {
            Variant::QuadKan => Trunk::KanFusion {
                g: KanStack::new(store, "fusion.g", &[d, d, d, d], &basis, act, act, rng)?,
                head: KanLayer::new(store, "fusion.head", 2 * d, dh, &basis, act, rng)?,
            },
            Variant::VisionOnlyKan => Trunk::KanFusion {
                g: KanStack::new(store, "fusion.g", &[d, d, d, d], &basis, act, act, rng)?,
                head: KanLayer::new(store, "fusion.head", d, dh, &basis, act, rng)?,
            },
            Variant::ProprioOnly => Trunk::Identity,
            Variant::VisionOnlyMlp => Trunk::Mlp(Mlp::new(store, "fusion.mlp", &[d, mlp_hidden, dh], Activation::Relu, 1.0, rng)?),
            Variant::MlpFusion => Trunk::Mlp(Mlp::new(store, "fusion.mlp", &[2 * d, mlp_hidden, dh], Activation::Relu, 1.0, rng)?),
        };
        let heads = match variant {
            Variant::QuadKan | Variant::VisionOnlyKan => Heads::Kan {
                pi: KanStack::new(store, "head.pi", &[dh, hid, pi_out], &basis, act, Activation::Identity, rng)?,
                v: KanStack::new(store, "head.v", &[dh, hid, 1], &basis, act, Activation::Identity, rng)?,
            },
            Variant::ProprioOnly => Heads::Mlp {
                pi: Mlp::new(store, "head.pi", &[d, hid, hid, pi_out], Activation::Identity, 0.1, rng)?,
                v: Mlp::new(store, "head.v", &[d, hid, hid, 1], Activation::Identity, 1.0, rng)?,
            },
            _ => Heads::Mlp {
                pi: Mlp::new(store, "head.pi", &[dh, mlp_hidden, pi_out], Activation::Identity, 0.1, rng)?,
                v: Mlp::new(store, "head.v", &[dh, mlp_hidden, 1], Activation::Identity, 1.0, rng)?,
            },
        };
        let free_log_std = if cfg.state_dependent_std {
            let bias = match &heads {
                Heads::Kan { pi, .. } => pi.layers[pi.layers.len() - 1].bias_id(),
                Heads::Mlp { pi, .. } => pi.last_bias(),
            };
            store.value_mut(bias).data_mut()[a..].fill(cfg.init_log_std);
            None
        } else {
            Some(store.insert("head.log_std", DenseArray::filled(&[a], cfg.init_log_std))?)
        };
        Ok(Self {
            variant,
            cfg: cfg.clone(),
            basis,
            proprio,
            cnn,
            assemble,
            proj,
            trunk,
            heads,
            free_log_std,
            mlp_hidden,
        })
    }

    pub fn basis(&self) -> &Arc<SplineBasis> {
        &self.basis
    }

    /// Every KAN layer, in the order [`NetOut`] records them.
    pub fn kan_layers(&self) -> Vec<&KanLayer> {
        let mut v = Vec::new();
        if let ProprioEnc::Kan(s) = &self.proprio {
            v.extend(s.layers.iter());
        }
        if let Trunk::KanFusion { g, head } = &self.trunk {
            v.extend(g.layers.iter());
            v.push(head);
        }
        if let Heads::Kan { pi, v: vh } = &self.heads {
            v.extend(pi.layers.iter());
            v.extend(vh.layers.iter());
        }
        v
    }

    /// Scalar counts grouped by component prefix.
    pub fn param_counts(&self, store: &ParamStore) -> ParamCounts {
        let rows: Vec<(String, usize)> = ["proprio", "cnn", "assemble", "fusion", "head"]
            .iter()
            .map(|p| (p.to_string(), store.num_scalars_with_prefix(&format!("{p}."))))
            .filter(|(_, n)| *n > 0)
            .collect();
        ParamCounts { total: store.num_scalars(), rows }
    }

    pub fn forward(&self, t: &mut Tape, obs: &ObsBatch) -> Result<NetOut, DiffError> {
        let mut kan = Vec::new();
        let p = match &self.proprio {
            ProprioEnc::None => None,
            ProprioEnc::Kan(s) => {
                let x = t.input(obs.proprio.clone());
                let (y, outs) = s.forward(t, x)?;
                kan.extend(outs);
                Some(y)
            }
            ProprioEnc::Mlp(m) => {
                let x = t.input(obs.proprio.clone());
                Some(m.forward(t, x)?)
            }
        };
        let v = match &self.cnn {
            Some(c) => {
                let img = t.input(obs.depth.clone());
                Some(c.forward(t, img)?)
            }
            None => None,
        };
        let mut tokens = None;
        let h = match (&self.trunk, self.variant) {
            (Trunk::KanFusion { g, head }, variant) => {
                let asm = self.assemble.as_ref().expect("KAN fusion has an assembler");
                let stream = asm.forward(t, p, v.expect("vision"))?;
                tokens = Some(stream);
                let (y, outs) = g.forward(t, stream)?;
                kan.extend(outs);
                let pooled = if variant == Variant::QuadKan { t.pool_tokens(y)? } else { t.mean_tokens(y)? };
                let o = head.forward(t, pooled)?;
                kan.push(o);
                o.y
            }
            (Trunk::Mlp(mlp), _) => {
                let proj = self.proj.as_ref().expect("MLP fusion projects tokens");
                let (wv, bv) = (t.param(proj.v.0), t.param(proj.v.1));
                let vis = t.linear(v.expect("vision"), wv, Some(bv))?;
                let pooled = t.mean_tokens(vis)?;
                let x = match (p, proj.p) {
                    (Some(p), Some((wp, bp))) => {
                        let (wp, bp) = (t.param(wp), t.param(bp));
                        let pt = t.linear(p, wp, Some(bp))?;
                        t.concat_cols(pt, pooled)?
                    }
                    _ => pooled,
                };
                mlp.forward(t, x)?
            }
            (Trunk::Identity, _) => p.expect("proprio"),
        };
        let a = self.cfg.action_dim;
        let (pi, value) = match &self.heads {
            Heads::Kan { pi, v } => {
                let (po, outs) = pi.forward(t, h)?;
                kan.extend(outs);
                let (vo, outs) = v.forward(t, h)?;
                kan.extend(outs);
                (po, vo)
            }
            Heads::Mlp { pi, v } => (pi.forward(t, h)?, v.forward(t, h)?),
        };
        let (mu, raw_log_std) = match self.free_log_std {
            None => (t.slice_cols(pi, 0, a)?, t.slice_cols(pi, a, a)?),
            Some(id) => {
                let zeros = t.input(DenseArray::zeros(&[obs.batch(), a]));
                let ls = t.param(id);
                (pi, t.add_broadcast(zeros, ls)?)
            }
        };
        let log_std = t.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
        Ok(NetOut { h, mu, log_std, value, tokens, kan })
    }

    /// `Σ_layers (λ_c R_curv + λ_L R_jac)` over every KAN layer used in `out`.
    pub fn spline_reg(&self, t: &mut Tape, out: &NetOut, cfg: &SplineRegConfig) -> Result<Var, DiffError> {
        let layers = self.kan_layers();
        let mut terms = Vec::with_capacity(layers.len());
        for (l, o) in layers.iter().zip(&out.kan) {
            terms.push((l.regularizer(t, o, cfg)?, 1.0));
        }
        t.weighted_sum(&terms)
    }
}
