//! Rollout storage, GAE, and the clipped-surrogate PPO update.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diff::{adam_step, AdamConfig, DenseArray, DiffError, ParamStore, Tape};
use crate::kan::SplineRegConfig;
use crate::perception::{Network, ObsBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub horizon: usize,
    pub samples_per_update: usize,
    pub minibatch: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub spline_coef: f64,
    pub lr: f64,
    pub total_steps: u64,
    pub kl_stop: f64,
    pub max_grad_norm: f64,
    pub num_envs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            horizon: 999,
            samples_per_update: 16384,
            minibatch: 1024,
            epochs: 3,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.005,
            value_coef: 0.5,
            spline_coef: 1e-4,
            lr: 1e-4,
            total_steps: 200_000,
            kl_stop: 0.02,
            max_grad_norm: 0.5,
            num_envs: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("invalid PPO configuration: {0}")]
    Config(String),
    #[error("empty rollout buffer")]
    EmptyBuffer,
    #[error("non-finite loss in epoch {epoch}, minibatch {minibatch}:\n{dump}")]
    NonFinite { epoch: usize, minibatch: usize, dump: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: String| Err(PpoError::Config(m));
        if self.minibatch == 0 || self.samples_per_update % self.minibatch != 0 {
            return bad(format!(
                "samples_per_update {} is not a multiple of minibatch {}",
                self.samples_per_update, self.minibatch
            ));
        }
        if self.num_envs == 0 || self.samples_per_update % self.num_envs != 0 {
            return bad(format!(
                "samples_per_update {} is not a multiple of num_envs {}",
                self.samples_per_update, self.num_envs
            ));
        }
        let coefs = [
            ("gamma", self.gamma),
            ("lambda", self.lambda),
            ("clip", self.clip),
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("spline_coef", self.spline_coef),
            ("lr", self.lr),
            ("kl_stop", self.kl_stop),
            ("max_grad_norm", self.max_grad_norm),
        ];
        if let Some((k, v)) = coefs.iter().find(|(_, v)| !(*v >= 0.0)) {
            return bad(format!("{k} must be non-negative, got {v}"));
        }
        if self.epochs == 0 || self.horizon == 0 {
            return bad("epochs and horizon must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn updates(&self) -> usize {
        (self.total_steps as usize).div_ceil(self.samples_per_update).max(1)
    }
}

/// Transitions from `num_envs` environments stepped in lockstep, stored
/// env-major: sample `e·T + t` is step `t` of environment `e`.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub steps: usize,
    pub proprio_dim: usize,
    pub action_dim: usize,
    /// Floats per depth stack; zero when the variant has no vision.
    pub depth_len: usize,
    pub proprio: Vec<f64>,
    pub depth: Vec<f32>,
    pub pre: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: Vec<f64>,
    pub value: Vec<f64>,
    pub reward: Vec<f64>,
    pub done: Vec<bool>,
    /// `V` of the observation following each environment's last step.
    pub last_value: Vec<f64>,
}

impl RolloutBuffer {
    pub fn new(num_envs: usize, steps: usize, proprio_dim: usize, action_dim: usize, depth_len: usize) -> Self {
        let n = num_envs * steps;
        Self {
            num_envs,
            steps,
            proprio_dim,
            action_dim,
            depth_len,
            proprio: vec![0.0; n * proprio_dim],
            depth: vec![0.0; n * depth_len],
            pre: vec![0.0; n * action_dim],
            action: vec![0.0; n * action_dim],
            log_prob: vec![0.0; n],
            value: vec![0.0; n],
            reward: vec![0.0; n],
            done: vec![false; n],
            last_value: vec![0.0; num_envs],
        }
    }

    pub fn len(&self) -> usize {
        self.num_envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, env: usize, t: usize) -> usize {
        env * self.steps + t
    }

    /// Gathers the observations of `idx` into a network batch.
    pub fn obs_batch(&self, net: &Network, idx: &[usize]) -> Result<ObsBatch, DiffError> {
        let (pd, dl) = (self.proprio_dim, self.depth_len);
        let mut p = Vec::with_capacity(idx.len() * pd);
        let mut d = Vec::with_capacity(idx.len() * dl);
        for &i in idx {
            p.extend_from_slice(&self.proprio[i * pd..(i + 1) * pd]);
            d.extend_from_slice(&self.depth[i * dl..(i + 1) * dl]);
        }
        ObsBatch::from_raw(&net.cfg, &p, &d)
    }

    pub fn pre_batch(&self, idx: &[usize]) -> DenseArray {
        let a = self.action_dim;
        let mut v = Vec::with_capacity(idx.len() * a);
        for &i in idx {
            v.extend_from_slice(&self.pre[i * a..(i + 1) * a]);
        }
        DenseArray::from_vec(&[idx.len(), a], v).expect("pre-squash batch shape")
    }
}

/// Backward `(γλ)` recursion over one trajectory. `last_value` bootstraps
/// the final step unless it is terminal. Returns `(A, R̂ = A + V)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// GAE over every environment's trajectory in the buffer.
pub fn compute_gae(buf: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if buf.is_empty() {
        return Err(PpoError::EmptyBuffer);
    }
    let mut adv = Vec::with_capacity(buf.len());
    let mut ret = Vec::with_capacity(buf.len());
    for e in 0..buf.num_envs {
        let r = buf.index(e, 0)..buf.index(e, 0) + buf.steps;
        let (a, rt) = gae(
            &buf.reward[r.clone()],
            &buf.value[r.clone()],
            &buf.done[r],
            buf.last_value[e],
            gamma,
            lambda,
        );
        adv.extend(a);
        ret.extend(rt);
    }
    Ok((adv, ret))
}

/// In-place `(A − mean) / max(std, 1e-8)` with the population std.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// Linear anneal from `start` to `target` over `ramp_updates`, then flat.
pub fn curriculum_density(update: usize, ramp_updates: usize, start: f64, target: f64) -> f64 {
    if update >= ramp_updates {
        return target;
    }
    start + (target - start) * update as f64 / ramp_updates as f64
}

/// Averages over the minibatches that were applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss_total: f64,
    pub loss_policy: f64,
    pub loss_value: f64,
    pub loss_entropy: f64,
    pub loss_spline: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub entropy: f64,
    /// Epochs entered, counting one cut short by the KL stop.
    pub epochs_run: usize,
    pub minibatches: usize,
    pub kl_stopped: bool,
}

/// Loss terms of one minibatch, evaluated on `t`.
pub struct MinibatchLoss {
    pub total: crate::diff::Var,
    pub policy: f64,
    pub value: f64,
    pub entropy_loss: f64,
    pub spline: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub entropy: f64,
}

/// Builds `L_π + β_V L_V + β_H L_H + β_spline R_spline` on the tape.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_loss(
    t: &mut Tape,
    net: &Network,
    cfg: &PpoConfig,
    spline: &SplineRegConfig,
    obs: &ObsBatch,
    pre: &DenseArray,
    old_logp: &[f64],
    adv: &[f64],
    ret: &[f64],
    a_max: &[f64],
) -> Result<MinibatchLoss, DiffError> {
    let out = net.forward(t, obs)?;
    let logp = t.gaussian_log_prob(out.mu, out.log_std, pre, a_max)?;
    let l_pi = t.ppo_surrogate(logp, old_logp, adv, cfg.clip)?;
    let l_v = t.mse(out.value, ret)?;
    let h = t.gaussian_entropy(out.log_std)?;
    let h_mean = t.mean(h);
    let l_h = t.scale(h_mean, -1.0);
    let r_spline = net.spline_reg(t, &out, spline)?;
    let total = t.weighted_sum(&[
        (l_pi, 1.0),
        (l_v, cfg.value_coef),
        (l_h, cfg.entropy_coef),
        (r_spline, cfg.spline_coef),
    ])?;

    let new = t.value(logp).data();
    let n = new.len() as f64;
    let mut clipped = 0usize;
    let mut kl = 0.0;
    for (nl, ol) in new.iter().zip(old_logp) {
        if ((nl - ol).exp() - 1.0).abs() > cfg.clip {
            clipped += 1;
        }
        kl += ol - nl;
    }
    Ok(MinibatchLoss {
        total,
        policy: t.scalar(l_pi),
        value: t.scalar(l_v),
        entropy_loss: t.scalar(l_h),
        spline: t.scalar(r_spline),
        clip_fraction: clipped as f64 / n,
        approx_kl: kl / n,
        entropy: t.scalar(h_mean),
    })
}

/// Runs up to `cfg.epochs` passes of shuffled minibatches with Adam and
/// global-norm clipping. A minibatch whose approximate KL to the rollout
/// policy exceeds `cfg.kl_stop` ends the update before its step is applied.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<R: Rng>(
    net: &Network,
    store: &mut ParamStore,
    buf: &RolloutBuffer,
    adv: &[f64],
    ret: &[f64],
    cfg: &PpoConfig,
    spline: &SplineRegConfig,
    a_max: &[f64],
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    if buf.is_empty() {
        return Err(PpoError::EmptyBuffer);
    }
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..buf.len()).collect();
    let mut stats = UpdateStats::default();
    let mb = cfg.minibatch.min(buf.len());
    'epochs: for epoch in 0..cfg.epochs {
        stats.epochs_run = epoch + 1;
        order.shuffle(rng);
        for (k, idx) in order.chunks(mb).enumerate() {
            let obs = buf.obs_batch(net, idx)?;
            let pre = buf.pre_batch(idx);
            let old: Vec<f64> = idx.iter().map(|&i| buf.log_prob[i]).collect();
            let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            let r: Vec<f64> = idx.iter().map(|&i| ret[i]).collect();
            let grads = {
                let mut t = Tape::new(store);
                let loss = minibatch_loss(&mut t, net, cfg, spline, &obs, &pre, &old, &a, &r, a_max)?;
                let total = t.scalar(loss.total);
                if !total.is_finite() {
                    return Err(PpoError::NonFinite {
                        epoch,
                        minibatch: k,
                        dump: diagnostic(idx, &obs, &old, &a, &r, &loss),
                    });
                }
                if loss.approx_kl > cfg.kl_stop {
                    stats.kl_stopped = true;
                    break 'epochs;
                }
                stats.loss_total += total;
                stats.loss_policy += loss.policy;
                stats.loss_value += loss.value;
                stats.loss_entropy += loss.entropy_loss;
                stats.loss_spline += loss.spline;
                stats.clip_fraction += loss.clip_fraction;
                stats.approx_kl += loss.approx_kl;
                stats.entropy += loss.entropy;
                stats.minibatches += 1;
                t.backward(loss.total)?
            };
            store.accumulate(&grads)?;
            store.clip_grad_norm(cfg.max_grad_norm);
            adam_step(store, &adam);
        }
    }
    let n = stats.minibatches.max(1) as f64;
    for v in [
        &mut stats.loss_total,
        &mut stats.loss_policy,
        &mut stats.loss_value,
        &mut stats.loss_entropy,
        &mut stats.loss_spline,
        &mut stats.clip_fraction,
        &mut stats.approx_kl,
        &mut stats.entropy,
    ] {
        *v /= n;
    }
    Ok(stats)
}

fn diagnostic(idx: &[usize], obs: &ObsBatch, old: &[f64], adv: &[f64], ret: &[f64], l: &MinibatchLoss) -> String {
    let summary = |name: &str, v: &[f64]| {
        let finite = v.iter().filter(|x| x.is_finite()).count();
        let (lo, hi) = v.iter().filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
        format!("{name}: n={} finite={finite} min={lo:.6e} max={hi:.6e}\n", v.len())
    };
    let mut s = format!(
        "loss terms: policy={} value={} entropy={} spline={}\nsample indices: {:?}\n",
        l.policy, l.value, l.entropy_loss, l.spline, idx
    );
    s += &summary("proprio", obs.proprio.data());
    s += &summary("depth", obs.depth.data());
    s += &summary("old_log_prob", old);
    s += &summary("advantage", adv);
    s += &summary("return", ret);
    s
}
