//! Multi-modal delay randomization.
//!
//! Proprioceptive slices are pushed at simulator rate into a FIFO and read
//! back with a per-episode fractional delay; depth frames go into a ring of
//! `4·k_vis` frames from which one frame per contiguous block is sampled.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rates and latency bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct MmdrConfig {
    /// When false the observation pipeline reads the current state directly.
    pub enabled: bool,
    /// Upper bound of the per-episode proprioceptive latency, seconds.
    pub delta_max: f64,
    pub k_vis: usize,
    pub f_sim: f64,
    pub f_ctrl: f64,
    pub f_vis: f64,
}

impl Default for MmdrConfig {
    fn default() -> Self {
        Self { enabled: true, delta_max: 0.04, k_vis: 3, f_sim: 400.0, f_ctrl: 25.0, f_vis: 30.0 }
    }
}

impl MmdrConfig {
    pub fn dt_sim(&self) -> f64 {
        1.0 / self.f_sim
    }

    pub fn dt_ctrl(&self) -> f64 {
        1.0 / self.f_ctrl
    }

    pub fn dt_vis(&self) -> f64 {
        1.0 / self.f_vis
    }

    /// Simulator substeps per control step.
    pub fn substeps(&self) -> usize {
        (self.f_sim / self.f_ctrl).round() as usize
    }

    /// Largest `k` that `sample_episode_delay` can produce.
    pub fn k_max(&self) -> usize {
        (self.delta_max / self.dt_sim()).floor() as usize
    }

    pub fn fifo_capacity(&self) -> usize {
        self.k_max() + 2
    }

    pub fn ring_len(&self) -> usize {
        4 * self.k_vis.max(1)
    }
}

/// Per-episode proprioceptive latency and its decomposition in sim steps.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EpisodeDelay {
    pub delta_prop: f64,
    pub k: usize,
    pub alpha: f64,
}

impl EpisodeDelay {
    pub const ZERO: EpisodeDelay = EpisodeDelay { delta_prop: 0.0, k: 0, alpha: 0.0 };

    /// `k = ⌊Δ/δ⌋`, `α = Δ/δ − k`.
    pub fn from_latency(delta_prop: f64, dt_sim: f64) -> Self {
        let r = delta_prop / dt_sim;
        let k = r.floor();
        Self { delta_prop, k: k as usize, alpha: r - k }
    }
}

/// Draws `Δ ~ U[0, Δ_max]` and decomposes it.
pub fn sample_episode_delay<R: Rng>(rng: &mut R, delta_max: f64, dt_sim: f64) -> EpisodeDelay {
    let delta = if delta_max > 0.0 { rng.random_range(0.0..=delta_max) } else { 0.0 };
    EpisodeDelay::from_latency(delta, dt_sim)
}

/// One index per block: `i_j ∈ {(j−1)k, …, jk − 1}`.
pub fn block_indices<R: Rng>(rng: &mut R, k_vis: usize) -> [usize; 4] {
    let k = k_vis.max(1);
    let mut out = [0; 4];
    for (j, o) in out.iter_mut().enumerate() {
        *o = j * k + if k > 1 { rng.random_range(0..k) } else { 0 };
    }
    out
}

/// FIFO and frame ring of one environment.
#[derive(Clone, Debug)]
pub struct DelayState<F> {
    cfg: MmdrConfig,
    delay: EpisodeDelay,
    /// Newest slice at the front.
    fifo: VecDeque<Vec<f64>>,
    /// Newest frame at the front.
    frames: VecDeque<F>,
    rng: ChaCha8Rng,
}

impl<F: Clone> DelayState<F> {
    pub fn new(cfg: MmdrConfig, seed: u64) -> Self {
        Self {
            fifo: VecDeque::with_capacity(cfg.fifo_capacity()),
            frames: VecDeque::with_capacity(cfg.ring_len()),
            cfg,
            delay: EpisodeDelay::ZERO,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &MmdrConfig {
        &self.cfg
    }

    pub fn delay(&self) -> EpisodeDelay {
        self.delay
    }

    /// Starts an episode with latency `delta_prop`, warm-filling both buffers.
    pub fn reset(&mut self, delta_prop: f64, initial: &[f64], first_frame: Option<F>) {
        let delta = delta_prop.clamp(0.0, self.cfg.delta_max.max(0.0));
        self.delay = EpisodeDelay::from_latency(delta, self.cfg.dt_sim());
        self.fifo.clear();
        for _ in 0..self.cfg.fifo_capacity() {
            self.fifo.push_back(initial.to_vec());
        }
        self.frames.clear();
        if let Some(f) = first_frame {
            for _ in 0..self.cfg.ring_len() {
                self.frames.push_back(f.clone());
            }
        }
    }

    /// Records the state of one simulator substep.
    pub fn push_slice(&mut self, s: Vec<f64>) {
        self.fifo.push_front(s);
        self.fifo.truncate(self.cfg.fifo_capacity());
    }

    pub fn push_frame(&mut self, f: F) {
        self.frames.push_front(f);
        self.frames.truncate(self.cfg.ring_len());
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    /// `(1−α) s_{t−k} + α s_{t−k−1}`.
    pub fn delayed_proprio(&self) -> Vec<f64> {
        let EpisodeDelay { k, alpha, .. } = self.delay;
        let n = self.fifo.len();
        assert!(n > 0, "delayed read from an empty proprio FIFO");
        let (i0, i1) = if k + 1 < n {
            (k, k + 1)
        } else {
            log::warn!("cold proprio FIFO ({n} entries, k = {k}); using the oldest pair");
            (n.saturating_sub(2), n - 1)
        };
        let s0 = &self.fifo[i0];
        if alpha == 0.0 {
            return s0.clone();
        }
        let s1 = &self.fifo[i1];
        s0.iter().zip(s1).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect()
    }

    /// Four frames `[I_{t−i_1}, …, I_{t−i_4}]`, or `None` when no frames
    /// have been recorded.
    pub fn delayed_frames(&mut self) -> Option<[F; 4]> {
        if self.frames.is_empty() {
            return None;
        }
        let idx = block_indices(&mut self.rng, self.cfg.k_vis);
        let last = self.frames.len() - 1;
        Some(idx.map(|i| self.frames[i.min(last)].clone()))
    }
}
