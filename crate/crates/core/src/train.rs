//! Training loop: lockstep rollout collection over parallel environments,
//! PPO updates, per-update metrics and resumable checkpoints.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ConfigError, RunConfig};
use crate::diff::{checkpoint, DiffError, ParamStore, Tape};
use crate::envsim::{Env, EnvError, EpisodeMetrics, Observation};
use crate::perception::{Network, ObsBatch};
use crate::policy::{sample_action, unit_limits, PolicyOutput};
use crate::ppo::{compute_gae, curriculum_density, normalize_advantages, ppo_update, PpoError, RolloutBuffer, UpdateStats};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
const TRAINER_STATE: &str = "trainer.txt";

/// Columns of `metrics.csv`, one row per update.
pub const METRICS_COLUMNS: [&str; 18] = [
    "update",
    "env_steps",
    "episodes",
    "return_mean",
    "return_std",
    "distance_mean",
    "collisions_mean",
    "loss_total",
    "loss_policy",
    "loss_value",
    "loss_entropy",
    "loss_spline",
    "clip_fraction",
    "approx_kl",
    "entropy",
    "epochs_run",
    "density",
    "wall_time_s",
];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("resume: {0}")]
    Resume(String),
}

/// Worker threads: `QUADKAN_THREADS` if set and positive, else all cores.
pub fn worker_threads() -> usize {
    std::env::var("QUADKAN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Batched inference over observations.
pub fn infer(net: &Network, store: &ParamStore, obs: &[&Observation]) -> Result<Vec<PolicyOutput>, DiffError> {
    let mut p = Vec::with_capacity(obs.len() * net.cfg.proprio_dim);
    let mut d = Vec::new();
    for o in obs {
        p.extend_from_slice(&o.proprio);
        if net.variant.uses_vision() {
            o.extend_depth(&mut d);
        }
    }
    let batch = ObsBatch::from_raw(&net.cfg, &p, &d)?;
    let mut t = Tape::new(store);
    let out = net.forward(&mut t, &batch)?;
    let a = net.cfg.action_dim;
    let (mu, ls, v) = (t.value(out.mu).data(), t.value(out.log_std).data(), t.value(out.value).data());
    Ok((0..obs.len())
        .map(|i| PolicyOutput {
            mu: mu[i * a..(i + 1) * a].to_vec(),
            log_std: ls[i * a..(i + 1) * a].to_vec(),
            value: v[i],
        })
        .collect())
}

/// One `metrics.csv` row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub update: usize,
    pub env_steps: u64,
    /// Episodes completed during this update.
    pub episodes: usize,
    /// Statistics over the most recent completed episodes (a window of
    /// `2·num_envs`), so updates without a finished episode still report.
    pub return_mean: f64,
    pub return_std: f64,
    pub distance_mean: f64,
    pub collisions_mean: f64,
    pub stats: UpdateStats,
    pub density: f64,
    pub wall_time_s: f64,
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        let s = &self.stats;
        let f = |x: f64| format!("{x:.9e}");
        vec![
            self.update.to_string(),
            self.env_steps.to_string(),
            self.episodes.to_string(),
            f(self.return_mean),
            f(self.return_std),
            f(self.distance_mean),
            f(self.collisions_mean),
            f(s.loss_total),
            f(s.loss_policy),
            f(s.loss_value),
            f(s.loss_entropy),
            f(s.loss_spline),
            f(s.clip_fraction),
            f(s.approx_kl),
            f(s.entropy),
            s.epochs_run.to_string(),
            f(self.density),
            format!("{:.3}", self.wall_time_s),
        ]
    }
}

/// Reads the named columns of a metrics CSV as floats.
pub fn read_metrics_column(path: &Path, column: &str) -> Result<Vec<f64>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| TrainError::Resume(format!("{} has no column {column:?}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v = rec.get(idx).unwrap_or("").trim();
        out.push(v.parse().map_err(|_| TrainError::Resume(format!("bad value {v:?} in column {column}")))?);
    }
    Ok(out)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: ParamStore,
    envs: Vec<Env>,
    obs: Vec<Observation>,
    action_rngs: Vec<ChaCha8Rng>,
    a_max: Vec<f64>,
    pool: rayon::ThreadPool,
    /// Updates completed so far.
    pub update: usize,
    pub env_steps: u64,
    recent: VecDeque<EpisodeMetrics>,
    /// Every episode completed in the current process, oldest first.
    pub episode_log: Vec<EpisodeMetrics>,
    wall_offset: f64,
}

/// Deterministic seed for stream `k` of a run.
pub fn stream_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0));
        let net = Network::new(cfg.variant, &cfg.net, &mut store, &mut init_rng)?;
        let mut t = Self {
            a_max: unit_limits(cfg.net.action_dim),
            pool: rayon::ThreadPoolBuilder::new()
                .num_threads(worker_threads())
                .build()
                .map_err(|e| TrainError::Resume(format!("thread pool: {e}")))?,
            envs: Vec::new(),
            obs: Vec::new(),
            action_rngs: Vec::new(),
            net,
            store,
            cfg,
            update: 0,
            env_steps: 0,
            recent: VecDeque::new(),
            episode_log: Vec::new(),
            wall_offset: 0.0,
        };
        t.spawn_envs(0);
        Ok(t)
    }

    /// Fresh environments; `epoch` separates the streams of resumed runs.
    fn spawn_envs(&mut self, epoch: u64) {
        let n = self.cfg.ppo.num_envs;
        let density = self.density_for(self.update);
        let mut ecfg = self.cfg.env_config();
        ecfg.density = density;
        self.envs = (0..n as u64)
            .map(|i| Env::new(ecfg.clone(), stream_seed(self.cfg.seed, 1000 + 64 * epoch + i)))
            .collect();
        self.obs = self.envs.iter_mut().map(|e| e.reset()).collect();
        self.action_rngs = (0..n as u64)
            .map(|i| ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, 5000 + 64 * epoch + i)))
            .collect();
    }

    pub fn density_for(&self, update: usize) -> f64 {
        let target = self.cfg.density;
        curriculum_density(update, self.cfg.ramp_updates(), self.cfg.density_start_frac * target, target)
    }

    pub fn total_updates(&self) -> usize {
        self.cfg.ppo.updates()
    }

    pub fn is_finished(&self) -> bool {
        self.update >= self.total_updates()
    }

    /// Steps every environment `samples_per_update / num_envs` times.
    pub fn collect(&mut self) -> Result<RolloutBuffer, TrainError> {
        let n = self.envs.len();
        let steps = self.cfg.ppo.samples_per_update / n;
        let vision = self.net.variant.uses_vision();
        let depth_len = if vision { 4 * self.net.cfg.img * self.net.cfg.img } else { 0 };
        let (pd, ad) = (self.net.cfg.proprio_dim, self.net.cfg.action_dim);
        let mut buf = RolloutBuffer::new(n, steps, pd, ad, depth_len);
        let mut depth_tmp = Vec::with_capacity(depth_len);
        for t in 0..steps {
            let outs = infer(&self.net, &self.store, &self.obs.iter().collect::<Vec<_>>())?;
            let mut actions = Vec::with_capacity(n);
            for (e, out) in outs.iter().enumerate() {
                let i = buf.index(e, t);
                let s = sample_action(out, &self.a_max, &mut self.action_rngs[e]);
                buf.proprio[i * pd..(i + 1) * pd].copy_from_slice(&self.obs[e].proprio);
                if vision {
                    depth_tmp.clear();
                    self.obs[e].extend_depth(&mut depth_tmp);
                    buf.depth[i * depth_len..(i + 1) * depth_len].copy_from_slice(&depth_tmp);
                }
                buf.pre[i * ad..(i + 1) * ad].copy_from_slice(&s.pre);
                buf.action[i * ad..(i + 1) * ad].copy_from_slice(&s.action);
                buf.log_prob[i] = s.log_prob;
                buf.value[i] = out.value;
                actions.push(s.action);
            }
            let results: Vec<_> = self.pool.install(|| {
                self.envs
                    .par_iter_mut()
                    .zip(actions.par_iter())
                    .map(|(env, a)| {
                        let r = env.step(a)?;
                        let finished = r.done.then(|| env.metrics().clone());
                        let obs = if r.done { env.reset() } else { r.obs };
                        Ok::<_, EnvError>((r.reward, r.done, obs, finished))
                    })
                    .collect()
            });
            for (e, res) in results.into_iter().enumerate() {
                let (reward, done, obs, finished) = res?;
                let i = buf.index(e, t);
                buf.reward[i] = reward;
                buf.done[i] = done;
                self.obs[e] = obs;
                if let Some(m) = finished {
                    self.recent.push_back(m.clone());
                    self.episode_log.push(m);
                }
            }
        }
        let window = 2 * n;
        while self.recent.len() > window {
            self.recent.pop_front();
        }
        let last = infer(&self.net, &self.store, &self.obs.iter().collect::<Vec<_>>())?;
        buf.last_value = last.iter().map(|o| o.value).collect();
        self.env_steps += buf.len() as u64;
        Ok(buf)
    }

    /// Collect, update, and report one PPO iteration.
    pub fn step(&mut self, started: Instant) -> Result<MetricsRow, TrainError> {
        let density = self.density_for(self.update);
        for e in &mut self.envs {
            e.set_density(density);
        }
        let before = self.episode_log.len();
        let buf = self.collect()?;
        let (mut adv, ret) = compute_gae(&buf, self.cfg.ppo.gamma, self.cfg.ppo.lambda)?;
        normalize_advantages(&mut adv);
        let mut shuffle = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, 1_000_000 + self.update as u64));
        let stats = ppo_update(
            &self.net,
            &mut self.store,
            &buf,
            &adv,
            &ret,
            &self.cfg.ppo,
            &self.cfg.spline,
            &self.a_max,
            &mut shuffle,
        )?;
        self.update += 1;
        let rets: Vec<f64> = self.recent.iter().map(|m| m.ret).collect();
        let dists: Vec<f64> = self.recent.iter().map(|m| m.distance).collect();
        let cols: Vec<f64> = self.recent.iter().map(|m| m.collisions as f64).collect();
        let (return_mean, return_std) = mean_std(&rets);
        Ok(MetricsRow {
            update: self.update,
            env_steps: self.env_steps,
            episodes: self.episode_log.len() - before,
            return_mean,
            return_std,
            distance_mean: mean_std(&dists).0,
            collisions_mean: mean_std(&cols).0,
            stats,
            density,
            wall_time_s: self.wall_offset + started.elapsed().as_secs_f64(),
        })
    }

    /// Writes parameters, optimizer state, the resolved config and the
    /// loop counters to `dir`.
    pub fn save_checkpoint(&self, dir: &Path, wall: f64) -> Result<(), TrainError> {
        checkpoint::save(&self.store, dir, self.net.variant.name())?;
        fs::write(dir.join(CONFIG_FILE), self.cfg.to_text())?;
        fs::write(
            dir.join(TRAINER_STATE),
            format!("update = {}\nenv_steps = {}\nwall_time_s = {wall}\n", self.update, self.env_steps),
        )?;
        Ok(())
    }

    /// Rebuilds a trainer from a checkpoint written by [`Self::save_checkpoint`].
    /// Environments restart from fresh episodes with new streams.
    pub fn resume(cfg: RunConfig, dir: &Path) -> Result<Self, TrainError> {
        let mut t = Self::new(cfg)?;
        checkpoint::load_into(&mut t.store, dir)?;
        let text = fs::read_to_string(dir.join(TRAINER_STATE))?;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v = v.trim();
            let bad = || TrainError::Resume(format!("bad trainer state line {line:?}"));
            match k.trim() {
                "update" => t.update = v.parse().map_err(|_| bad())?,
                "env_steps" => t.env_steps = v.parse().map_err(|_| bad())?,
                "wall_time_s" => t.wall_offset = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        t.spawn_envs(t.update as u64);
        Ok(t)
    }
}

/// Everything `train` writes lives under one directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }
}

/// Trains to completion, resuming from `out/checkpoint` when present.
/// `on_row` sees each metrics row after it is written.
pub fn run_training(
    cfg: RunConfig,
    out: &Path,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<Trainer, TrainError> {
    let dirs = RunDir::new(out);
    fs::create_dir_all(out)?;
    let ckpt = dirs.checkpoint();
    let mut trainer = if ckpt.join(TRAINER_STATE).exists() {
        let mut saved = RunConfig::from_file(&ckpt.join(CONFIG_FILE))?;
        // Extending the step budget is the one change a resume accepts.
        saved.ppo.total_steps = cfg.ppo.total_steps;
        if saved != cfg {
            return Err(TrainError::Resume(format!(
                "{} was written with a different configuration; use a fresh --out",
                ckpt.display()
            )));
        }
        log::info!("resuming from {}", ckpt.display());
        Trainer::resume(cfg, &ckpt)?
    } else {
        Trainer::new(cfg)?
    };
    fs::write(dirs.config(), trainer.cfg.to_text())?;

    // Keep exactly the rows up to the checkpointed update.
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    if trainer.update > 0 && dirs.metrics().exists() {
        let mut r = csv::Reader::from_path(dirs.metrics())?;
        for rec in r.records() {
            let rec = rec?;
            if rec.get(0).and_then(|u| u.parse::<usize>().ok()).is_some_and(|u| u <= trainer.update) {
                rows.push(rec);
            }
        }
    }
    let mut w = csv::Writer::from_path(dirs.metrics())?;
    w.write_record(METRICS_COLUMNS)?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush()?;

    let started = Instant::now();
    let every = trainer.cfg.checkpoint_every.max(1);
    while !trainer.is_finished() {
        let row = trainer.step(started)?;
        w.write_record(row.record())?;
        w.flush()?;
        on_row(&row);
        if trainer.update % every == 0 || trainer.is_finished() {
            trainer.save_checkpoint(&ckpt, row.wall_time_s)?;
        }
    }
    Ok(trainer)
}
