//! Deterministic-policy evaluation, the random-action baseline, and the
//! CoV stability metric.
//!
//! A *run* steps fresh episodes until three have completed or one ends in a
//! fall. Its return and distance are means over its episodes; its collision
//! count is the mean over episodes that came near an obstacle, and is absent
//! when none did. A report aggregates runs with the sample std.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::diff::{checkpoint, DiffError, ParamStore};
use crate::envsim::{Env, EnvError, TerrainKind};
use crate::perception::Network;
use crate::policy::{deterministic_action, unit_limits};
use crate::train::{infer, stream_seed, CONFIG_FILE};

pub const EPISODES_PER_RUN: usize = 3;
/// Horizontal clearance under which an episode counts as obstacle-interacting.
pub const INTERACTION_RADIUS: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("CoV undefined: {0}")]
    CovUndefined(String),
}

/// A trained (or freshly initialised) policy with the config it came from.
pub struct LoadedPolicy {
    pub cfg: RunConfig,
    pub net: Network,
    pub store: ParamStore,
}

impl LoadedPolicy {
    /// Network at its seeded initialisation.
    pub fn init(cfg: RunConfig) -> Result<Self, DiffError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 0));
        let net = Network::new(cfg.variant, &cfg.net, &mut store, &mut rng)?;
        Ok(Self { cfg, net, store })
    }

    /// Rebuilds the architecture from the checkpoint's config and loads it.
    /// A layout mismatch names the first offending entry.
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let err = |msg: String| EvalError::Checkpoint { path: dir.display().to_string(), msg };
        let cfg = RunConfig::from_file(&dir.join(CONFIG_FILE)).map_err(|e| err(e.to_string()))?;
        let meta = checkpoint::read_meta(dir)?;
        if meta.variant != cfg.variant.name() {
            return Err(err(format!("manifest variant {} but config variant {}", meta.variant, cfg.variant)));
        }
        let mut p = Self::init(cfg)?;
        checkpoint::load_into(&mut p.store, dir)?;
        Ok(p)
    }
}

/// One evaluated episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub run: usize,
    pub episode: usize,
    pub ret: f64,
    pub distance: f64,
    pub collisions: u32,
    pub steps: usize,
    pub fell: bool,
    pub interacted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub ret: f64,
    pub distance: f64,
    pub collisions: Option<f64>,
}

/// Mean ± sample std.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.n == 0 {
            f.write_str("n/a")
        } else {
            write!(f, "{:.2} ± {:.2}", self.mean, self.std)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub label: String,
    pub env: TerrainKind,
    pub runs: usize,
    pub ret: Stat,
    /// Over runs that had at least one obstacle-interacting episode.
    pub collisions: Stat,
    pub distance: Stat,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!("{:<18} {:<15} {:>4} {:>22} {:>18} {:>18}\n", "variant", "env", "runs", "Return", "Collisions", "Distance");
        for r in &self.rows {
            s += &format!(
                "{:<18} {:<15} {:>4} {:>22} {:>18} {:>18}\n",
                r.label,
                r.env.name(),
                r.runs,
                r.ret.to_string(),
                r.collisions.to_string(),
                r.distance.to_string()
            );
        }
        s
    }

    pub fn write_episodes_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["run", "episode", "return", "distance", "collisions", "steps", "fell", "obstacle_interacting"])?;
        for e in &self.episodes {
            w.write_record([
                e.run.to_string(),
                e.episode.to_string(),
                format!("{:.9e}", e.ret),
                format!("{:.9e}", e.distance),
                e.collisions.to_string(),
                e.steps.to_string(),
                e.fell.to_string(),
                e.interacted.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "variant",
            "env",
            "runs",
            "return_mean",
            "return_std",
            "collisions_mean",
            "collisions_std",
            "collision_runs",
            "distance_mean",
            "distance_std",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                r.env.name().to_string(),
                r.runs.to_string(),
                format!("{:.9e}", r.ret.mean),
                format!("{:.9e}", r.ret.std),
                format!("{:.9e}", r.collisions.mean),
                format!("{:.9e}", r.collisions.std),
                r.collisions.n.to_string(),
                format!("{:.9e}", r.distance.mean),
                format!("{:.9e}", r.distance.std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How actions are chosen during evaluation.
pub enum Actor<'a> {
    Deterministic(&'a LoadedPolicy),
    /// Uniform in `[-1, 1]^12`, seeded per run.
    Random,
}

fn near_obstacle(env: &Env) -> bool {
    let p = &env.state().pos;
    env.terrain().obstacles.iter().any(|c| {
        let dx = ((p.x - c.center[0]).abs() - c.half[0]).max(0.0);
        let dy = ((p.y - c.center[1]).abs() - c.half[1]).max(0.0);
        dx * dx + dy * dy <= INTERACTION_RADIUS * INTERACTION_RADIUS
    })
}

/// Seed of evaluation run `run` under base `seed`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(run as u64 + 1)
}

/// Runs `runs` evaluation runs on `env_kind` using the training config's
/// environment settings.
pub fn evaluate(actor: &Actor, cfg: &RunConfig, env_kind: TerrainKind, runs: usize, seed: u64) -> Result<(EvalRow, Vec<EpisodeRecord>), EvalError> {
    let mut ecfg = cfg.env_config();
    ecfg.terrain = env_kind;
    if matches!(actor, Actor::Random) {
        ecfg.render = false;
    }
    let a_max = unit_limits(cfg.net.action_dim);
    let mut episodes = Vec::new();
    let mut summaries = Vec::with_capacity(runs);
    for run in 0..runs {
        let mut env = Env::new(ecfg.clone(), run_seed(seed, run));
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed(seed, run) ^ 0xA5A5);
        let mut recs: Vec<EpisodeRecord> = Vec::new();
        while recs.len() < EPISODES_PER_RUN && !recs.last().is_some_and(|r| r.fell) {
            let mut obs = env.reset();
            let mut interacted = near_obstacle(&env);
            loop {
                let action = match actor {
                    Actor::Deterministic(p) => {
                        let out = infer(&p.net, &p.store, &[&obs])?;
                        deterministic_action(&out[0], &a_max)
                    }
                    Actor::Random => Env::random_action(&mut rng).to_vec(),
                };
                let r = env.step(&action)?;
                interacted |= r.info.collision > 0 || near_obstacle(&env);
                obs = r.obs;
                if r.done {
                    break;
                }
            }
            let m = env.metrics();
            recs.push(EpisodeRecord {
                run,
                episode: recs.len(),
                ret: m.ret,
                distance: m.distance,
                collisions: m.collisions,
                steps: m.steps,
                fell: m.fell,
                interacted,
            });
        }
        summaries.push(summarize(&recs));
        episodes.extend(recs);
    }
    let label = match actor {
        Actor::Deterministic(p) => p.cfg.variant.name().to_string(),
        Actor::Random => "random".to_string(),
    };
    Ok((aggregate(label, env_kind, &summaries), episodes))
}

pub fn summarize(recs: &[EpisodeRecord]) -> RunSummary {
    let n = recs.len().max(1) as f64;
    let hit: Vec<f64> = recs.iter().filter(|r| r.interacted).map(|r| r.collisions as f64).collect();
    RunSummary {
        ret: recs.iter().map(|r| r.ret).sum::<f64>() / n,
        distance: recs.iter().map(|r| r.distance).sum::<f64>() / n,
        collisions: (!hit.is_empty()).then(|| hit.iter().sum::<f64>() / hit.len() as f64),
    }
}

pub fn aggregate(label: String, env: TerrainKind, runs: &[RunSummary]) -> EvalRow {
    let rets: Vec<f64> = runs.iter().map(|r| r.ret).collect();
    let dists: Vec<f64> = runs.iter().map(|r| r.distance).collect();
    let cols: Vec<f64> = runs.iter().filter_map(|r| r.collisions).collect();
    EvalRow { label, env, runs: runs.len(), ret: Stat::of(&rets), collisions: Stat::of(&cols), distance: Stat::of(&dists) }
}

/// Sample std over mean.
pub fn cov(returns: &[f64]) -> Result<f64, EvalError> {
    if returns.len() < 2 {
        return Err(EvalError::CovUndefined(format!("need at least 2 returns, got {}", returns.len())));
    }
    let s = Stat::of(returns);
    if s.mean.abs() < 1e-9 {
        return Err(EvalError::CovUndefined(format!("mean return {:.3e} is zero", s.mean)));
    }
    Ok(s.std / s.mean)
}

/// CoV of the `return_mean` column of a training metrics CSV, skipping
/// updates before the first completed episode.
pub fn compute_cov(metrics: &Path) -> Result<f64, EvalError> {
    let mut r = csv::Reader::from_path(metrics)?;
    let idx = r.headers()?.iter().position(|h| h == "return_mean").ok_or_else(|| {
        EvalError::CovUndefined(format!("{} has no return_mean column", metrics.display()))
    })?;
    let mut v = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if let Some(x) = rec.get(idx).and_then(|s| s.trim().parse::<f64>().ok()).filter(|x| x.is_finite()) {
            v.push(x);
        }
    }
    cov(&v)
}

pub fn write_report(report: &EvalReport, out: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(out)?;
    report.write_summary_csv(&out.join("eval_summary.csv"))?;
    report.write_episodes_csv(&out.join("eval_episodes.csv"))
}
