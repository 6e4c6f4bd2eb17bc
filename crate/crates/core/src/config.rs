//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key has a default; unknown
//! keys and unparsable values are errors. [`RunConfig::to_text`] writes the
//! fully resolved configuration in the same format, so its output can be fed
//! back in.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::envsim::{EnvConfig, TerrainKind};
use crate::kan::SplineRegConfig;
use crate::mmdr::MmdrConfig;
use crate::perception::{NetConfig, Variant};
use crate::ppo::PpoConfig;

pub const DESK_STEPS: u64 = 200_000;
pub const FULL_STEPS: u64 = 10_000_000;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("key {key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub terrain: TerrainKind,
    pub seed: u64,
    pub ppo: PpoConfig,
    pub spline: SplineRegConfig,
    pub net: NetConfig,
    pub mmdr: bool,
    pub delta_max: f64,
    pub k_vis: usize,
    pub randomize: bool,
    pub depth_dropout: bool,
    pub density: f64,
    /// Curriculum starts at this fraction of `density`...
    pub density_start_frac: f64,
    /// ...and reaches it after this fraction of all updates.
    pub ramp_frac: f64,
    /// Updates between checkpoints; the final update always checkpoints.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::QuadKan,
            terrain: TerrainKind::ThinObstacle,
            seed: 0,
            ppo: PpoConfig::default(),
            spline: SplineRegConfig::default(),
            net: NetConfig::default(),
            mmdr: true,
            delta_max: 0.04,
            k_vis: 3,
            randomize: true,
            depth_dropout: true,
            density: 0.4,
            density_start_frac: 0.25,
            ramp_frac: 0.5,
            checkpoint_every: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Defaults overridden by `text`.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let (k, v) = (k.trim(), v.trim());
            if !self.set(k, v)? {
                return Err(ConfigError::UnknownKey { line: i + 1, key: k.to_string() });
            }
        }
        self.validate()
    }

    /// Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, k: &str, v: &str) -> Result<bool, ConfigError> {
        let p = &mut self.ppo;
        match k {
            "variant" => self.variant = v.parse().map_err(|e| ConfigError::Value { key: k.into(), value: v.into(), reason: e })?,
            "terrain" => self.terrain = parse(k, v)?,
            "seed" => self.seed = parse(k, v)?,
            "total_steps" => p.total_steps = parse(k, v)?,
            "horizon" => p.horizon = parse(k, v)?,
            "samples_per_update" => p.samples_per_update = parse(k, v)?,
            "minibatch" => p.minibatch = parse(k, v)?,
            "epochs" => p.epochs = parse(k, v)?,
            "gamma" => p.gamma = parse(k, v)?,
            "lambda" => p.lambda = parse(k, v)?,
            "clip" => p.clip = parse(k, v)?,
            "entropy_coef" => p.entropy_coef = parse(k, v)?,
            "value_coef" => p.value_coef = parse(k, v)?,
            "spline_coef" => p.spline_coef = parse(k, v)?,
            "lr" => p.lr = parse(k, v)?,
            "kl_stop" => p.kl_stop = parse(k, v)?,
            "max_grad_norm" => p.max_grad_norm = parse(k, v)?,
            "num_envs" => p.num_envs = parse(k, v)?,
            "adam_beta1" => p.adam_beta1 = parse(k, v)?,
            "adam_beta2" => p.adam_beta2 = parse(k, v)?,
            "adam_eps" => p.adam_eps = parse(k, v)?,
            "lambda_c" => self.spline.lambda_c = parse(k, v)?,
            "lambda_l" => self.spline.lambda_l = parse(k, v)?,
            "jac_max_rows" => self.spline.jac_max_rows = parse(k, v)?,
            "token_dim" => self.net.d = parse(k, v)?,
            "fused_dim" => self.net.d_h = parse(k, v)?,
            "hidden" => self.net.hidden = parse(k, v)?,
            "spline_degree" => self.net.spline_degree = parse(k, v)?,
            "spline_count" => self.net.spline_count = parse(k, v)?,
            "init_log_std" => self.net.init_log_std = parse(k, v)?,
            "state_dependent_std" => self.net.state_dependent_std = parse(k, v)?,
            "mmdr" => self.mmdr = parse(k, v)?,
            "delta_max" => self.delta_max = parse(k, v)?,
            "k_vis" => self.k_vis = parse(k, v)?,
            "randomize" => self.randomize = parse(k, v)?,
            "depth_dropout" => self.depth_dropout = parse(k, v)?,
            "density" => self.density = parse(k, v)?,
            "density_start_frac" => self.density_start_frac = parse(k, v)?,
            "ramp_frac" => self.ramp_frac = parse(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ppo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.k_vis == 0 {
            return Err(ConfigError::Invalid("k_vis must be at least 1".into()));
        }
        if !(self.delta_max >= 0.0 && self.density >= 0.0) {
            return Err(ConfigError::Invalid("delta_max and density must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.density_start_frac) || !(0.0..=1.0).contains(&self.ramp_frac) {
            return Err(ConfigError::Invalid("density_start_frac and ramp_frac must lie in [0, 1]".into()));
        }
        if self.net.spline_count <= self.net.spline_degree {
            return Err(ConfigError::Invalid("spline_count must exceed spline_degree".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let p = &self.ppo;
        let n = &self.net;
        let rows: Vec<(&str, String)> = vec![
            ("variant", self.variant.to_string()),
            ("terrain", self.terrain.to_string()),
            ("seed", self.seed.to_string()),
            ("total_steps", p.total_steps.to_string()),
            ("horizon", p.horizon.to_string()),
            ("samples_per_update", p.samples_per_update.to_string()),
            ("minibatch", p.minibatch.to_string()),
            ("epochs", p.epochs.to_string()),
            ("gamma", p.gamma.to_string()),
            ("lambda", p.lambda.to_string()),
            ("clip", p.clip.to_string()),
            ("entropy_coef", p.entropy_coef.to_string()),
            ("value_coef", p.value_coef.to_string()),
            ("spline_coef", p.spline_coef.to_string()),
            ("lr", p.lr.to_string()),
            ("kl_stop", p.kl_stop.to_string()),
            ("max_grad_norm", p.max_grad_norm.to_string()),
            ("num_envs", p.num_envs.to_string()),
            ("adam_beta1", p.adam_beta1.to_string()),
            ("adam_beta2", p.adam_beta2.to_string()),
            ("adam_eps", p.adam_eps.to_string()),
            ("lambda_c", self.spline.lambda_c.to_string()),
            ("lambda_l", self.spline.lambda_l.to_string()),
            ("jac_max_rows", self.spline.jac_max_rows.to_string()),
            ("token_dim", n.d.to_string()),
            ("fused_dim", n.d_h.to_string()),
            ("hidden", n.hidden.to_string()),
            ("spline_degree", n.spline_degree.to_string()),
            ("spline_count", n.spline_count.to_string()),
            ("init_log_std", n.init_log_std.to_string()),
            ("state_dependent_std", n.state_dependent_std.to_string()),
            ("mmdr", self.mmdr.to_string()),
            ("delta_max", self.delta_max.to_string()),
            ("k_vis", self.k_vis.to_string()),
            ("randomize", self.randomize.to_string()),
            ("depth_dropout", self.depth_dropout.to_string()),
            ("density", self.density.to_string()),
            ("density_start_frac", self.density_start_frac.to_string()),
            ("ramp_frac", self.ramp_frac.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Environment settings implied by this run.
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            terrain: self.terrain,
            density: self.density,
            horizon: self.ppo.horizon,
            randomize: self.randomize,
            depth_dropout: self.depth_dropout,
            mmdr: MmdrConfig {
                enabled: self.mmdr,
                delta_max: if self.mmdr { self.delta_max } else { 0.0 },
                k_vis: self.k_vis,
                ..MmdrConfig::default()
            },
            render: self.variant.uses_vision(),
            ..EnvConfig::default()
        }
    }

    pub fn ramp_updates(&self) -> usize {
        (self.ramp_frac * self.ppo.updates() as f64).ceil() as usize
    }
}
