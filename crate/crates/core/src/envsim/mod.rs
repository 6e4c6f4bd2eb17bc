//! Deterministic quadruped-obstacle simulator with delayed observations.

pub mod camera;
pub mod randomization;
pub mod robot;
pub mod terrain;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mmdr::{DelayState, MmdrConfig};
use camera::{CameraConfig, CameraPose, Ground, Scene};
pub use randomization::{perturb_depth, RandomizationDraw, RandomizationRanges};
pub use robot::{reward, Dynamics, RobotModel, RobotState, JOINTS};
pub use terrain::{Terrain, TerrainKind, TerrainSpec};

/// Joint angles, roll, pitch, roll rate, pitch rate, previous action.
pub const SLICE_DIM: usize = JOINTS + 4 + JOINTS;
/// Slices stacked into one proprioceptive observation.
pub const SLICE_HISTORY: usize = 3;
pub const FRAME_LEN: usize = camera::IMG * camera::IMG;

pub type Frame = Arc<[f32]>;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown terrain {0:?}")]
    UnknownTerrain(String),
    #[error("terrain spec: {0}")]
    TerrainSpec(String),
    #[error("step called on a finished episode; call reset first")]
    EpisodeOver,
    #[error("action has {got} entries, expected {JOINTS}")]
    ActionShape { got: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub terrain: TerrainKind,
    /// Obstacles per square metre of corridor at reset.
    pub density: f64,
    pub horizon: usize,
    pub randomize: bool,
    pub ranges: RandomizationRanges,
    pub depth_dropout: bool,
    pub mmdr: MmdrConfig,
    /// Render depth frames; off for variants without vision.
    pub render: bool,
    pub camera: CameraConfig,
    pub model: RobotModel,
    pub fall_height: f64,
    pub fall_angle: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            terrain: TerrainKind::ThinObstacle,
            density: 0.4,
            horizon: 999,
            randomize: true,
            ranges: RandomizationRanges::default(),
            depth_dropout: true,
            mmdr: MmdrConfig::default(),
            render: true,
            camera: CameraConfig::default(),
            model: RobotModel::default(),
            fall_height: 0.15,
            fall_angle: 0.8,
        }
    }
}

/// What the policy sees at a control tick.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `SLICE_HISTORY · SLICE_DIM` values, newest slice first.
    pub proprio: Vec<f64>,
    /// Four frames, newest first; `None` when rendering is off.
    pub depth: Option<[Frame; 4]>,
}

impl Observation {
    /// Appends the depth stack (metres) to `out`.
    pub fn extend_depth(&self, out: &mut Vec<f32>) {
        if let Some(fr) = &self.depth {
            for f in fr {
                out.extend_from_slice(f);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeMetrics {
    pub ret: f64,
    pub distance: f64,
    pub collisions: u32,
    pub steps: usize,
    pub fell: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub collision: u32,
    /// Base x displacement during this control step.
    pub dx: f64,
    /// Mean over substeps of `‖τ‖²`.
    pub tau_sq: f64,
    /// Mean forward velocity over the control step.
    pub vx: f64,
    pub fell: bool,
    pub truncated: bool,
    /// Non-finite state; the episode was aborted as a fall.
    pub fault: bool,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug)]
pub struct Env {
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    terrain: Terrain,
    draw: RandomizationDraw,
    dynamics: Dynamics,
    state: RobotState,
    delay: DelayState<Frame>,
    /// Most recent observed slices, newest first.
    history: VecDeque<Vec<f64>>,
    /// Direct frame history used when MMDR is off.
    recent_frames: VecDeque<Frame>,
    action: [f64; JOINTS],
    sim_time: f64,
    next_frame: f64,
    x0: f64,
    metrics: EpisodeMetrics,
    done: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delay = DelayState::new(cfg.mmdr.clone(), rng.next_u64());
        let terrain = Terrain::generate(&TerrainSpec::new(cfg.terrain, 0.0, 0));
        let draw = RandomizationDraw::nominal();
        let dynamics = Dynamics::new(&cfg.model, &draw);
        let state = RobotState::standing(&cfg.model, 0.0);
        Self {
            cfg,
            rng,
            terrain,
            draw,
            dynamics,
            state,
            delay,
            history: VecDeque::new(),
            recent_frames: VecDeque::new(),
            action: [0.0; JOINTS],
            sim_time: 0.0,
            next_frame: 0.0,
            x0: 0.0,
            metrics: EpisodeMetrics::default(),
            done: true,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Takes effect at the next reset.
    pub fn set_density(&mut self, density: f64) {
        self.cfg.density = density;
    }

    pub fn terrain(&self) -> &Terrain {
        &self.terrain
    }

    pub fn draw(&self) -> &RandomizationDraw {
        &self.draw
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn metrics(&self) -> &EpisodeMetrics {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn delay(&self) -> &DelayState<Frame> {
        &self.delay
    }

    /// Resamples layout and randomization and warm-fills the delay buffers.
    pub fn reset(&mut self) -> Observation {
        let spec = TerrainSpec::new(self.cfg.terrain, self.cfg.density, self.rng.next_u64());
        self.reset_with(Terrain::generate(&spec))
    }

    /// Reset onto a given terrain (replay, tests).
    pub fn reset_with(&mut self, terrain: Terrain) -> Observation {
        self.terrain = terrain;
        self.draw = if self.cfg.randomize {
            let mut ranges = self.cfg.ranges.clone();
            ranges.latency.1 = ranges.latency.1.min(self.cfg.mmdr.delta_max.max(0.0));
            RandomizationDraw::sample(&ranges, &mut self.rng)
        } else {
            RandomizationDraw::nominal()
        };
        self.dynamics = Dynamics::new(&self.cfg.model, &self.draw);
        self.state = RobotState::standing(&self.cfg.model, self.terrain.height_at(0.0, 0.0));
        self.action = [0.0; JOINTS];
        self.sim_time = 0.0;
        self.x0 = self.state.pos.x;
        self.metrics = EpisodeMetrics::default();
        self.done = false;

        let slice = self.slice();
        let frame = self.cfg.render.then(|| self.capture());
        self.next_frame = self.cfg.mmdr.dt_vis();
        self.delay.reset(self.draw.latency, &slice, frame.clone());
        self.recent_frames.clear();
        if let Some(f) = frame {
            self.recent_frames.extend(std::iter::repeat_n(f, 4));
        }
        let first = self.observed_slice();
        self.history = std::iter::repeat_n(first, SLICE_HISTORY).collect();
        self.observation()
    }

    /// Applies a network-space action for one control step.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != JOINTS {
            return Err(EnvError::ActionShape { got: action.len() });
        }
        for (dst, a) in self.action.iter_mut().zip(action) {
            *dst = a.clamp(-1.0, 1.0);
        }
        let from = self.state.targets;
        let to = self.cfg.model.action_to_targets(&self.action);
        let n = self.cfg.mmdr.substeps();
        let dt = self.cfg.mmdr.dt_sim();
        let x_start = self.state.pos.x;
        let mut tau_sq = 0.0;
        let mut fault = false;
        for i in 0..n {
            self.state.targets = if self.cfg.model.target_ramp {
                let w = (i + 1) as f64 / n as f64;
                std::array::from_fn(|j| from[j] + w * (to[j] - from[j]))
            } else {
                to
            };
            robot::substep(&self.cfg.model, &self.dynamics, &mut self.state, &self.terrain, dt);
            self.terrain.advance(dt);
            self.sim_time += dt;
            if !self.state.is_finite() {
                fault = true;
                break;
            }
            tau_sq += self.state.torque.iter().map(|t| t * t).sum::<f64>();
            if self.cfg.mmdr.enabled {
                let s = self.slice();
                self.delay.push_slice(s);
            }
            if self.cfg.render && self.sim_time + 1e-12 >= self.next_frame {
                let f = self.capture();
                if self.cfg.mmdr.enabled {
                    self.delay.push_frame(f);
                } else {
                    self.recent_frames.push_front(f);
                    self.recent_frames.truncate(4);
                }
                self.next_frame += self.cfg.mmdr.dt_vis();
            }
        }
        let dt_ctrl = dt * n as f64;
        let (dx, vx, tau_sq, r) = if fault {
            log::warn!("non-finite robot state at t = {:.4} s; aborting episode", self.sim_time);
            (0.0, 0.0, 0.0, 0.0)
        } else {
            let tau_sq = tau_sq / n as f64;
            let dx = self.state.pos.x - x_start;
            let vx = dx / dt_ctrl;
            (dx, vx, tau_sq, reward(vx, tau_sq))
        };
        let collision = u32::from(!fault && robot::in_collision(&self.cfg.model, &self.state, &self.terrain));
        let fell = fault || self.fallen();
        self.metrics.steps += 1;
        self.metrics.ret += r;
        if !fault {
            self.metrics.distance = self.state.pos.x - self.x0;
        }
        self.metrics.collisions += collision;
        self.metrics.fell = fell;
        let truncated = !fell && self.metrics.steps >= self.cfg.horizon;
        self.done = fell || truncated;

        let s = self.observed_slice();
        self.history.push_front(s);
        self.history.truncate(SLICE_HISTORY);
        let obs = self.observation();
        Ok(StepResult { obs, reward: r, done: self.done, info: StepInfo { collision, dx, tau_sq, vx, fell, truncated, fault } })
    }

    fn fallen(&self) -> bool {
        let (roll, pitch, _) = self.state.rpy();
        let ground = self.terrain.height_at(self.state.pos.x, self.state.pos.y);
        self.state.pos.z - ground < self.cfg.fall_height
            || roll.abs() > self.cfg.fall_angle
            || pitch.abs() > self.cfg.fall_angle
    }

    /// Current undelayed proprioceptive slice.
    pub fn slice(&self) -> Vec<f64> {
        let (roll, pitch, _) = self.state.rpy();
        let mut s = Vec::with_capacity(SLICE_DIM);
        s.extend_from_slice(&self.state.q);
        s.extend_from_slice(&[roll, pitch, self.state.omega.x, self.state.omega.y]);
        s.extend_from_slice(&self.action);
        s
    }

    fn observed_slice(&self) -> Vec<f64> {
        if self.cfg.mmdr.enabled {
            self.delay.delayed_proprio()
        } else {
            self.slice()
        }
    }

    fn observation(&mut self) -> Observation {
        let proprio = self.history.iter().flatten().copied().collect();
        let depth = if !self.cfg.render {
            None
        } else if self.cfg.mmdr.enabled {
            self.delay.delayed_frames()
        } else {
            let f = &self.recent_frames;
            Some([f[0].clone(), f[1].clone(), f[2].clone(), f[3].clone()])
        };
        Observation { proprio, depth }
    }

    /// Renders the current view, applying depth dropout when enabled.
    fn capture(&mut self) -> Frame {
        let mut frame = self.render_depth();
        if self.cfg.depth_dropout {
            perturb_depth(&mut frame, &mut self.rng);
        }
        frame.iter().map(|&v| v as f32).collect::<Vec<f32>>().into()
    }

    pub fn scene(&self) -> Scene<'_> {
        let ground = match &self.terrain.heightfield {
            Some(h) => Ground::Field(h),
            None => Ground::Flat,
        };
        Scene { ground, obstacles: &self.terrain.obstacles }
    }

    /// Metric depth from the head camera, unperturbed.
    pub fn render_depth(&self) -> Vec<f64> {
        let pose = CameraPose::from_body(&self.cfg.camera, &self.state.pos, &self.state.rotation());
        camera::render(&self.cfg.camera, &pose, &self.scene())
    }

    /// Uniform action in `[-1, 1]^12`, for random-policy baselines.
    pub fn random_action<R: Rng>(rng: &mut R) -> [f64; JOINTS] {
        std::array::from_fn(|_| rng.random_range(-1.0..=1.0))
    }
}
