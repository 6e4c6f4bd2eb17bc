//! Episode-wise physics and control randomization, and depth dropout.

use rand::Rng;

use super::camera::{DEPTH_FAR, IMG};

/// Closed interval `[lo, hi]`.
pub type Range = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct RandomizationRanges {
    pub mass_scale: Range,
    pub inertia_scale: Range,
    pub friction: Range,
    /// N·m·s/rad
    pub motor_viscous: Range,
    pub torque_limit_scale: Range,
    pub kp: Range,
    pub kd: Range,
    /// seconds
    pub latency: Range,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            mass_scale: (0.8, 1.2),
            inertia_scale: (0.5, 1.5),
            friction: (0.5, 1.25),
            motor_viscous: (0.0, 0.05),
            torque_limit_scale: (0.8, 1.2),
            kp: (40.0, 90.0),
            kd: (0.4, 0.8),
            latency: (0.0, 0.04),
        }
    }
}

/// Number of rigid links whose mass and inertia are scaled (base + 3 per leg).
pub const LINKS: usize = 13;

#[derive(Clone, Debug, PartialEq)]
pub struct RandomizationDraw {
    pub mass_scale: [f64; LINKS],
    pub inertia_scale: [f64; LINKS],
    pub friction: f64,
    pub motor_viscous: f64,
    pub torque_limit_scale: f64,
    pub kp: f64,
    pub kd: f64,
    pub latency: f64,
}

impl RandomizationDraw {
    /// Fixed values used when randomization is off.
    pub fn nominal() -> Self {
        Self {
            mass_scale: [1.0; LINKS],
            inertia_scale: [1.0; LINKS],
            friction: 0.9,
            motor_viscous: 0.0,
            torque_limit_scale: 1.0,
            kp: 65.0,
            kd: 0.6,
            latency: 0.0,
        }
    }

    pub fn sample<R: Rng>(r: &RandomizationRanges, rng: &mut R) -> Self {
        let mut u = |(lo, hi): Range| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut mass_scale = [0.0; LINKS];
        let mut inertia_scale = [0.0; LINKS];
        for m in mass_scale.iter_mut() {
            *m = u(r.mass_scale);
        }
        for i in inertia_scale.iter_mut() {
            *i = u(r.inertia_scale);
        }
        Self {
            mass_scale,
            inertia_scale,
            friction: u(r.friction),
            motor_viscous: u(r.motor_viscous),
            torque_limit_scale: u(r.torque_limit_scale),
            kp: u(r.kp),
            kd: u(r.kd),
            latency: u(r.latency),
        }
    }

    /// First field outside its range, if any.
    pub fn out_of_range(&self, r: &RandomizationRanges) -> Option<&'static str> {
        let inside = |v: f64, (lo, hi): Range| v >= lo && v <= hi;
        if !self.mass_scale.iter().all(|&v| inside(v, r.mass_scale)) {
            return Some("mass_scale");
        }
        if !self.inertia_scale.iter().all(|&v| inside(v, r.inertia_scale)) {
            return Some("inertia_scale");
        }
        let scalars = [
            ("friction", self.friction, r.friction),
            ("motor_viscous", self.motor_viscous, r.motor_viscous),
            ("torque_limit_scale", self.torque_limit_scale, r.torque_limit_scale),
            ("kp", self.kp, r.kp),
            ("kd", self.kd, r.kd),
            ("latency", self.latency, r.latency),
        ];
        scalars.into_iter().find(|&(_, v, rg)| !inside(v, rg)).map(|(n, _, _)| n)
    }
}

/// Sets `K ~ U{3,…,30}` distinct pixels to the far clip. Returns `K`.
pub fn perturb_depth<R: Rng>(frame: &mut [f64], rng: &mut R) -> usize {
    debug_assert_eq!(frame.len(), IMG * IMG);
    let k = rng.random_range(3..=30usize);
    for i in rand::seq::index::sample(rng, frame.len(), k) {
        frame[i] = DEPTH_FAR;
    }
    k
}
