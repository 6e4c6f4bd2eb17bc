//! Pinhole depth camera raycast against ground and cuboids.
//!
//! Pixel values are z-depth (distance along the optical axis), so a ray
//! parameterised as `o + t·d` with `d·forward = 1` has depth `t`.

use nalgebra::{Rotation3, Vector3};

use super::terrain::{Cuboid, Heightfield, RUGGED_MAX_HEIGHT};

pub const IMG: usize = 64;
pub const DEPTH_NEAR: f64 = 0.3;
pub const DEPTH_FAR: f64 = 10.0;

#[derive(Copy, Clone, Debug)]
pub enum Ground<'a> {
    None,
    Flat,
    Field(&'a Heightfield),
}

#[derive(Copy, Clone, Debug)]
pub struct Scene<'a> {
    pub ground: Ground<'a>,
    pub obstacles: &'a [Cuboid],
}

/// Mounting and intrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraConfig {
    /// Body-frame mount position.
    pub offset: [f64; 3],
    /// Downward pitch, radians.
    pub pitch: f64,
    pub hfov: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { offset: [0.2, 0.0, 0.25], pitch: 30f64.to_radians(), hfov: 90f64.to_radians() }
    }
}

/// World-frame camera pose.
#[derive(Clone, Debug)]
pub struct CameraPose {
    pub origin: Vector3<f64>,
    /// Columns: forward, left, up.
    pub axes: Rotation3<f64>,
}

impl CameraPose {
    pub fn from_body(cfg: &CameraConfig, base_pos: &Vector3<f64>, base_rot: &Rotation3<f64>) -> Self {
        let mount = Rotation3::from_axis_angle(&Vector3::y_axis(), cfg.pitch);
        Self { origin: base_pos + base_rot * Vector3::from(cfg.offset), axes: base_rot * mount }
    }

    /// Ray through continuous pixel coordinates `(col, row)`; `(0,0)` is the
    /// top-left corner of the image, `(IMG/2, IMG/2)` the optical axis.
    pub fn ray(&self, cfg: &CameraConfig, col: f64, row: f64) -> Vector3<f64> {
        let focal = (IMG as f64 / 2.0) / (cfg.hfov / 2.0).tan();
        let half = IMG as f64 / 2.0;
        self.axes * Vector3::new(1.0, (half - col) / focal, (half - row) / focal)
    }
}

/// Unclipped z-depth along one ray, `None` for no hit within `t_max`.
pub fn cast(scene: &Scene, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let mut best = ground_hit(scene.ground, o, d, t_max);
    let (oa, da) = ([o.x, o.y, o.z], [d.x, d.y, d.z]);
    for c in scene.obstacles {
        let lim = best.unwrap_or(t_max);
        if let Some(t) = c.ray_hit(oa, da, lim) {
            if best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

fn ground_hit(g: Ground, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
    match g {
        Ground::None => None,
        Ground::Flat => (d.z < 0.0 && o.z > 0.0).then(|| -o.z / d.z).filter(|&t| t <= t_max),
        Ground::Field(hf) => field_hit(hf, o, d, t_max),
    }
}

/// March the segment where the ray is below the height cap, then bisect.
fn field_hit(hf: &Heightfield, o: &Vector3<f64>, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
    let below = |t: f64| {
        let p = o + d * t;
        p.z <= hf.height_at(p.x, p.y)
    };
    let t_enter = if o.z > RUGGED_MAX_HEIGHT {
        if d.z >= 0.0 {
            return None;
        }
        (RUGGED_MAX_HEIGHT - o.z) / d.z
    } else {
        0.0
    };
    if t_enter > t_max {
        return None;
    }
    if below(t_enter) {
        return Some(t_enter);
    }
    let t_end = if d.z < 0.0 { (-o.z / d.z).min(t_max) } else { t_max };
    let horiz = (d.x * d.x + d.y * d.y).sqrt().max(1e-9);
    let dt = 0.5 * hf.cell / horiz;
    let (mut lo, mut t) = (t_enter, t_enter);
    while t < t_end {
        t = (t + dt).min(t_end);
        if below(t) {
            let mut hi = t;
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if below(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(hi);
        }
        lo = t;
    }
    // Outside the field the ground is the z = 0 plane.
    (d.z < 0.0 && t_end < t_max).then(|| -o.z / d.z).filter(|&t| t <= t_max)
}

/// Obstacles that may be seen from `pose`.
fn visible(pose: &CameraPose, obstacles: &[Cuboid]) -> Vec<Cuboid> {
    // Farthest hit with depth ≤ DEPTH_FAR lies within DEPTH_FAR·|d_corner|.
    let reach = DEPTH_FAR * 3f64.sqrt();
    obstacles
        .iter()
        .filter(|c| {
            let r = (c.half[0] * c.half[0] + c.half[1] * c.half[1] + c.half[2] * c.half[2]).sqrt();
            let v = Vector3::from(c.center) - pose.origin;
            v.norm() - r <= reach
        })
        .cloned()
        .collect()
}

/// Renders a row-major `IMG×IMG` frame clipped to `[DEPTH_NEAR, DEPTH_FAR]`.
pub fn render(cfg: &CameraConfig, pose: &CameraPose, scene: &Scene) -> Vec<f64> {
    let near = visible(pose, scene.obstacles);
    let local = Scene { ground: scene.ground, obstacles: &near };
    let mut out = Vec::with_capacity(IMG * IMG);
    for r in 0..IMG {
        for c in 0..IMG {
            let d = pose.ray(cfg, c as f64 + 0.5, r as f64 + 0.5);
            let z = cast(&local, &pose.origin, &d, DEPTH_FAR).unwrap_or(DEPTH_FAR);
            out.push(z.clamp(DEPTH_NEAR, DEPTH_FAR));
        }
    }
    out
}
