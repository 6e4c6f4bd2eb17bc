//! Procedural terrains: flat or rugged ground plus cuboid obstacles in a
//! forward corridor.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::EnvError;

/// Maximum ground height of the rugged kinds, metres.
pub const RUGGED_MAX_HEIGHT: f64 = 0.05;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum TerrainKind {
    ThinObstacle,
    StaticRugged,
    DynamicRugged,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 3] =
        [TerrainKind::ThinObstacle, TerrainKind::StaticRugged, TerrainKind::DynamicRugged];

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::ThinObstacle => "thin_obstacle",
            TerrainKind::StaticRugged => "static_rugged",
            TerrainKind::DynamicRugged => "dynamic_rugged",
        }
    }

    pub fn is_rugged(self) -> bool {
        !matches!(self, TerrainKind::ThinObstacle)
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TerrainKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TerrainKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EnvError::UnknownTerrain(s.to_string()))
    }
}

/// Everything needed to regenerate a layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainSpec {
    pub kind: TerrainKind,
    /// Expected obstacles per square metre of corridor.
    pub density: f64,
    pub seed: u64,
    /// Obstacles occupy `x ∈ [corridor_start, corridor_end]`, `|y| ≤ half_width`.
    pub corridor_start: f64,
    pub corridor_end: f64,
    pub half_width: f64,
}

impl TerrainSpec {
    pub fn new(kind: TerrainKind, density: f64, seed: u64) -> Self {
        Self { kind, density, seed, corridor_start: 1.5, corridor_end: 45.0, half_width: 2.0 }
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "kind={}\ndensity={}\nseed={}\ncorridor_start={}\ncorridor_end={}\nhalf_width={}\n",
            self.kind, self.density, self.seed, self.corridor_start, self.corridor_end, self.half_width
        )
    }

    pub fn from_text(text: &str) -> Result<Self, EnvError> {
        let mut spec = TerrainSpec::new(TerrainKind::ThinObstacle, 0.0, 0);
        let bad = |k: &str, v: &str| EnvError::TerrainSpec(format!("bad value {v:?} for {k}"));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EnvError::TerrainSpec(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "kind" => spec.kind = v.parse()?,
                "density" => spec.density = v.parse().map_err(|_| bad(k, v))?,
                "seed" => spec.seed = v.parse().map_err(|_| bad(k, v))?,
                "corridor_start" => spec.corridor_start = v.parse().map_err(|_| bad(k, v))?,
                "corridor_end" => spec.corridor_end = v.parse().map_err(|_| bad(k, v))?,
                "half_width" => spec.half_width = v.parse().map_err(|_| bad(k, v))?,
                _ => return Err(EnvError::TerrainSpec(format!("unknown key {k:?}"))),
            }
        }
        Ok(spec)
    }
}

/// Axis-aligned box; `vel` is the planar velocity of dynamic obstacles.
#[derive(Clone, Debug, PartialEq)]
pub struct Cuboid {
    pub center: [f64; 3],
    pub half: [f64; 3],
    pub vel: [f64; 2],
}

impl Cuboid {
    pub fn min(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] - self.half[i])
    }

    pub fn max(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.center[i] + self.half[i])
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| (p[i] - self.center[i]).abs() <= self.half[i])
    }

    /// Penetration of a sphere: `(depth, outward unit normal)`.
    pub fn sphere_penetration(&self, c: [f64; 3], r: f64) -> Option<(f64, [f64; 3])> {
        let d: [f64; 3] = [0, 1, 2].map(|i| c[i] - self.center[i]);
        if self.contains(c) {
            // Exit through the nearest face.
            let (mut axis, mut gap) = (0, f64::INFINITY);
            for i in 0..3 {
                let g = self.half[i] - d[i].abs();
                if g < gap {
                    gap = g;
                    axis = i;
                }
            }
            let mut n = [0.0; 3];
            n[axis] = if d[axis] >= 0.0 { 1.0 } else { -1.0 };
            return Some((gap + r, n));
        }
        let q: [f64; 3] = [0, 1, 2].map(|i| d[i].clamp(-self.half[i], self.half[i]));
        let off: [f64; 3] = [0, 1, 2].map(|i| d[i] - q[i]);
        let dist = (off[0] * off[0] + off[1] * off[1] + off[2] * off[2]).sqrt();
        (dist < r && dist > 0.0).then(|| (r - dist, off.map(|o| o / dist)))
    }

    /// Slab test; returns the entry distance along a unit-speed ray.
    pub fn ray_hit(&self, o: [f64; 3], dir: [f64; 3], t_max: f64) -> Option<f64> {
        let (lo, hi) = (self.min(), self.max());
        let (mut t0, mut t1) = (0.0f64, t_max);
        for i in 0..3 {
            if dir[i].abs() < 1e-300 {
                if o[i] < lo[i] || o[i] > hi[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut a, mut b) = ((lo[i] - o[i]) * inv, (hi[i] - o[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

/// Regular grid of ground heights with bilinear interpolation; zero outside.
#[derive(Clone, Debug, PartialEq)]
pub struct Heightfield {
    pub origin: [f64; 2],
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub heights: Vec<f64>,
}

impl Heightfield {
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let fx = (x - self.origin[0]) / self.cell;
        let fy = (y - self.origin[1]) / self.cell;
        if !(fx >= 0.0 && fy >= 0.0) || fx >= (self.nx - 1) as f64 || fy >= (self.ny - 1) as f64 {
            return 0.0;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let h = |i: usize, j: usize| self.heights[j * self.nx + i];
        let a = h(ix, iy) * (1.0 - tx) + h(ix + 1, iy) * tx;
        let b = h(ix, iy + 1) * (1.0 - tx) + h(ix + 1, iy + 1) * tx;
        a * (1.0 - ty) + b * ty
    }

    pub fn max_height(&self) -> f64 {
        self.heights.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Terrain {
    pub spec: TerrainSpec,
    pub heightfield: Option<Heightfield>,
    pub obstacles: Vec<Cuboid>,
}

impl Terrain {
    /// Deterministic in `spec`.
    pub fn generate(spec: &TerrainSpec) -> Terrain {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let heightfield = spec.kind.is_rugged().then(|| rugged_field(spec, &mut rng));
        let (x0, x1, hw) = (spec.corridor_start, spec.corridor_end, spec.half_width);
        let area = (x1 - x0).max(0.0) * 2.0 * hw;
        let mean = spec.density.max(0.0) * area;
        let count = if mean > 0.0 {
            Poisson::new(mean).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
        } else {
            0
        };
        let mut obstacles = Vec::with_capacity(count);
        for _ in 0..count {
            let (half, vel) = match spec.kind {
                TerrainKind::ThinObstacle => ([0.025, 0.025, 0.2], [0.0; 2]),
                TerrainKind::StaticRugged => (
                    [
                        rng.random_range(0.05..=0.3),
                        rng.random_range(0.05..=0.3),
                        rng.random_range(0.05..=0.25),
                    ],
                    [0.0; 2],
                ),
                TerrainKind::DynamicRugged => {
                    let speed = rng.random_range(0.1..=0.5);
                    let heading = rng.random_range(0.0..std::f64::consts::TAU);
                    (
                        [rng.random_range(0.05..=0.2), rng.random_range(0.05..=0.2), 0.2],
                        [speed * heading.cos(), speed * heading.sin()],
                    )
                }
            };
            let x = rng.random_range(x0 + half[0]..=(x1 - half[0]).max(x0 + half[0]));
            let y = rng.random_range(-hw + half[1]..=(hw - half[1]).max(-hw + half[1]));
            obstacles.push(Cuboid { center: [x, y, half[2]], half, vel });
        }
        Terrain { spec: spec.clone(), heightfield, obstacles }
    }

    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.heightfield.as_ref().map_or(0.0, |h| h.height_at(x, y))
    }

    pub fn max_height(&self) -> f64 {
        self.heightfield.as_ref().map_or(0.0, Heightfield::max_height)
    }

    /// Moves dynamic obstacles, reflecting them at the corridor bounds.
    pub fn advance(&mut self, dt: f64) {
        let (x0, x1, hw) = (self.spec.corridor_start, self.spec.corridor_end, self.spec.half_width);
        for o in &mut self.obstacles {
            if o.vel == [0.0, 0.0] {
                continue;
            }
            let bounds = [(x0 + o.half[0], x1 - o.half[0]), (-hw + o.half[1], hw - o.half[1])];
            for (i, (lo, hi)) in bounds.into_iter().enumerate() {
                o.center[i] += o.vel[i] * dt;
                if o.center[i] < lo {
                    o.center[i] = 2.0 * lo - o.center[i];
                    o.vel[i] = o.vel[i].abs();
                } else if o.center[i] > hi {
                    o.center[i] = 2.0 * hi - o.center[i];
                    o.vel[i] = -o.vel[i].abs();
                }
            }
        }
    }
}

/// Value noise on a 0.5 m lattice, upsampled bilinearly onto 0.1 m cells;
/// lattice values are drawn in `[0, RUGGED_MAX_HEIGHT]` so the field never
/// exceeds the cap.
fn rugged_field(spec: &TerrainSpec, rng: &mut ChaCha8Rng) -> Heightfield {
    let cell = 0.1;
    let coarse = 5;
    let origin = [-3.0, -spec.half_width - 1.0];
    let nx = (((spec.corridor_end + 5.0 - origin[0]) / cell).ceil() as usize / coarse) * coarse + 1;
    let ny = (((2.0 * spec.half_width + 2.0) / cell).ceil() as usize / coarse) * coarse + 1;
    let (cx, cy) = ((nx - 1) / coarse + 1, (ny - 1) / coarse + 1);
    let lattice: Vec<f64> = (0..cx * cy).map(|_| rng.random_range(0.0..=RUGGED_MAX_HEIGHT)).collect();
    let mut heights = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let (gi, gj) = (i / coarse, j / coarse);
            let (tx, ty) = ((i % coarse) as f64 / coarse as f64, (j % coarse) as f64 / coarse as f64);
            let l = |a: usize, b: usize| lattice[b.min(cy - 1) * cx + a.min(cx - 1)];
            let a = l(gi, gj) * (1.0 - tx) + l(gi + 1, gj) * tx;
            let b = l(gi, gj + 1) * (1.0 - tx) + l(gi + 1, gj + 1) * tx;
            heights[j * nx + i] = (a * (1.0 - ty) + b * ty).min(RUGGED_MAX_HEIGHT);
        }
    }
    Heightfield { origin, cell, nx, ny, heights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_text_round_trip() {
        let s = TerrainSpec::new(TerrainKind::DynamicRugged, 0.35, 99);
        assert_eq!(TerrainSpec::from_text(&s.to_text()).unwrap(), s);
        assert!(TerrainSpec::from_text("colour=red").is_err());
    }

    #[test]
    fn sphere_inside_box_pushes_out_nearest_face() {
        let c = Cuboid { center: [0.0; 3], half: [1.0, 0.1, 1.0], vel: [0.0; 2] };
        let (d, n) = c.sphere_penetration([0.0, 0.05, 0.0], 0.01).unwrap();
        assert!((d - 0.06).abs() < 1e-12);
        assert_eq!(n, [0.0, 1.0, 0.0]);
    }
}
