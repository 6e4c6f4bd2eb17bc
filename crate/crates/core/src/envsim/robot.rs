//! Simplified quadruped: one rigid base, twelve PD-driven joints with
//! reflected inertia, and four point feet on spring-damper ground contact.
//! Legs are massless apart from joint inertia; their link masses are lumped
//! into the base.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::randomization::{RandomizationDraw, LINKS};
use super::terrain::Terrain;

pub const LEGS: usize = 4;
pub const JOINTS: usize = 12;
pub const GRAVITY: f64 = 9.81;

/// Leg order FR, FL, RR, RL.
const HIP_SIGN_X: [f64; LEGS] = [1.0, 1.0, -1.0, -1.0];
const HIP_SIGN_Y: [f64; LEGS] = [-1.0, 1.0, -1.0, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub base_mass: f64,
    /// hip, thigh, calf
    pub link_mass: [f64; 3],
    pub base_inertia: [f64; 3],
    pub joint_inertia: f64,
    pub hip_offset: [f64; 2],
    pub thigh: f64,
    pub calf: f64,
    /// Per joint type (abduction, hip, knee): centre of the joint range,
    /// which is also the standing pose.
    pub q_nominal: [f64; 3],
    /// Half-width of the joint range; actions of ±1 command its ends.
    pub q_half_range: [f64; 3],
    pub torque_limit: f64,
    pub contact_k: f64,
    pub contact_c: f64,
    /// Tangential stick spring and damper.
    pub friction_k: f64,
    pub friction_c: f64,
    pub obstacle_k: f64,
    pub obstacle_c: f64,
    /// Base collision spheres along the body x axis.
    pub body_spheres: [f64; 3],
    pub body_radius: f64,
    pub foot_radius: f64,
    /// Integration steps per simulator step.
    pub microsteps: usize,
    /// Ramp PD targets linearly across the control period instead of
    /// switching them at its start.
    pub target_ramp: bool,
}

impl Default for RobotModel {
    fn default() -> Self {
        Self {
            base_mass: 3.0,
            link_mass: [0.2, 0.2, 0.05],
            // Includes the lumped legs.
            base_inertia: [0.05, 0.1, 0.12],
            joint_inertia: 0.02,
            hip_offset: [0.19, 0.1],
            thigh: 0.2,
            calf: 0.2,
            q_nominal: [0.0, 0.8, -1.6],
            q_half_range: [0.2, 0.3, 0.3],
            torque_limit: 12.0,
            contact_k: 4000.0,
            contact_c: 40.0,
            friction_k: 3000.0,
            friction_c: 20.0,
            obstacle_k: 3000.0,
            obstacle_c: 30.0,
            body_spheres: [-0.14, 0.0, 0.14],
            body_radius: 0.1,
            foot_radius: 0.02,
            microsteps: 2,
            target_ramp: true,
        }
    }
}

impl RobotModel {
    /// Maps a network action in `[-1, 1]` to joint targets in radians.
    pub fn action_to_targets(&self, a: &[f64]) -> [f64; JOINTS] {
        std::array::from_fn(|j| self.q_nominal[j % 3] + self.q_half_range[j % 3] * a[j])
    }

    pub fn q_limits(&self, j: usize) -> (f64, f64) {
        let (c, h) = (self.q_nominal[j % 3], self.q_half_range[j % 3]);
        (c - h, c + h)
    }

    pub fn nominal_q(&self) -> [f64; JOINTS] {
        std::array::from_fn(|j| self.q_nominal[j % 3])
    }

    pub fn hip(&self, leg: usize) -> Vector3<f64> {
        Vector3::new(HIP_SIGN_X[leg] * self.hip_offset[0], HIP_SIGN_Y[leg] * self.hip_offset[1], 0.0)
    }

    /// Foot position in the base frame and its joint Jacobian (columns are
    /// ∂p/∂q for abduction, hip, knee).
    pub fn foot(&self, leg: usize, q: &[f64]) -> (Vector3<f64>, Matrix3<f64>) {
        let (q0, q1, q2) = (q[3 * leg], q[3 * leg + 1], q[3 * leg + 2]);
        let s = HIP_SIGN_Y[leg];
        let (l1, l2) = (self.thigh, self.calf);
        let (s1, c1, s12, c12) = (q1.sin(), q1.cos(), (q1 + q2).sin(), (q1 + q2).cos());
        let xp = -l1 * s1 - l2 * s12;
        let zp = -l1 * c1 - l2 * c12;
        let (dx1, dx2) = (-l1 * c1 - l2 * c12, -l2 * c12);
        let (dz1, dz2) = (l1 * s1 + l2 * s12, l2 * s12);
        let phi = s * q0;
        let (sp, cp) = (phi.sin(), phi.cos());
        let p = self.hip(leg) + Vector3::new(xp, -zp * sp, zp * cp);
        let j = Matrix3::new(
            0.0, dx1, dx2, //
            -zp * cp * s, -dz1 * sp, -dz2 * sp, //
            -zp * sp * s, dz1 * cp, dz2 * cp,
        );
        (p, j)
    }

    /// Height of the base above flat ground in the nominal stance.
    pub fn nominal_height(&self) -> f64 {
        -self.foot(0, &self.nominal_q()).0.z + self.foot_radius
    }
}

/// Physical parameters after applying a randomization draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Dynamics {
    pub mass: f64,
    pub inertia: Vector3<f64>,
    pub joint_inertia: [f64; JOINTS],
    pub friction: f64,
    pub viscous: f64,
    pub torque_limit: f64,
    pub kp: f64,
    pub kd: f64,
}

impl Dynamics {
    pub fn new(m: &RobotModel, d: &RandomizationDraw) -> Self {
        let mut mass = m.base_mass * d.mass_scale[0];
        for (i, s) in d.mass_scale.iter().enumerate().skip(1) {
            mass += m.link_mass[(i - 1) % 3] * s;
        }
        let inertia = Vector3::from(m.base_inertia) * d.inertia_scale[0] * mass
            / (m.base_mass + 4.0 * m.link_mass.iter().sum::<f64>());
        debug_assert_eq!(LINKS, 1 + JOINTS);
        Self {
            mass,
            inertia,
            joint_inertia: std::array::from_fn(|j| m.joint_inertia * d.inertia_scale[1 + j]),
            friction: d.friction,
            viscous: d.motor_viscous,
            torque_limit: m.torque_limit * d.torque_limit_scale,
            kp: d.kp,
            kd: d.kd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub pos: Vector3<f64>,
    pub rot: UnitQuaternion<f64>,
    /// World frame.
    pub vel: Vector3<f64>,
    /// Body frame.
    pub omega: Vector3<f64>,
    pub q: [f64; JOINTS],
    pub qd: [f64; JOINTS],
    pub targets: [f64; JOINTS],
    pub torque: [f64; JOINTS],
    /// Stick points of feet in contact.
    pub anchors: [Option<[f64; 2]>; LEGS],
}

impl RobotState {
    pub fn standing(m: &RobotModel, ground: f64) -> Self {
        let q = m.nominal_q();
        Self {
            pos: Vector3::new(0.0, 0.0, ground + m.nominal_height()),
            rot: UnitQuaternion::identity(),
            vel: Vector3::zeros(),
            omega: Vector3::zeros(),
            q,
            qd: [0.0; JOINTS],
            targets: q,
            torque: [0.0; JOINTS],
            anchors: [None; LEGS],
        }
    }

    /// (roll, pitch, yaw)
    pub fn rpy(&self) -> (f64, f64, f64) {
        self.rot.euler_angles()
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        self.rot.to_rotation_matrix()
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(self.vel.iter()).chain(self.omega.iter()).all(|v| v.is_finite())
            && self.rot.coords.iter().all(|v| v.is_finite())
            && self.q.iter().chain(&self.qd).all(|v| v.is_finite())
    }

    /// World positions of the body collision spheres.
    pub fn body_points(&self, m: &RobotModel) -> [Vector3<f64>; 3] {
        m.body_spheres.map(|x| self.pos + self.rot * Vector3::new(x, 0.0, 0.0))
    }

    pub fn feet_world(&self, m: &RobotModel) -> [Vector3<f64>; LEGS] {
        std::array::from_fn(|l| self.pos + self.rot * m.foot(l, &self.q).0)
    }
}

/// Advances one simulator step of length `dt` using `m.microsteps`
/// semi-implicit Euler steps.
pub fn substep(m: &RobotModel, dy: &Dynamics, s: &mut RobotState, terrain: &Terrain, dt: f64) {
    let n = m.microsteps.max(1);
    for _ in 0..n {
        integrate(m, dy, s, terrain, dt / n as f64);
    }
}

fn integrate(m: &RobotModel, dy: &Dynamics, s: &mut RobotState, terrain: &Terrain, dt: f64) {
    let rot = s.rotation();
    let mut force = Vector3::new(0.0, 0.0, -dy.mass * GRAVITY);
    let mut torque_w = Vector3::zeros();
    let mut tau_ext = [0.0; JOINTS];

    for j in 0..JOINTS {
        let t = dy.kp * (s.targets[j] - s.q[j]) - dy.kd * s.qd[j] - dy.viscous * s.qd[j];
        s.torque[j] = t.clamp(-dy.torque_limit, dy.torque_limit);
    }

    let omega_w = rot * s.omega;
    for leg in 0..LEGS {
        let (pb, jac) = m.foot(leg, &s.q);
        let qd = Vector3::new(s.qd[3 * leg], s.qd[3 * leg + 1], s.qd[3 * leg + 2]);
        let r = rot * pb;
        let p = s.pos + r;
        let v = s.vel + omega_w.cross(&r) + rot * (jac * qd);
        let mut f = ground_force(m, dy, terrain, &p, &v, &mut s.anchors[leg]);
        f += obstacle_force(m, terrain, &p, &v, m.foot_radius);
        if f != Vector3::zeros() {
            force += f;
            torque_w += r.cross(&f);
            let tj = jac.transpose() * (rot.transpose() * f);
            for k in 0..3 {
                tau_ext[3 * leg + k] += tj[k];
            }
        }
    }
    for x in m.body_spheres {
        let r = rot * Vector3::new(x, 0.0, 0.0);
        let p = s.pos + r;
        let v = s.vel + omega_w.cross(&r);
        let mut f = obstacle_force(m, terrain, &p, &v, m.body_radius);
        // The base itself resting on the ground.
        let g = terrain.height_at(p.x, p.y);
        let pen = g + m.body_radius - p.z;
        if pen > 0.0 {
            let fz = (m.contact_k * pen - m.contact_c * v.z).max(0.0);
            let ft = friction(m, dy, &v, fz);
            f += Vector3::new(ft.x, ft.y, fz);
        }
        force += f;
        torque_w += r.cross(&f);
    }

    for j in 0..JOINTS {
        let acc = (s.torque[j] + tau_ext[j]) / dy.joint_inertia[j];
        s.qd[j] += dt * acc;
        s.q[j] += dt * s.qd[j];
        let (lo, hi) = m.q_limits(j);
        if s.q[j] < lo || s.q[j] > hi {
            s.q[j] = s.q[j].clamp(lo, hi);
            s.qd[j] = 0.0;
        }
    }

    s.vel += force * (dt / dy.mass);
    s.pos += s.vel * dt;
    let tb = rot.transpose() * torque_w;
    let iw = dy.inertia.component_mul(&s.omega);
    let wdot = (tb - s.omega.cross(&iw)).component_div(&dy.inertia);
    s.omega += wdot * dt;
    s.rot *= UnitQuaternion::from_scaled_axis(s.omega * dt);
    s.rot.renormalize();
}

fn friction(m: &RobotModel, dy: &Dynamics, v: &Vector3<f64>, fz: f64) -> Vector3<f64> {
    let vt = Vector3::new(v.x, v.y, 0.0);
    let mut ft = -vt * m.friction_c;
    let cap = dy.friction * fz;
    let n = ft.norm();
    if n > cap {
        ft *= cap / n;
    }
    ft
}

/// Spring-damper normal force and stick-slip tangential force on a foot.
fn ground_force(
    m: &RobotModel,
    dy: &Dynamics,
    t: &Terrain,
    p: &Vector3<f64>,
    v: &Vector3<f64>,
    anchor: &mut Option<[f64; 2]>,
) -> Vector3<f64> {
    let pen = t.height_at(p.x, p.y) + m.foot_radius - p.z;
    if pen <= 0.0 {
        *anchor = None;
        return Vector3::zeros();
    }
    let fz = (m.contact_k * pen - m.contact_c * v.z).max(0.0);
    let a = anchor.get_or_insert([p.x, p.y]);
    let mut fx = -m.friction_k * (p.x - a[0]) - m.friction_c * v.x;
    let mut fy = -m.friction_k * (p.y - a[1]) - m.friction_c * v.y;
    let cap = dy.friction * fz;
    let n = (fx * fx + fy * fy).sqrt();
    if n > cap {
        // Slip: shrink the force onto the cone and drag the anchor along.
        let k = if n > 0.0 { cap / n } else { 0.0 };
        fx *= k;
        fy *= k;
        a[0] = p.x + fx / m.friction_k;
        a[1] = p.y + fy / m.friction_k;
    }
    Vector3::new(fx, fy, fz)
}

fn obstacle_force(m: &RobotModel, t: &Terrain, p: &Vector3<f64>, v: &Vector3<f64>, r: f64) -> Vector3<f64> {
    let mut f = Vector3::zeros();
    for o in &t.obstacles {
        if let Some((depth, n)) = o.sphere_penetration([p.x, p.y, p.z], r) {
            let n = Vector3::from(n);
            let rel = v - Vector3::new(o.vel[0], o.vel[1], 0.0);
            f += n * (m.obstacle_k * depth - m.obstacle_c * rel.dot(&n)).max(0.0);
        }
    }
    f
}

/// True if any body or foot sphere overlaps an obstacle.
pub fn in_collision(m: &RobotModel, s: &RobotState, t: &Terrain) -> bool {
    let body = s.body_points(m).map(|p| (p, m.body_radius));
    let feet = s.feet_world(m).map(|p| (p, m.foot_radius));
    body.iter().chain(feet.iter()).any(|(p, r)| {
        t.obstacles.iter().any(|o| o.contains([p.x, p.y, p.z]) || o.sphere_penetration([p.x, p.y, p.z], *r).is_some())
    })
}

/// `⟨v, e_x⟩ + 0.1 − 0.005‖τ‖²`.
pub fn reward(vx: f64, tau_sq: f64) -> f64 {
    vx + 0.1 - 0.005 * tau_sq
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn foot_jacobian_matches_differences() {
        let m = RobotModel::default();
        let mut q = m.nominal_q();
        q[3] = 0.3;
        q[4] = 0.5;
        q[5] = -1.2;
        for leg in 0..LEGS {
            let (_, jac) = m.foot(leg, &q);
            for k in 0..3 {
                let h = 1e-6;
                let mut qp = q;
                let mut qm = q;
                qp[3 * leg + k] += h;
                qm[3 * leg + k] -= h;
                let fd = (m.foot(leg, &qp).0 - m.foot(leg, &qm).0) / (2.0 * h);
                assert!((fd - jac.column(k)).norm() < 1e-8, "leg {leg} joint {k}");
            }
        }
    }

    #[test]
    fn reward_cases() {
        assert_eq!(reward(0.0, 0.0), 0.1);
        assert_eq!(reward(1.0, 0.0), 1.1);
    }
}
