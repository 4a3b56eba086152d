//! Planar quadrotor: collective thrust along body z, roll torque.

use serde::{Deserialize, Serialize};

use crate::state::Range;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub p_y: f64,
    pub p_z: f64,
    pub v_y: f64,
    pub v_z: f64,
    pub phi: f64,
    pub phi_dot: f64,
}

impl PlantState {
    pub fn is_finite(&self) -> bool {
        [self.p_y, self.p_z, self.v_y, self.v_z, self.phi, self.phi_dot]
            .iter()
            .all(|x| x.is_finite())
    }

    /// Body z axis in the `(y, z)` plane.
    pub fn body_z(&self) -> (f64, f64) {
        (-self.phi.sin(), self.phi.cos())
    }

    /// Point `l` below the centroid along body z.
    pub fn bottom(&self, l: f64) -> (f64, f64) {
        let (zy, zz) = self.body_z();
        (self.p_y - l * zy, self.p_z - l * zz)
    }

    /// Acceleration produced by thrust `f` at the current roll.
    pub fn accel(&self, f: f64, m_mass: f64, g: f64) -> (f64, f64) {
        (-f / m_mass * self.phi.sin(), f / m_mass * self.phi.cos() - g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub m_mass: f64,
    pub j_inertia: f64,
    /// Centroid-to-bottom length used for contact, m.
    pub l: f64,
    pub g: f64,
    /// Roll loop proportional and derivative gains, 1/s² and 1/s.
    pub att_kp: f64,
    pub att_kd: f64,
    /// Position and velocity gains of the outer loop, 1/s² and 1/s.
    pub pos_kp: f64,
    pub pos_kd: f64,
    /// Time-to-go below which attitude tracking takes over, s.
    pub t_eps: f64,
    pub f_limits: Range,
    pub m_limit: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m_mass: 1.0,
            j_inertia: 0.01,
            l: 0.05,
            g: 9.81,
            att_kp: 900.0,
            att_kd: 60.0,
            pos_kp: 16.0,
            pos_kd: 8.0,
            t_eps: 0.3,
            f_limits: Range::new(0.0, 35.0),
            m_limit: 5.0,
        }
    }
}

impl VehicleParams {
    pub fn is_valid(&self) -> bool {
        self.m_mass > 0.0
            && self.j_inertia > 0.0
            && self.l >= 0.0
            && self.g > 0.0
            && [self.att_kp, self.att_kd, self.pos_kp, self.pos_kd].iter().all(|k| *k >= 0.0)
            && self.t_eps >= 0.0
            && self.f_limits.lo < self.f_limits.hi
            && self.m_limit > 0.0
    }
}

/// One semi-implicit Euler step. Thrust and torque are clamped to the
/// actuator limits; `wind` is an extra acceleration on `(y, z)`.
pub fn step_plant(x: &PlantState, f: f64, m: f64, params: &VehicleParams, wind: (f64, f64), dt: f64) -> PlantState {
    let f = f.clamp(params.f_limits.lo, params.f_limits.hi);
    let m = m.clamp(-params.m_limit, params.m_limit);
    let (ay, az) = x.accel(f, params.m_mass, params.g);
    let v_y = x.v_y + (ay + wind.0) * dt;
    let v_z = x.v_z + (az + wind.1) * dt;
    let phi_dot = x.phi_dot + m / params.j_inertia * dt;
    PlantState {
        p_y: x.p_y + v_y * dt,
        p_z: x.p_z + v_z * dt,
        v_y,
        v_z,
        phi: x.phi + phi_dot * dt,
        phi_dot,
    }
}
