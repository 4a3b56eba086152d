//! Two-stage tracking: position/velocity feedback through the flatness map
//! while far from contact, open-loop attitude alignment near contact.

use crate::sim::plant::{PlantState, VehicleParams};
use crate::thrust_reg::{planned_thrust, thrust_command, AttitudeRamp, ThrustSchedule};
use crate::trajgen::Trajectory;

/// Thrust and roll producing the planar acceleration `(a_y, a_z)`.
pub fn flatness(a_y: f64, a_z: f64, m_mass: f64, g: f64) -> (f64, f64) {
    let f = m_mass * (a_y * a_y + (a_z + g).powi(2)).sqrt();
    (f, (-a_y).atan2(a_z + g))
}

/// Roll rate implied by acceleration `(a_y, a_z)` and jerk `(j_y, j_z)`.
pub fn flatness_rate(a_y: f64, a_z: f64, j_y: f64, j_z: f64, g: f64) -> f64 {
    let den = a_y * a_y + (a_z + g).powi(2);
    if den <= f64::EPSILON {
        return 0.0;
    }
    (a_y * j_z - j_y * (a_z + g)) / den
}

/// Roll PD with rate feedforward.
pub fn attitude_moment(x: &PlantState, phi_ref: f64, rate_ref: f64, p: &VehicleParams) -> f64 {
    p.j_inertia * (p.att_kp * (phi_ref - x.phi) + p.att_kd * (rate_ref - x.phi_dot))
}

/// Attitude-stage data fixed when the stage starts.
#[derive(Debug, Clone, PartialEq)]
pub struct StageTwo {
    /// Planned trajectory re-based at stage entry.
    pub traj: Trajectory,
    /// Roll ramp; `None` when the vehicle is already aligned.
    pub ramp: Option<AttitudeRamp>,
    /// Thrust correction; `None` for plain attitude tracking.
    pub sched: Option<ThrustSchedule>,
    pub phi_s: f64,
    /// Absolute time at which the local time of `traj`, `ramp` and `sched`
    /// is zero.
    pub t0: f64,
}

impl StageTwo {
    pub fn phi_ref(&self, t: f64) -> (f64, f64) {
        match &self.ramp {
            Some(r) if t < r.horizon().unwrap_or(0.0) => (r.phi(t), r.omega_bar),
            _ => (self.phi_s, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub f: f64,
    pub m: f64,
    pub phi_ref: f64,
}

/// Stage-one command: planned acceleration at local time `t` plus the held
/// feedback correction, inverted through the flatness map.
pub fn track_command(x: &PlantState, traj: &Trajectory, t: f64, feedback: (f64, f64), p: &VehicleParams) -> Command {
    let pt = traj.eval(t);
    let a_y = pt.a.y + feedback.0;
    let a_z = pt.a.z + feedback.1;
    let (f, phi_ref) = flatness(a_y, a_z, p.m_mass, p.g);
    let rate = flatness_rate(pt.a.y, pt.a.z, pt.j.y, pt.j.z, p.g);
    Command {
        f,
        m: attitude_moment(x, phi_ref, rate, p),
        phi_ref,
    }
}

/// Position/velocity PD correction against the reference at local time `t`.
pub fn feedback(x: &PlantState, traj: &Trajectory, t: f64, p: &VehicleParams) -> (f64, f64) {
    let s = traj.state(t);
    (
        p.pos_kp * (s.p.y - x.p_y) + p.pos_kd * (s.v.y - x.v_y),
        p.pos_kp * (s.p.z - x.p_z) + p.pos_kd * (s.v.z - x.v_z),
    )
}

/// Stage-two command at time `t` since stage entry: roll follows the ramp,
/// thrust is the planned thrust plus the optional correction.
pub fn attitude_command(x: &PlantState, stage: &StageTwo, t: f64, p: &VehicleParams) -> Command {
    let (phi_ref, rate) = stage.phi_ref(t);
    let f = match &stage.sched {
        Some(s) => thrust_command(s, &stage.traj, t, p.m_mass, p.g, &p.f_limits),
        None => planned_thrust(&stage.traj, t, p.m_mass, p.g),
    };
    Command {
        f,
        m: attitude_moment(x, phi_ref, rate, p),
        phi_ref,
    }
}

/// Chooses the stage by time to go: tracking while `tf_remaining >= t_eps`
/// or no attitude stage is prepared, attitude alignment otherwise.
#[allow(clippy::too_many_arguments)]
pub fn two_stage_control(
    x: &PlantState,
    traj: &Trajectory,
    t_local: f64,
    tf_remaining: f64,
    stage: Option<&StageTwo>,
    t_stage: f64,
    fb: (f64, f64),
    p: &VehicleParams,
) -> Command {
    match stage {
        Some(s) if tf_remaining < p.t_eps => attitude_command(x, s, t_stage, p),
        _ => track_command(x, traj, t_local, fb, p),
    }
}
