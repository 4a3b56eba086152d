//! Terminal thrust regulation. While the attitude converges on the surface
//! inclination, position and velocity run open loop; the free part of the
//! collective thrust is shaped as a bang-bang signal whose switching times
//! minimize the weighted terminal error.

use std::io::Write;

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{terminal_from_surface, PerchParams, Range};
use crate::target::SurfaceTrack;
use crate::trajgen::Trajectory;

/// Quadrature step for the input integrals, s.
pub const DT_Q: f64 = 1e-3;
/// Number of switching times.
pub const SWITCHES: usize = 4;

/// `[p_y, v_y, p_z, v_z]` in transformed coordinates.
pub type RegState = Vector4<f64>;

/// Roll assumed to move linearly from `phi0` to `phi_s` at `omega_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttitudeRamp {
    pub phi0: f64,
    pub omega_bar: f64,
    pub phi_s: f64,
}

impl AttitudeRamp {
    pub fn phi(&self, t: f64) -> f64 {
        self.phi0 + self.omega_bar * t
    }

    /// Time until the roll reaches the surface inclination.
    pub fn horizon(&self) -> Result<f64> {
        let t = (self.phi_s - self.phi0) / self.omega_bar;
        if t > 0.0 && t.is_finite() {
            Ok(t)
        } else {
            Err(Error::InvalidArgument(format!(
                "attitude ramp never reaches the surface (phi0 {}, rate {}, phi_s {})",
                self.phi0, self.omega_bar, self.phi_s
            )))
        }
    }
}

/// Bang-bang correction thrust: `f_ol` except on `[t1, t2)` and `[t3, t4)`
/// where it is `f_ou`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrustSchedule {
    pub switch_times: [f64; SWITCHES],
    pub f_ol: f64,
    pub f_ou: f64,
}

impl ThrustSchedule {
    /// Builds a schedule from switch times in any order.
    pub fn new(mut times: [f64; SWITCHES], f_ol: f64, f_ou: f64) -> Self {
        times.sort_by(f64::total_cmp);
        Self {
            switch_times: times,
            f_ol,
            f_ou,
        }
    }

    pub fn constant_low(t_f: f64, f_ol: f64, f_ou: f64) -> Self {
        Self::new([t_f; SWITCHES], f_ol, f_ou)
    }

    pub fn constant_high(t_f: f64, f_ol: f64, f_ou: f64) -> Self {
        Self::new([0.0, t_f, t_f, t_f], f_ol, f_ou)
    }

    pub fn f_o(&self, t: f64) -> f64 {
        let passed = self.switch_times.iter().filter(|s| **s <= t).count();
        if passed % 2 == 1 {
            self.f_ou
        } else {
            self.f_ol
        }
    }

    /// Total time spent at `f_ou` within `[0, t_f]`.
    pub fn up_time(&self, t_f: f64) -> f64 {
        let s = self.switch_times.map(|x| x.clamp(0.0, t_f));
        (s[1] - s[0]) + (s[3] - s[2])
    }

    /// Maximal intervals of constant correction covering `[0, t_f]`.
    fn pieces(&self, t_f: f64) -> [(f64, f64, f64); SWITCHES + 1] {
        let s = self.switch_times.map(|x| x.clamp(0.0, t_f));
        [
            (0.0, s[0], self.f_ol),
            (s[0], s[1], self.f_ou),
            (s[1], s[2], self.f_ol),
            (s[2], s[3], self.f_ou),
            (s[3], t_f, self.f_ol),
        ]
    }
}

/// Correction thrust bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegBounds {
    pub f_ol: f64,
    pub f_ou: f64,
}

impl RegBounds {
    /// Symmetric bounds of `frac * m * g`.
    pub fn symmetric(frac: f64, m_mass: f64, g: f64) -> Self {
        Self {
            f_ol: -frac * m_mass * g,
            f_ou: frac * m_mass * g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegWeights {
    pub gamma: [f64; 4],
}

impl Default for RegWeights {
    fn default() -> Self {
        Self {
            gamma: [0.0, 1.0, 0.0, 4.0],
        }
    }
}

impl RegWeights {
    pub fn is_valid(&self) -> bool {
        self.gamma.iter().all(|g| *g >= 0.0 && g.is_finite()) && self.gamma.iter().any(|g| *g > 0.0)
    }
}

/// `m * |a + g e3|` restricted to the sagittal plane, with the planned
/// acceleration held at its final value after the trajectory ends.
pub fn planned_thrust(traj: &Trajectory, t: f64, m_mass: f64, g: f64) -> f64 {
    let a = traj.eval(t.min(traj.duration())).a;
    m_mass * (a.y * a.y + (a.z + g).powi(2)).sqrt()
}

/// Composite Simpson rule with at least `n` (rounded up to even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let n = n.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

fn panels(len: f64) -> usize {
    (len / DT_Q).ceil() as usize
}

/// `(int_0^T s(t) dt, int_0^T (T - t) s(t) dt)` for a smooth integrand,
/// optionally splitting at an interior kink.
fn moments<F: Fn(f64) -> f64>(f: &F, t_f: f64, kink: Option<f64>) -> (f64, f64) {
    let mut cuts = vec![0.0];
    if let Some(k) = kink.filter(|k| *k > 0.0 && *k < t_f) {
        cuts.push(k);
    }
    cuts.push(t_f);
    let mut m0 = 0.0;
    let mut m1 = 0.0;
    for w in cuts.windows(2) {
        let n = panels(w[1] - w[0]);
        m0 += simpson(f, w[0], w[1], n);
        m1 += simpson(|t| (t_f - t) * f(t), w[0], w[1], n);
    }
    (m0, m1)
}

/// Terminal regulation problem in transformed coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegProblem {
    pub x0: RegState,
    pub x_t: RegState,
    pub ramp: AttitudeRamp,
    pub t_f: f64,
    pub m_mass: f64,
}

impl RegProblem {
    /// Input map `[0, -sin(phi)/m, 0, cos(phi)/m]`.
    pub fn input_map(&self, t: f64) -> RegState {
        let phi = self.ramp.phi(t);
        Vector4::new(0.0, -phi.sin() / self.m_mass, 0.0, phi.cos() / self.m_mass)
    }

    pub fn propagate(&self, sched: &ThrustSchedule) -> RegState {
        propagate(&self.x0, sched, &self.ramp, self.t_f, self.m_mass)
    }

    pub fn cost(&self, sched: &ThrustSchedule, w: &RegWeights) -> f64 {
        weighted_error(&(self.propagate(sched) - self.x_t), w)
    }
}

fn weighted_error(e: &RegState, w: &RegWeights) -> f64 {
    (0..4).map(|i| w.gamma[i] * e[i] * e[i]).sum()
}

/// Correction integrals of the planned thrust at `t_f`:
/// `[int int f_p sin/m, int f_p sin/m, int int f_p cos/m, int f_p cos/m]`.
pub fn planned_integrals(traj: &Trajectory, ramp: &AttitudeRamp, t_f: f64, m_mass: f64, g: f64) -> RegState {
    let sin_part = |t: f64| planned_thrust(traj, t, m_mass, g) / m_mass * ramp.phi(t).sin();
    let cos_part = |t: f64| planned_thrust(traj, t, m_mass, g) / m_mass * ramp.phi(t).cos();
    let kink = Some(traj.duration());
    let (s0, s1) = moments(&sin_part, t_f, kink);
    let (c0, c1) = moments(&cos_part, t_f, kink);
    Vector4::new(s1, s0, c1, c0)
}

/// Builds the regulation problem at stage-2 entry. `xq` is the physical
/// sagittal state `[p_y, v_y, p_z, v_z]`; `traj` and `track` are expressed in
/// time since now.
pub fn make_reg_problem(
    xq: &RegState,
    ramp: &AttitudeRamp,
    traj: &Trajectory,
    track: &SurfaceTrack,
    params: &PerchParams,
    m_mass: f64,
) -> Result<RegProblem> {
    let t_f = ramp.horizon()?;
    let g = params.g;
    let desired = terminal_from_surface(&track.predict(t_f), params);
    let i = planned_integrals(traj, ramp, t_f, m_mass, g);
    let x_t = Vector4::new(
        desired.p.y + i[0],
        desired.v.y + i[1],
        desired.p.z - i[2] + 0.5 * g * t_f * t_f,
        desired.v.z - i[3] + g * t_f,
    );
    Ok(RegProblem {
        x0: *xq,
        x_t,
        ramp: *ramp,
        t_f,
        m_mass,
    })
}

/// Transformed state at `t_f` under the schedule: free drift plus the input
/// integral, each constant-thrust piece integrated by Simpson's rule.
pub fn propagate(x0: &RegState, sched: &ThrustSchedule, ramp: &AttitudeRamp, t_f: f64, m_mass: f64) -> RegState {
    let mut x = Vector4::new(x0[0] + x0[1] * t_f, x0[1], x0[2] + x0[3] * t_f, x0[3]);
    for (a, b, f) in sched.pieces(t_f) {
        if b <= a || f == 0.0 {
            continue;
        }
        let n = panels(b - a);
        let sin0 = simpson(|t| ramp.phi(t).sin(), a, b, n);
        let sin1 = simpson(|t| (t_f - t) * ramp.phi(t).sin(), a, b, n);
        let cos0 = simpson(|t| ramp.phi(t).cos(), a, b, n);
        let cos1 = simpson(|t| (t_f - t) * ramp.phi(t).cos(), a, b, n);
        let k = f / m_mass;
        x += Vector4::new(-k * sin1, -k * sin0, k * cos1, k * cos0);
    }
    x
}

/// Search budget and starts of the switching-time solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Objective evaluations allowed per solve.
    pub budget: usize,
    /// Levels per switch time of the coarse ordered grid used to seed starts.
    pub seed_levels: usize,
    /// Total number of local searches.
    pub starts: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            budget: 2000,
            seed_levels: 7,
            starts: 8,
        }
    }
}

/// Outcome of one switching-time solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchSolution {
    pub schedule: ThrustSchedule,
    pub cost: f64,
    pub cost_low: f64,
    pub cost_high: f64,
    pub evaluations: usize,
}

/// All non-decreasing 4-tuples on `levels` evenly spaced times in `[0, t_f]`.
pub fn ordered_grid(levels: usize, t_f: f64) -> Vec<[f64; SWITCHES]> {
    let at = |k: usize| t_f * k as f64 / (levels - 1) as f64;
    let mut out = Vec::new();
    for a in 0..levels {
        for b in a..levels {
            for c in b..levels {
                for d in c..levels {
                    out.push([at(a), at(b), at(c), at(d)]);
                }
            }
        }
    }
    out
}

/// Minimizes the weighted terminal error over ordered switching times by
/// multi-start pattern search. The constant low and high schedules are
/// always among the starts, so the result never does worse than either.
pub fn solve_switching(problem: &RegProblem, w: &RegWeights, bounds: &RegBounds, cfg: &SolverConfig) -> SwitchSolution {
    let t_f = problem.t_f;
    let evals = std::cell::Cell::new(0usize);
    let mut cost = |times: &[f64; SWITCHES]| {
        evals.set(evals.get() + 1);
        problem.cost(&ThrustSchedule::new(*times, bounds.f_ol, bounds.f_ou), w)
    };
    let low = [t_f; SWITCHES];
    let high = [0.0, t_f, t_f, t_f];
    let cost_low = cost(&low);
    let cost_high = cost(&high);

    let mut seeded: Vec<(f64, [f64; SWITCHES])> = ordered_grid(cfg.seed_levels.max(2), t_f)
        .into_iter()
        .map(|s| (cost(&s), s))
        .collect();
    seeded.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut starts = vec![(cost_low, low), (cost_high, high)];
    let mid = [0.25 * t_f, 0.75 * t_f, t_f, t_f];
    starts.push((cost(&mid), mid));
    for s in seeded {
        if starts.len() >= cfg.starts.max(3) {
            break;
        }
        if !starts.iter().any(|(_, t)| *t == s.1) {
            starts.push(s);
        }
    }

    let remaining = cfg.budget.saturating_sub(evals.get());
    let per_start = remaining / starts.len();
    let mut best = starts[0];
    for &(c0, s0) in &starts {
        let found = pattern_search(&mut cost, s0, c0, t_f, per_start);
        if found.0 < best.0 {
            best = found;
        }
    }
    SwitchSolution {
        schedule: ThrustSchedule::new(best.1, bounds.f_ol, bounds.f_ou),
        cost: best.0,
        cost_low,
        cost_high,
        evaluations: evals.get(),
    }
}

fn pattern_search<F>(cost: &mut F, mut x: [f64; SWITCHES], mut fx: f64, t_f: f64, budget: usize) -> (f64, [f64; SWITCHES])
where
    F: FnMut(&[f64; SWITCHES]) -> f64,
{
    let mut step = 0.25 * t_f;
    let mut used = 0;
    while step > 1e-9 * t_f && used < budget {
        let mut improved = false;
        for i in 0..SWITCHES {
            for dir in [1.0, -1.0] {
                if used >= budget {
                    break;
                }
                let mut y = x;
                y[i] = (y[i] + dir * step).clamp(0.0, t_f);
                y.sort_by(f64::total_cmp);
                if y == x {
                    continue;
                }
                used += 1;
                let fy = cost(&y);
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (fx, x)
}

/// Total thrust command `f_p + f_o` at time `t` since stage-2 entry,
/// clamped to the actuator range.
pub fn thrust_command(sched: &ThrustSchedule, traj: &Trajectory, t: f64, m_mass: f64, g: f64, limits: &Range) -> f64 {
    (planned_thrust(traj, t, m_mass, g) + sched.f_o(t)).clamp(limits.lo, limits.hi)
}

/// One line of the regulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub instance: String,
    pub cost_low: f64,
    pub cost_high: f64,
    pub cost: f64,
    pub switch_times: [f64; SWITCHES],
}

impl SolveRecord {
    pub fn new(problem: &RegProblem, sol: &SwitchSolution) -> Self {
        Self {
            instance: format!("{:016x}", instance_hash(problem)),
            cost_low: sol.cost_low,
            cost_high: sol.cost_high,
            cost: sol.cost,
            switch_times: sol.schedule.switch_times,
        }
    }
}

/// FNV-1a over the bit patterns of the problem data.
pub fn instance_hash(p: &RegProblem) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let words = p
        .x0
        .iter()
        .chain(p.x_t.iter())
        .copied()
        .chain([p.ramp.phi0, p.ramp.omega_bar, p.ramp.phi_s, p.t_f, p.m_mass]);
    for w in words {
        for b in w.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

pub fn write_solve_records<W: Write>(out: &mut W, records: &[SolveRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{State9, SurfaceState};
    use crate::target::NoiseSpec;
    use crate::trajgen::solve_bvp;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const M: f64 = 1.0;
    const G: f64 = 9.81;

    fn flat_ramp() -> AttitudeRamp {
        AttitudeRamp { phi0: 0.0, omega_bar: 0.0, phi_s: 0.0 }
    }

    fn hover_traj() -> Trajectory {
        let x = State9::hover(Vector3::new(0.0, 0.0, 2.0));
        Trajectory::from_segment(solve_bvp(&x, &x, 1.0).unwrap())
    }

    #[test]
    fn planned_thrust_examples() {
        assert!((planned_thrust(&hover_traj(), 0.3, 1.5, G) - 1.5 * G).abs() < 1e-12);
        let up = State9::new(Vector3::zeros(), Vector3::zeros(), Vector3::new(0.0, 0.0, G));
        let tr = Trajectory::from_segment(solve_bvp(&up, &up.flow(1.0), 1.0).unwrap());
        assert!((planned_thrust(&tr, 0.5, 2.0, G) - 4.0 * G).abs() < 1e-9);
        let x0 = State9::hover(Vector3::zeros());
        let x1 = State9::new(Vector3::new(0.0, 1.0, 0.0), Vector3::zeros(), Vector3::new(0.0, -3.0, 2.0));
        let tr = Trajectory::from_segment(solve_bvp(&x0, &x1, 0.8).unwrap());
        assert_eq!(planned_thrust(&tr, 5.0, 1.0, G), planned_thrust(&tr, 0.8, 1.0, G));
    }

    #[test]
    fn schedule_pattern() {
        let s = ThrustSchedule::new([0.3, 0.1, 0.4, 0.2], -1.0, 2.0);
        assert_eq!(s.switch_times, [0.1, 0.2, 0.3, 0.4]);
        assert_eq!(s.f_o(0.05), -1.0);
        assert_eq!(s.f_o(0.1), 2.0);
        assert_eq!(s.f_o(0.25), -1.0);
        assert_eq!(s.f_o(0.35), 2.0);
        assert_eq!(s.f_o(0.45), -1.0);
        let collapsed = ThrustSchedule::new([0.2, 0.2, 0.3, 0.4], -1.0, 2.0);
        assert_eq!(collapsed.f_o(0.25), -1.0);
        assert_eq!(collapsed.f_o(0.3), 2.0);
    }

    #[test]
    fn thrust_command_examples() {
        let tr = hover_traj();
        let s = ThrustSchedule::new([0.1, 0.2, 0.3, 0.4], -1.0, 2.0);
        let lim = Range::new(0.0, 30.0);
        assert_eq!(thrust_command(&s, &tr, 0.05, M, G, &lim), G - 1.0);
        assert_eq!(thrust_command(&s, &tr, 0.15, M, G, &lim), G + 2.0);
        assert_eq!(thrust_command(&s, &tr, 0.15, M, G, &Range::new(0.0, 10.0)), 10.0);
        let degenerate = ThrustSchedule::new([0.1, 0.1, 0.3, 0.4], -1.0, 2.0);
        assert_eq!(thrust_command(&degenerate, &tr, 0.2, M, G, &lim), G - 1.0);
    }

    #[test]
    fn propagate_closed_forms() {
        let x0 = Vector4::new(1.0, 2.0, 3.0, -1.0);
        let ramp = AttitudeRamp { phi0: 0.2, omega_bar: 3.0, phi_s: 1.2 };
        let zero = ThrustSchedule::constant_low(0.3, 0.0, 0.0);
        let drift = propagate(&x0, &zero, &ramp, 0.3, M);
        assert!((drift - Vector4::new(1.6, 2.0, 2.7, -1.0)).amax() < 1e-15);

        let c = 1.7;
        let m = 1.3;
        let t = 0.4;
        let up = ThrustSchedule::new([0.0, t, t, t], -c, c);
        let got = propagate(&x0, &up, &flat_ramp(), t, m);
        let want = Vector4::new(x0[0] + x0[1] * t, x0[1], x0[2] + x0[3] * t + c * t * t / (2.0 * m), x0[3] + c * t / m);
        assert!((got - want).amax() < 1e-9);
        let const_high = ThrustSchedule { f_ol: c, f_ou: c, ..ThrustSchedule::constant_low(t, c, c) };
        assert!((propagate(&x0, &const_high, &flat_ramp(), t, m) - want).amax() < 1e-9);
    }

    #[test]
    fn permutation_invariance() {
        let x0 = Vector4::new(0.0, 3.0, 1.0, -0.5);
        let ramp = AttitudeRamp { phi0: 0.3, omega_bar: 4.0, phi_s: 1.2 };
        let a = ThrustSchedule::new([0.05, 0.1, 0.15, 0.2], -3.0, 3.0);
        let b = ThrustSchedule::new([0.15, 0.05, 0.2, 0.1], -3.0, 3.0);
        assert_eq!(propagate(&x0, &a, &ramp, 0.225, M), propagate(&x0, &b, &ramp, 0.225, M));
    }

    /// Physical point-mass integration with a tiny RK4-like midpoint step,
    /// used to check that the transformed coordinates track the real error.
    fn physical_terminal(xq: &RegState, traj: &Trajectory, ramp: &AttitudeRamp, sched: &ThrustSchedule, t_f: f64, m: f64) -> RegState {
        let n = 200_000;
        let h = t_f / n as f64;
        let acc = |t: f64| {
            let f = planned_thrust(traj, t, m, G) + sched.f_o(t);
            let phi = ramp.phi(t);
            (-f / m * phi.sin(), f / m * phi.cos() - G)
        };
        let mut s = *xq;
        for i in 0..n {
            let t = i as f64 * h;
            let (ay, az) = acc(t + 0.5 * h);
            s[0] += s[1] * h + 0.5 * ay * h * h;
            s[1] += ay * h;
            s[2] += s[3] * h + 0.5 * az * h * h;
            s[3] += az * h;
        }
        s
    }

    fn stage_two_setup() -> (RegState, AttitudeRamp, Trajectory, SurfaceTrack, PerchParams) {
        let params = PerchParams::default();
        let s = SurfaceState::inclined(Vector3::new(0.0, 1.0, 1.0), Vector3::new(0.0, 3.0, 0.0), 70f64.to_radians());
        let track = SurfaceTrack::new(s, NoiseSpec::zero());
        let xt = terminal_from_surface(&track.predict(0.3), &params);
        let x0 = State9::new(xt.p - Vector3::new(0.0, 1.2, -0.1), Vector3::new(0.0, 4.0, 0.4), Vector3::new(0.0, -6.0, -2.0));
        let traj = Trajectory::from_segment(solve_bvp(&x0, &xt, 0.3).unwrap());
        let xq = Vector4::new(x0.p.y, x0.v.y, x0.p.z, x0.v.z);
        let ramp = AttitudeRamp { phi0: 0.6, omega_bar: (1.2217 - 0.6) / 0.32, phi_s: 70f64.to_radians() };
        (xq, ramp, traj, track, params)
    }

    #[test]
    fn transformed_error_equals_physical_error() {
        let (xq, ramp, traj, track, params) = stage_two_setup();
        let p = make_reg_problem(&xq, &ramp, &traj, &track, &params, 1.2).unwrap();
        assert_eq!(p.propagate(&ThrustSchedule::constant_low(p.t_f, 0.0, 0.0)) - p.x0, {
            let t = p.t_f;
            Vector4::new(p.x0[1] * t, 0.0, p.x0[3] * t, 0.0)
        });
        let desired = terminal_from_surface(&track.predict(p.t_f), &params);
        let dvec = Vector4::new(desired.p.y, desired.v.y, desired.p.z, desired.v.z);
        let sched = ThrustSchedule::new([0.02, 0.1, 0.15, 0.25], -4.0, 4.0);
        let phys = physical_terminal(&xq, &traj, &ramp, &sched, p.t_f, 1.2);
        let err_t = p.propagate(&sched) - p.x_t;
        // The oracle's steps straddle the switch instants, so it is only
        // first-order accurate there.
        assert!((err_t - (phys - dvec)).amax() < 1e-4, "{err_t} vs {}", phys - dvec);
    }

    #[test]
    fn zero_planned_thrust_leaves_gravity_terms() {
        let (xq, ramp, _, track, params) = stage_two_setup();
        let x = State9::new(Vector3::zeros(), Vector3::zeros(), Vector3::new(0.0, 0.0, -G));
        let free_fall = Trajectory::from_segment(solve_bvp(&x, &x.flow(1.0), 1.0).unwrap());
        let p = make_reg_problem(&xq, &ramp, &free_fall, &track, &params, 1.0).unwrap();
        let d = terminal_from_surface(&track.predict(p.t_f), &params);
        let t = p.t_f;
        let want = Vector4::new(d.p.y, d.v.y, d.p.z + 0.5 * G * t * t, d.v.z + G * t);
        assert!((p.x_t - want).amax() < 1e-12);
        assert_eq!(p.x0, xq);
    }

    #[test]
    fn integrals_match_refined_quadrature() {
        let (_, ramp, traj, _, _) = stage_two_setup();
        let t_f = ramp.horizon().unwrap();
        let got = planned_integrals(&traj, &ramp, t_f, 1.2, G);
        // Trapezoid at two resolutions, Richardson-extrapolated.
        let trap = |n: usize, f: &dyn Fn(f64) -> f64| {
            let h = t_f / n as f64;
            (0..=n).map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * f(i as f64 * h)
            }).sum::<f64>() * h
        };
        let s = |t: f64| planned_thrust(&traj, t, 1.2, G) / 1.2 * ramp.phi(t).sin();
        let c = |t: f64| planned_thrust(&traj, t, 1.2, G) / 1.2 * ramp.phi(t).cos();
        let rich = |f: &dyn Fn(f64) -> f64| (4.0 * trap(40_000, f) - trap(20_000, f)) / 3.0;
        let want = Vector4::new(
            rich(&|t| (t_f - t) * s(t)),
            rich(&s),
            rich(&|t| (t_f - t) * c(t)),
            rich(&c),
        );
        assert!((got - want).amax() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn quadrature_converges() {
        let (xq, ramp, traj, track, params) = stage_two_setup();
        let p = make_reg_problem(&xq, &ramp, &traj, &track, &params, 1.2).unwrap();
        let sched = ThrustSchedule::new([0.03, 0.11, 0.17, 0.29], -4.0, 4.0);
        let coarse = p.propagate(&sched);
        // Halving the step is the same as refining each piece by two.
        let mut fine = Vector4::new(p.x0[0] + p.x0[1] * p.t_f, p.x0[1], p.x0[2] + p.x0[3] * p.t_f, p.x0[3]);
        for (a, b, f) in sched.pieces(p.t_f) {
            let n = 2 * panels(b - a);
            let k = f / p.m_mass;
            fine += Vector4::new(
                -k * simpson(|t| (p.t_f - t) * ramp.phi(t).sin(), a, b, n),
                -k * simpson(|t| ramp.phi(t).sin(), a, b, n),
                k * simpson(|t| (p.t_f - t) * ramp.phi(t).cos(), a, b, n),
                k * simpson(|t| ramp.phi(t).cos(), a, b, n),
            );
        }
        assert!((coarse - fine).amax() < 1e-6);
    }

    #[test]
    fn invalid_ramp_rejected() {
        let (xq, _, traj, track, params) = stage_two_setup();
        let bad = AttitudeRamp { phi0: 1.3, omega_bar: 2.0, phi_s: 1.2 };
        assert!(matches!(make_reg_problem(&xq, &bad, &traj, &track, &params, 1.0), Err(Error::InvalidArgument(_))));
        assert!(flat_ramp().horizon().is_err());
    }

    #[test]
    fn reachable_with_low_needs_no_switch() {
        let ramp = AttitudeRamp { phi0: 0.3, omega_bar: 3.0, phi_s: 1.2 };
        let t_f = ramp.horizon().unwrap();
        let x0 = Vector4::new(0.0, 3.0, 1.0, 0.0);
        let b = RegBounds::symmetric(0.35, M, G);
        let target = propagate(&x0, &ThrustSchedule::constant_low(t_f, b.f_ol, b.f_ou), &ramp, t_f, M);
        let p = RegProblem { x0, x_t: target, ramp, t_f, m_mass: M };
        let sol = solve_switching(&p, &RegWeights::default(), &b, &SolverConfig::default());
        assert_eq!(sol.cost, 0.0);
        assert_eq!(sol.schedule.up_time(t_f), 0.0);
    }

    #[test]
    fn one_axis_up_time_recovered() {
        let t_f = 0.4;
        let ramp = AttitudeRamp { phi0: 0.0, omega_bar: 0.0, phi_s: 0.0 };
        let b = RegBounds { f_ol: 0.0, f_ou: 3.0 };
        let x0 = Vector4::new(0.0, 0.0, 0.0, 0.0);
        let rho = 0.37;
        let dv = b.f_ou * rho * t_f / M;
        let p = RegProblem { x0, x_t: Vector4::new(0.0, 0.0, 0.0, dv), ramp, t_f, m_mass: M };
        let w = RegWeights { gamma: [0.0, 0.0, 0.0, 1.0] };
        let sol = solve_switching(&p, &w, &b, &SolverConfig::default());
        let up = sol.schedule.up_time(t_f);
        assert!((up - rho * t_f).abs() < 0.01 * rho * t_f, "up {up}");
        assert!(sol.cost <= sol.cost_low.min(sol.cost_high));
        assert!(sol.evaluations <= 2000);
    }

    #[test]
    fn solver_beats_baselines_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = RegWeights::default();
        for _ in 0..20 {
            let ramp = AttitudeRamp { phi0: rng.random_range(0.0..0.8), omega_bar: rng.random_range(2.0..6.0), phi_s: 1.2217 };
            let t_f = ramp.horizon().unwrap();
            let b = RegBounds::symmetric(0.35, M, G);
            let x0 = Vector4::new(0.0, rng.random_range(2.0..4.0), 1.0, rng.random_range(-1.0..1.0));
            let mid = propagate(&x0, &ThrustSchedule::new([0.0, 0.5 * t_f, t_f, t_f], 0.0, 0.0), &ramp, t_f, M);
            let x_t = mid + Vector4::new(0.0, rng.random_range(-0.5..0.5), 0.0, rng.random_range(-0.5..0.5));
            let p = RegProblem { x0, x_t, ramp, t_f, m_mass: M };
            let sol = solve_switching(&p, &w, &b, &SolverConfig::default());
            assert!(sol.cost <= sol.cost_low && sol.cost <= sol.cost_high);
            let zero = p.cost(&ThrustSchedule::constant_low(t_f, 0.0, 0.0), &w);
            assert!(sol.cost <= zero + 1e-12);
            assert_eq!(sol.cost, p.cost(&sol.schedule, &w));
        }
    }

    #[test]
    fn solve_records_serialize() {
        let (xq, ramp, traj, track, params) = stage_two_setup();
        let p = make_reg_problem(&xq, &ramp, &traj, &track, &params, 1.2).unwrap();
        let sol = solve_switching(&p, &RegWeights::default(), &RegBounds::symmetric(0.35, 1.2, G), &SolverConfig::default());
        let rec = SolveRecord::new(&p, &sol);
        assert_eq!(rec.instance.len(), 16);
        let mut buf = Vec::new();
        write_solve_records(&mut buf, &[rec.clone()]).unwrap();
        let back: SolveRecord = serde_json::from_str(String::from_utf8(buf).unwrap().trim()).unwrap();
        assert_eq!(back, rec);
        assert_eq!(instance_hash(&p), instance_hash(&p.clone()));
    }
}
