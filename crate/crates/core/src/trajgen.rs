//! Quintic two-point trajectories, piecewise planning through full-state
//! waypoints, feasibility checking and minimal feasible time search.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{e3, terminal_from_surface, PerchParams, Range, State9};
use crate::target::SurfaceTrack;

/// Sampling step of [`check_feasible`], s.
pub const DT_CHECK: f64 = 0.01;
/// Slack allowed on every bound.
pub const BOUND_TOL: f64 = 1e-6;

/// Position through jerk at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajPoint {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub a: Vector3<f64>,
    pub j: Vector3<f64>,
}

impl TrajPoint {
    pub fn state(&self) -> State9 {
        State9::new(self.p, self.v, self.a)
    }
}

/// Degree-5 polynomial per axis, coefficients in ascending powers of local
/// time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuinticSegment {
    pub coeffs: [[f64; 6]; 3],
    pub duration: f64,
}

impl QuinticSegment {
    pub fn eval(&self, t: f64) -> TrajPoint {
        let mut p = Vector3::zeros();
        let mut v = Vector3::zeros();
        let mut a = Vector3::zeros();
        let mut j = Vector3::zeros();
        for (k, c) in self.coeffs.iter().enumerate() {
            p[k] = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
            v[k] = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
            a[k] = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
            j[k] = 6.0 * c[3] + t * (24.0 * c[4] + t * 60.0 * c[5]);
        }
        TrajPoint { p, v, a, j }
    }

    pub fn state(&self, t: f64) -> State9 {
        self.eval(t).state()
    }

    /// The same curve re-expanded around local time `tau`, covering
    /// `[tau, duration]`.
    fn shifted(&self, tau: f64) -> QuinticSegment {
        // Taylor shift: q(u) = p(u + tau), q_k = sum_{i>=k} C(i,k) c_i tau^(i-k).
        const BINOM: [[f64; 6]; 6] = [
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 2.0, 1.0, 0.0, 0.0, 0.0],
            [1.0, 3.0, 3.0, 1.0, 0.0, 0.0],
            [1.0, 4.0, 6.0, 4.0, 1.0, 0.0],
            [1.0, 5.0, 10.0, 10.0, 5.0, 1.0],
        ];
        let mut coeffs = [[0.0; 6]; 3];
        for (axis, c) in self.coeffs.iter().enumerate() {
            for k in 0..6 {
                let mut acc = 0.0;
                for i in (k..6).rev() {
                    acc += BINOM[i][k] * c[i] * tau.powi((i - k) as i32);
                }
                coeffs[axis][k] = acc;
            }
        }
        QuinticSegment {
            coeffs,
            duration: self.duration - tau,
        }
    }

    /// Adds the quadratic polynomial whose `[p, v, a]` at local time zero is
    /// `delta`. Jerk is untouched.
    fn add_quadratic(&mut self, delta: &State9) {
        for axis in 0..3 {
            self.coeffs[axis][0] += delta.p[axis];
            self.coeffs[axis][1] += delta.v[axis];
            self.coeffs[axis][2] += 0.5 * delta.a[axis];
        }
    }
}

/// Unique quintic matching position, velocity and acceleration at both ends.
pub fn solve_bvp(x0: &State9, xt: &State9, t: f64) -> Result<QuinticSegment> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "segment duration must be positive, got {t}"
        )));
    }
    let t2 = t * t;
    let t3 = t2 * t;
    let mut coeffs = [[0.0; 6]; 3];
    for (axis, c) in coeffs.iter_mut().enumerate() {
        let (p0, v0, a0) = (x0.p[axis], x0.v[axis], x0.a[axis]);
        let dp = xt.p[axis] - (p0 + v0 * t + 0.5 * a0 * t2);
        let dv = xt.v[axis] - (v0 + a0 * t);
        let da = xt.a[axis] - a0;
        c[0] = p0;
        c[1] = v0;
        c[2] = 0.5 * a0;
        c[3] = (20.0 * dp - 8.0 * dv * t + da * t2) / (2.0 * t3);
        c[4] = (-30.0 * dp + 14.0 * dv * t - 2.0 * da * t2) / (2.0 * t3 * t);
        c[5] = (12.0 * dp - 6.0 * dv * t + da * t2) / (2.0 * t3 * t2);
    }
    Ok(QuinticSegment {
        coeffs,
        duration: t,
    })
}

/// Piecewise quintic trajectory. Evaluation time is local, measured from the
/// start of the first segment; `t0` records when that start happens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub segments: Vec<QuinticSegment>,
    pub t0: f64,
}

impl Trajectory {
    pub fn from_segment(seg: QuinticSegment) -> Self {
        Self {
            segments: vec![seg],
            t0: 0.0,
        }
    }

    pub fn with_epoch(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Cumulative start times of each segment plus the final time.
    pub fn knot_times(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut acc = 0.0;
        out.push(acc);
        for s in &self.segments {
            acc += s.duration;
            out.push(acc);
        }
        out
    }

    fn locate(&self, t: f64) -> (&QuinticSegment, f64) {
        let mut start = 0.0;
        let last = self.segments.len() - 1;
        for (i, s) in self.segments.iter().enumerate() {
            if t < start + s.duration || i == last {
                return (s, (t - start).clamp(0.0, s.duration));
            }
            start += s.duration;
        }
        unreachable!("trajectory without segments")
    }

    /// Evaluates at local time `t`, clamped to `[0, duration]`.
    pub fn eval(&self, t: f64) -> TrajPoint {
        let (seg, u) = self.locate(t.max(0.0));
        seg.eval(u)
    }

    pub fn state(&self, t: f64) -> State9 {
        self.eval(t).state()
    }

    pub fn start_state(&self) -> State9 {
        self.state(0.0)
    }

    pub fn end_state(&self) -> State9 {
        let last = self.segments.last().expect("trajectory without segments");
        last.state(last.duration)
    }

    /// The part of the trajectory after local time `from`, re-based so that
    /// it starts at local time zero.
    pub fn tail(&self, from: f64) -> Trajectory {
        let mut segments = Vec::new();
        let mut start = 0.0;
        for s in &self.segments {
            let end = start + s.duration;
            if end > from + 1e-12 {
                if from > start {
                    segments.push(s.shifted(from - start));
                } else {
                    segments.push(*s);
                }
            }
            start = end;
        }
        if segments.is_empty() {
            // Nothing left: a zero-length hold at the end state keeps the type valid.
            let last = self.segments.last().expect("trajectory without segments");
            let mut held = last.shifted(last.duration);
            held.duration = 0.0;
            segments.push(held);
        }
        Trajectory {
            segments,
            t0: self.t0 + from,
        }
    }

    /// Adds `e^{-A (T - t)} delta_end` to every point, `T` being the duration.
    /// The result ends at `end_state() + delta_end` and has the same jerk.
    pub fn with_terminal_shift(&self, delta_end: &State9) -> Trajectory {
        let total = self.duration();
        let mut start = 0.0;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let mut s = *s;
                s.add_quadratic(&delta_end.flow(start - total));
                start += s.duration;
                s
            })
            .collect();
        Trajectory {
            segments,
            t0: self.t0,
        }
    }
}

/// Kinodynamic and geometric limits a trajectory must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSet {
    /// Speed bound, m/s.
    pub v_max: f64,
    /// Acceleration magnitude bound, m/s².
    pub a_max: f64,
    /// Collective thrust over mass, m/s².
    pub thrust_over_mass: Range,
    /// Bound on the body-rate surrogate `|j_perp| / |a + g e3|`, rad/s.
    pub body_rate_max: f64,
    /// Lowest allowed height, m.
    pub z_min: f64,
    /// Jerk magnitude bound, m/s³. Unbounded by default.
    pub jerk_max: f64,
    pub g: f64,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        Self {
            v_max: 10.0,
            a_max: 20.0,
            thrust_over_mass: Range::new(1.5, 25.0),
            body_rate_max: 8.0,
            z_min: 0.1,
            jerk_max: f64::INFINITY,
            g: 9.81,
        }
    }
}

impl ConstraintSet {
    /// No limits at all.
    pub fn unconstrained() -> Self {
        Self {
            v_max: f64::INFINITY,
            a_max: f64::INFINITY,
            thrust_over_mass: Range::new(f64::NEG_INFINITY, f64::INFINITY),
            body_rate_max: f64::INFINITY,
            z_min: f64::NEG_INFINITY,
            jerk_max: f64::INFINITY,
            g: 9.81,
        }
    }

    /// Drops the velocity and height limits, keeping those tied to the input.
    pub fn without_state_limits(self) -> Self {
        Self {
            v_max: f64::INFINITY,
            z_min: f64::NEG_INFINITY,
            ..self
        }
    }

    pub fn is_valid(&self) -> bool {
        self.v_max > 0.0
            && self.a_max > 0.0
            && self.body_rate_max > 0.0
            && self.jerk_max > 0.0
            && self.thrust_over_mass.lo < self.thrust_over_mass.hi
            && self.g > 0.0
            && !self.z_min.is_nan()
    }

    /// True when some quantity is within a few percent of its bound.
    pub fn is_near_bound(&self, pt: &TrajPoint) -> bool {
        let near_hi = |x: f64, hi: f64| hi.is_finite() && x > hi * (1.0 - NEAR_FRAC);
        let thrust = pt.a + e3() * self.g;
        let tm = thrust.norm();
        let lo = self.thrust_over_mass.lo;
        (self.z_min.is_finite() && pt.p.z < self.z_min + NEAR_FRAC.max(NEAR_FRAC * self.z_min.abs()))
            || near_hi(pt.v.norm(), self.v_max)
            || near_hi(pt.a.norm(), self.a_max)
            || near_hi(tm, self.thrust_over_mass.hi)
            || (lo.is_finite() && tm < lo * (1.0 + NEAR_FRAC))
            || near_hi(body_rate(&pt.j, &thrust), self.body_rate_max)
            || near_hi(pt.j.norm(), self.jerk_max)
    }

    /// First bound broken at this point, if any.
    pub fn violation_at(&self, pt: &TrajPoint) -> Option<(ViolationKind, f64)> {
        if pt.p.z < self.z_min - BOUND_TOL {
            return Some((ViolationKind::Ground, pt.p.z));
        }
        let speed = pt.v.norm();
        if speed > self.v_max + BOUND_TOL {
            return Some((ViolationKind::Velocity, speed));
        }
        let acc = pt.a.norm();
        if acc > self.a_max + BOUND_TOL {
            return Some((ViolationKind::Acceleration, acc));
        }
        let thrust = pt.a + e3() * self.g;
        let thrust_mag = thrust.norm();
        if thrust_mag < self.thrust_over_mass.lo - BOUND_TOL
            || thrust_mag > self.thrust_over_mass.hi + BOUND_TOL
        {
            return Some((ViolationKind::Thrust, thrust_mag));
        }
        if self.body_rate_max.is_finite() {
            let rate = body_rate(&pt.j, &thrust);
            if rate > self.body_rate_max + BOUND_TOL {
                return Some((ViolationKind::BodyRate, rate));
            }
        }
        if self.jerk_max.is_finite() {
            let jerk = pt.j.norm();
            if jerk > self.jerk_max + BOUND_TOL {
                return Some((ViolationKind::Jerk, jerk));
            }
        }
        None
    }
}

/// `|j_perp| / |thrust|` where `j_perp` is the jerk orthogonal to the thrust
/// direction.
pub fn body_rate(jerk: &Vector3<f64>, thrust: &Vector3<f64>) -> f64 {
    let n = thrust.norm();
    if n <= f64::EPSILON {
        return f64::INFINITY;
    }
    let dir = thrust / n;
    (jerk - dir * jerk.dot(&dir)).norm() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Ground,
    Velocity,
    Acceleration,
    Thrust,
    BodyRate,
    Jerk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Local trajectory time of the offending sample, s.
    pub time: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub violation: Option<Violation>,
}

impl Verdict {
    pub fn is_feasible(&self) -> bool {
        self.violation.is_none()
    }
}

/// Samples the trajectory every [`DT_CHECK`] seconds (plus the final
/// instant) and reports the first broken bound. Intervals touching a sample
/// within a few percent of a bound are resampled ten times more finely so
/// that peaks between coarse samples are not missed.
pub fn check_feasible(traj: &Trajectory, c: &ConstraintSet) -> Verdict {
    let total = traj.duration();
    let n = (total / DT_CHECK).floor() as usize;
    let mut times: Vec<f64> = (0..=n).map(|k| k as f64 * DT_CHECK).collect();
    if total - n as f64 * DT_CHECK > 1e-12 {
        times.push(total);
    }
    let mut seg_idx = 0;
    let mut seg_start = 0.0;
    let mut eval = |t: f64| -> TrajPoint {
        while seg_idx + 1 < traj.segments.len() && t >= seg_start + traj.segments[seg_idx].duration {
            seg_start += traj.segments[seg_idx].duration;
            seg_idx += 1;
        }
        let seg = &traj.segments[seg_idx];
        seg.eval((t - seg_start).clamp(0.0, seg.duration))
    };
    let fail = |pt: &TrajPoint, t: f64| {
        c.violation_at(pt).map(|(kind, value)| Verdict {
            violation: Some(Violation { kind, time: t, value }),
        })
    };
    let mut cur = eval(times[0]);
    for w in times.windows(2) {
        if let Some(v) = fail(&cur, w[0]) {
            return v;
        }
        let next = eval(w[1]);
        if c.is_near_bound(&cur) || c.is_near_bound(&next) {
            // Segment lookup above is monotone, so refine with direct evaluation.
            for j in 1..REFINE {
                let t = w[0] + (w[1] - w[0]) * j as f64 / REFINE as f64;
                if let Some(v) = fail(&traj.eval(t), t) {
                    return v;
                }
            }
        }
        cur = next;
    }
    fail(&cur, *times.last().unwrap()).unwrap_or(Verdict { violation: None })
}

const REFINE: usize = 10;
const NEAR_FRAC: f64 = 0.03;

/// Single-segment feasibility of the direct BVP, the membership test used by
/// reachability sampling and time search.
pub fn bvp_feasible(x0: &State9, xt: &State9, t: f64, c: &ConstraintSet) -> bool {
    match solve_bvp(x0, xt, t) {
        Ok(seg) => check_feasible(&Trajectory::from_segment(seg), c).is_feasible(),
        Err(_) => false,
    }
}

/// Concatenates the BVPs `xq0 -> w_0 -> w_1 -> ...` with the given segment
/// durations.
pub fn piecewise_plan(xq0: &State9, waypoints: &[State9], segment_times: &[f64]) -> Result<Trajectory> {
    if waypoints.len() != segment_times.len() {
        return Err(Error::InvalidArgument(format!(
            "{} waypoints but {} segment times",
            waypoints.len(),
            segment_times.len()
        )));
    }
    if waypoints.is_empty() {
        return Err(Error::InvalidArgument("no waypoints".into()));
    }
    let mut from = *xq0;
    let mut segments = Vec::with_capacity(waypoints.len());
    for (w, &t) in waypoints.iter().zip(segment_times) {
        segments.push(solve_bvp(&from, w, t)?);
        from = *w;
    }
    Ok(Trajectory { segments, t0: 0.0 })
}

/// Grid and budget of the minimal feasible time search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FindTimeConfig {
    /// Grid spacing, s.
    pub step: f64,
    /// Half-width of the window around the hint, s.
    pub half_window: f64,
    /// Shortest duration ever tried, s.
    pub floor: f64,
    /// Maximum number of BVP evaluations per search.
    pub budget: usize,
}

impl Default for FindTimeConfig {
    fn default() -> Self {
        Self {
            step: 0.05,
            half_window: 1.0,
            floor: 0.2,
            budget: 200,
        }
    }
}

impl FindTimeConfig {
    /// Durations tried for `hint`, shortest first, truncated to the budget.
    pub fn grid(&self, hint: f64) -> impl Iterator<Item = f64> + '_ {
        let lo = self.floor.max(hint - self.half_window);
        let hi = hint + self.half_window;
        let n = if hi >= lo {
            ((hi - lo) / self.step + 1e-9).floor() as usize + 1
        } else {
            0
        };
        (0..n.min(self.budget)).map(move |i| lo + i as f64 * self.step)
    }

    pub fn is_valid(&self) -> bool {
        self.step > 0.0 && self.half_window >= 0.0 && self.floor > 0.0 && self.budget > 0
    }
}

/// Smallest grid duration `t` for which the direct BVP from `x0` to
/// `target(t)` passes [`check_feasible`].
pub fn min_feasible_time<F>(
    x0: &State9,
    target: F,
    c: &ConstraintSet,
    grid: impl Iterator<Item = f64>,
) -> Option<(f64, State9)>
where
    F: Fn(f64) -> State9,
{
    for t in grid {
        let xt = target(t);
        if bvp_feasible(x0, &xt, t, c) {
            return Some((t, xt));
        }
    }
    None
}

/// Minimal feasible rendezvous time with the predicted surface, searched on
/// the window around `t_hint`. `None` means no grid point passed.
pub fn find_min_time(
    track: &SurfaceTrack,
    xq0: &State9,
    params: &PerchParams,
    c: &ConstraintSet,
    t_hint: f64,
    cfg: &FindTimeConfig,
) -> Option<f64> {
    min_feasible_time(
        xq0,
        |t| terminal_from_surface(&track.predict(t), params),
        c,
        cfg.grid(t_hint),
    )
    .map(|(t, _)| t)
}
