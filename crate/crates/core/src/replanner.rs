//! Online planning through translated waypoint tables, with a fallback that
//! re-targets the last solved trajectory when no feasible time is found.

use std::io::Write;

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lodw::LodwTable;
use crate::state::{terminal_from_surface, PerchParams, State9};
use crate::target::SurfaceTrack;
use crate::trajgen::{check_feasible, find_min_time, piecewise_plan, ConstraintSet, FindTimeConfig, Trajectory};

/// Sigmoid schedule trading terminal error against start error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSchedule {
    /// Steepness, 1/s.
    pub k_t: f64,
    /// Time-to-go at which both errors weigh the same, s.
    pub t_o: f64,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self { k_t: 4.0, t_o: 1.5 }
    }
}

impl WeightSchedule {
    pub fn is_valid(&self) -> bool {
        self.k_t > 0.0 && self.t_o.is_finite()
    }
}

/// Terminal-error weight for time-to-go `tf`: near one close to contact,
/// near zero far from it.
pub fn sigmoid_weight(tf: f64, w: &WeightSchedule) -> f64 {
    1.0 - 1.0 / (1.0 + (-w.k_t * (tf - w.t_o)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplanConfig {
    pub find_time: FindTimeConfig,
    pub weights: WeightSchedule,
    /// Hint and half-window used while no plan exists yet, s.
    pub initial_hint: f64,
    pub initial_half_window: f64,
    /// Shortest first segment allowed before falling back to a shallower
    /// waypoint, s.
    pub min_first_segment: f64,
    /// Whether a failed time search falls back to the complementary planner.
    pub complementary: bool,
}

impl Default for ReplanConfig {
    fn default() -> Self {
        Self {
            find_time: FindTimeConfig::default(),
            weights: WeightSchedule::default(),
            initial_hint: 2.0,
            initial_half_window: 3.0,
            min_first_segment: 0.05,
            complementary: true,
        }
    }
}

impl ReplanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.find_time.is_valid()
            && self.weights.is_valid()
            && self.initial_hint > 0.0
            && self.initial_half_window >= 0.0
            && self.min_first_segment >= 0.0
        {
            Ok(())
        } else {
            Err(Error::Config("invalid replanning settings".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Main,
    Complementary,
}

/// Replanning memory of one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanContext {
    /// Waypoint table; `None` plans straight to the terminal.
    pub table: Option<LodwTable>,
    /// Last trajectory produced by the main branch; its epoch is when it was
    /// solved.
    pub last_traj: Option<Trajectory>,
    pub last_tf: f64,
    /// Time since `last_traj` was solved, s.
    pub elapsed: f64,
    pub last_branch: Option<Branch>,
}

impl PlanContext {
    pub fn new(table: Option<LodwTable>) -> Self {
        Self {
            table,
            last_traj: None,
            last_tf: 0.0,
            elapsed: 0.0,
            last_branch: None,
        }
    }
}

/// Result of one replanning call.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// Trajectory to follow, with epoch `now`.
    pub traj: Trajectory,
    pub branch: Branch,
    /// Time to go, s.
    pub tf: f64,
    /// Index of the first waypoint aimed at; zero for a direct plan.
    pub k: usize,
    /// Predicted terminal state the plan is built for.
    pub terminal: State9,
}

impl PlanOutcome {
    pub fn record(&self, time: f64) -> PlanRecord {
        PlanRecord {
            time,
            branch: self.branch,
            tf: self.tf,
            k: self.k,
            terminal: self.terminal,
        }
    }
}

/// One line of the plan log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub time: f64,
    pub branch: Branch,
    pub tf: f64,
    pub k: usize,
    pub terminal: State9,
}

/// Writes records as JSON lines.
pub fn write_plan_records<W: Write>(out: &mut W, records: &[PlanRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Table waypoints moved to serve the new terminal: waypoint `i` is shifted
/// by `e^{-A i T}(xt_new - anchor)`.
pub fn transform_table(table: &LodwTable, xt_new: &State9) -> Vec<State9> {
    let delta = *xt_new - table.anchor_terminal;
    table
        .waypoints
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if i == 0 {
                *xt_new
            } else {
                *w + delta.flow(-(i as f64) * table.horizon)
            }
        })
        .collect()
}

/// Index of the nearest waypoint ahead of the vehicle. Waypoints are walked
/// from the terminal outwards; the first one the vehicle has already passed
/// (negative dot product) stops the walk at its successor.
pub fn forward_nearest(xq0: &State9, transformed: &[State9]) -> usize {
    let n = transformed.len() - 1;
    for i in 1..=n {
        let to_wp = transformed[i].p - xq0.p;
        let along = transformed[i - 1].p - transformed[i].p;
        if to_wp.dot(&along) < 0.0 {
            return i - 1;
        }
    }
    n
}

/// Weighted least-squares virtual terminal. `last_end` is the last solved
/// trajectory's terminal and `last_now` its state at the current time.
pub fn virtual_terminal(
    xt_star: &State9,
    last_end: &State9,
    last_now: &State9,
    xq0: &State9,
    tf: f64,
    lambda: f64,
) -> Result<State9> {
    let m = flow_matrix(-tf);
    let d = -(m * last_end.to_vector()) + last_now.to_vector() - xq0.to_vector();
    let l1 = SMatrix::<f64, 9, 9>::identity() * lambda;
    let l2 = SMatrix::<f64, 9, 9>::identity() * (1.0 - lambda);
    let lhs = l1 + m.transpose() * l2 * m;
    let rhs = l1 * xt_star.to_vector() - m.transpose() * l2 * d;
    let x = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NoPlan("singular virtual terminal system".into()))?;
    Ok(State9::from_vector(&x))
}

/// Value of the virtual terminal objective at `x`.
pub fn virtual_objective(
    x: &State9,
    xt_star: &State9,
    last_end: &State9,
    last_now: &State9,
    xq0: &State9,
    tf: f64,
    lambda: f64,
) -> f64 {
    let e_t = (*x - *xt_star).to_vector();
    let e_0 = (*x - *last_end).flow(-tf) + *last_now - *xq0;
    lambda * e_t.norm_squared() + (1.0 - lambda) * e_0.to_vector().norm_squared()
}

/// `e^{A t}` as a 9x9 matrix in `[p, v, a]` ordering.
pub fn flow_matrix(t: f64) -> SMatrix<f64, 9, 9> {
    let mut m = SMatrix::<f64, 9, 9>::identity();
    for i in 0..3 {
        m[(i, i + 3)] = t;
        m[(i, i + 6)] = 0.5 * t * t;
        m[(i + 3, i + 6)] = t;
    }
    m
}

/// Shifts the remainder of the last solved trajectory so that it trades
/// off ending at `xt_star` against starting at `xq0`. The jerk profile of
/// the remainder is unchanged.
pub fn complementary_plan(ctx: &PlanContext, xt_star: &State9, xq0: &State9, weights: &WeightSchedule) -> Result<Trajectory> {
    let last = ctx
        .last_traj
        .as_ref()
        .ok_or_else(|| Error::NoPlan("no previous trajectory to shift".into()))?;
    let tf = ctx.last_tf - ctx.elapsed;
    if !(tf > 0.0) {
        return Err(Error::NoPlan(format!("no time left on the last trajectory ({tf} s)")));
    }
    let last_end = last.end_state();
    let last_now = last.state(ctx.elapsed);
    let lambda = sigmoid_weight(tf, weights);
    let x = virtual_terminal(xt_star, &last_end, &last_now, xq0, tf, lambda)?;
    Ok(last.tail(ctx.elapsed).with_terminal_shift(&(x - last_end)))
}

/// Waypoints and segment times for a plan of duration `tf` through the
/// table moved to `terminal`. The depth is reduced until the first segment
/// lasts at least `min_first`.
pub fn waypoint_plan(
    table: &LodwTable,
    terminal: &State9,
    xq0: &State9,
    tf: f64,
    min_first: f64,
) -> (Vec<State9>, Vec<f64>, usize) {
    let moved = transform_table(table, terminal);
    let mut k = forward_nearest(xq0, &moved);
    while k > 0 && tf - k as f64 * table.horizon < min_first {
        k -= 1;
    }
    let wps: Vec<State9> = (0..=k).rev().map(|i| moved[i]).collect();
    let mut times = vec![tf - k as f64 * table.horizon];
    times.extend(std::iter::repeat_n(table.horizon, k));
    (wps, times, k)
}

/// Main-branch result of a time search.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTime {
    pub tf: f64,
    /// Trajectory from the start state with epoch zero.
    pub traj: Trajectory,
    pub terminal: State9,
    pub k: usize,
}

/// Smallest time on the search window whose plan through the moved table
/// passes the feasibility check.
#[allow(clippy::too_many_arguments)]
pub fn find_min_time_planned(
    table: &LodwTable,
    track: &SurfaceTrack,
    xq0: &State9,
    params: &PerchParams,
    c: &ConstraintSet,
    t_hint: f64,
    cfg: &FindTimeConfig,
    min_first: f64,
) -> Result<Option<PlannedTime>> {
    for tf in cfg.grid(t_hint) {
        let terminal = terminal_from_surface(&track.predict(tf), params);
        let (wps, times, k) = waypoint_plan(table, &terminal, xq0, tf, min_first);
        let traj = piecewise_plan(xq0, &wps, &times)?;
        if check_feasible(&traj, c).is_feasible() {
            return Ok(Some(PlannedTime { tf, traj, terminal, k }));
        }
    }
    Ok(None)
}

/// One planning cycle at absolute time `now`.
pub fn replan(
    ctx: &mut PlanContext,
    now: f64,
    track: &SurfaceTrack,
    xq0: &State9,
    params: &PerchParams,
    c: &ConstraintSet,
    cfg: &ReplanConfig,
) -> Result<PlanOutcome> {
    let (hint, window) = match &ctx.last_traj {
        Some(last) => {
            ctx.elapsed = now - last.t0;
            ((ctx.last_tf - ctx.elapsed).max(cfg.find_time.floor), cfg.find_time)
        }
        None => (
            cfg.initial_hint,
            FindTimeConfig {
                half_window: cfg.initial_half_window,
                ..cfg.find_time
            },
        ),
    };
    let found = match &ctx.table {
        Some(table) => find_min_time_planned(table, track, xq0, params, c, hint, &window, cfg.min_first_segment)?,
        None => match find_min_time(track, xq0, params, c, hint, &window) {
            Some(tf) => {
                let terminal = terminal_from_surface(&track.predict(tf), params);
                let traj = piecewise_plan(xq0, &[terminal], &[tf])?;
                Some(PlannedTime { tf, traj, terminal, k: 0 })
            }
            None => None,
        },
    };
    if let Some(PlannedTime { tf, traj, terminal, k }) = found {
        let traj = traj.with_epoch(now);
        ctx.last_traj = Some(traj.clone());
        ctx.last_tf = tf;
        ctx.elapsed = 0.0;
        ctx.last_branch = Some(Branch::Main);
        return Ok(PlanOutcome {
            traj,
            branch: Branch::Main,
            tf,
            k,
            terminal,
        });
    }
    if !cfg.complementary {
        return Err(Error::NoPlan("no feasible time found".into()));
    }
    let tf = ctx.last_tf - ctx.elapsed;
    if ctx.last_traj.is_none() || !(tf > 0.0) {
        return Err(Error::NoPlan("no feasible time and nothing to fall back on".into()));
    }
    let terminal = terminal_from_surface(&track.predict(tf), params);
    let traj = complementary_plan(ctx, &terminal, xq0, &cfg.weights)?.with_epoch(now);
    ctx.last_branch = Some(Branch::Complementary);
    Ok(PlanOutcome {
        traj,
        branch: Branch::Complementary,
        tf,
        k: 0,
        terminal,
    })
}

/// Stationarity residual of the virtual terminal objective, for checks.
pub fn virtual_gradient(
    x: &State9,
    xt_star: &State9,
    last_end: &State9,
    last_now: &State9,
    xq0: &State9,
    tf: f64,
    lambda: f64,
) -> SVector<f64, 9> {
    let m = flow_matrix(-tf);
    let e_t = (*x - *xt_star).to_vector();
    let e_0 = ((*x - *last_end).flow(-tf) + *last_now - *xq0).to_vector();
    2.0 * lambda * e_t + 2.0 * (1.0 - lambda) * m.transpose() * e_0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::SurfaceState;
    use crate::target::NoiseSpec;
    use crate::trajgen::solve_bvp;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn table() -> LodwTable {
        let xt = State9::new(v3(0.0, 5.0, 1.0), v3(0.0, 3.9, -0.3), v3(0.0, -9.2, -6.5));
        LodwTable {
            waypoints: vec![
                xt,
                State9::new(v3(0.0, 3.4, 1.3), v3(0.0, 3.0, 0.3), v3(0.0, -1.0, -1.0)),
                State9::new(v3(0.0, 2.0, 1.4), v3(0.0, 2.5, 0.0), v3(0.0, 1.0, 0.0)),
            ],
            horizon: 0.5,
            anchor_terminal: xt,
        }
    }

    #[test]
    fn transform_table_examples() {
        let t = table();
        assert_eq!(transform_table(&t, &t.anchor_terminal), t.waypoints);
        let dp = State9::new(v3(0.0, 0.4, -0.1), Vector3::zeros(), Vector3::zeros());
        let moved = transform_table(&t, &(t.anchor_terminal + dp));
        for (m, w) in moved.iter().zip(&t.waypoints) {
            assert!(m.max_abs_diff(&(*w + dp)) < 1e-15);
        }
        let dv = State9::new(Vector3::zeros(), v3(0.0, 0.2, 0.0), Vector3::zeros());
        let moved = transform_table(&t, &(t.anchor_terminal + dv));
        let want = t.waypoints[2] + State9::new(v3(0.0, -0.2, 0.0), v3(0.0, 0.2, 0.0), Vector3::zeros());
        assert!(moved[2].max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn forward_nearest_examples() {
        let w = |y: f64, z: f64| State9::hover(v3(0.0, y, z));
        let list = [w(5.0, 1.0), w(4.0, 1.2), w(3.0, 1.4)];
        let q = w(3.5, 1.3);
        assert!(((list[1].p - q.p).dot(&(list[0].p - list[1].p)) - 0.52).abs() < 1e-12);
        assert_eq!(forward_nearest(&q, &list), 1);
        assert_eq!(forward_nearest(&w(1.0, 1.5), &list), 2);
        assert_eq!(forward_nearest(&w(4.5, 1.1), &list), 0);
    }

    #[test]
    fn sigmoid_examples() {
        let w = WeightSchedule::default();
        assert_eq!(sigmoid_weight(1.5, &w), 0.5);
        assert!(sigmoid_weight(100.0, &w) < 1e-12);
        let far = WeightSchedule { k_t: 4.0, t_o: 10.0 };
        assert!(sigmoid_weight(0.0, &far) > 1.0 - 1e-12);
    }

    fn last_plan() -> (PlanContext, Trajectory) {
        let x0 = State9::hover(v3(0.0, 0.0, 2.0));
        let xt = State9::new(v3(0.0, 3.0, 1.0), v3(0.0, 3.0, -0.5), v3(0.0, -9.0, -6.0));
        let traj = Trajectory::from_segment(solve_bvp(&x0, &xt, 1.5).unwrap());
        let mut ctx = PlanContext::new(None);
        ctx.last_traj = Some(traj.clone());
        ctx.last_tf = 1.5;
        ctx.elapsed = 0.4;
        (ctx, traj)
    }

    #[test]
    fn complementary_extremes() {
        let (ctx, last) = last_plan();
        let star = last.end_state() + State9::new(v3(0.0, 0.3, 0.1), v3(0.0, 0.2, 0.0), Vector3::zeros());
        let xq0 = last.state(0.4) + State9::new(v3(0.0, 0.05, -0.02), Vector3::zeros(), Vector3::zeros());
        let pure_terminal = WeightSchedule { k_t: 50.0, t_o: 100.0 };
        let tr = complementary_plan(&ctx, &star, &xq0, &pure_terminal).unwrap();
        assert!(tr.end_state().max_abs_diff(&star) < 1e-9);
        let pure_start = WeightSchedule { k_t: 50.0, t_o: -100.0 };
        let tr = complementary_plan(&ctx, &star, &xq0, &pure_start).unwrap();
        assert!(tr.start_state().max_abs_diff(&xq0) < 1e-9);
        assert!((tr.duration() - 1.1).abs() < 1e-12);
        for i in 0..=110 {
            let t = i as f64 * 0.01;
            assert!((tr.eval(t).j - last.eval(0.4 + t).j).amax() < 1e-9);
        }
    }

    #[test]
    fn one_axis_split() {
        // Start already on the last trajectory; terminal wants +1 in p_y.
        let (_, last) = last_plan();
        let end = last.end_state();
        let now = last.state(0.4);
        let star = end + State9::new(v3(0.0, 1.0, 0.0), Vector3::zeros(), Vector3::zeros());
        let tf = 1.1;
        let x = virtual_terminal(&star, &end, &now, &now, tf, 0.5).unwrap();
        assert!(virtual_gradient(&x, &star, &end, &now, &now, tf, 0.5).amax() < 1e-8);
        let h = 1e-6;
        for i in 0..9 {
            let mut e = SVector::<f64, 9>::zeros();
            e[i] = h;
            let dx = State9::from_vector(&e);
            let f = |y: State9| virtual_objective(&y, &star, &end, &now, &now, tf, 0.5);
            let g = (f(x + dx) - f(x - dx)) / (2.0 * h);
            assert!(g.abs() < 1e-6, "component {i}: {g}");
        }
        let shift = x.p.y - end.p.y;
        assert!(shift > 0.0 && shift < 1.0);
    }

    #[test]
    fn replan_static_target_hits_terminal() {
        let params = PerchParams::default();
        let s = SurfaceState::inclined(v3(0.0, 3.0, 1.5), Vector3::zeros(), 70f64.to_radians());
        let track = SurfaceTrack::new(s, NoiseSpec::zero());
        let xq0 = State9::hover(v3(0.0, 1.0, 2.0));
        let c = ConstraintSet::default();
        let mut ctx = PlanContext::new(None);
        let out = replan(&mut ctx, 0.0, &track, &xq0, &params, &c, &ReplanConfig::default()).unwrap();
        assert_eq!((out.branch, out.k, out.traj.segments.len()), (Branch::Main, 0, 1));
        assert!(out.traj.end_state().max_abs_diff(&terminal_from_surface(&s, &params)) < 1e-9);
        assert!(out.traj.start_state().max_abs_diff(&xq0) < 1e-9);
    }

    #[test]
    fn replan_through_waypoints_interpolates_them() {
        let params = PerchParams::default();
        let s = SurfaceState::inclined(v3(0.0, 4.0, 1.5), Vector3::zeros(), 70f64.to_radians());
        let track = SurfaceTrack::new(s, NoiseSpec::zero());
        let xt = terminal_from_surface(&s, &params);
        // Waypoints sampled from one gentle approach, so the piecewise plan
        // from its start is feasible.
        let xq0 = State9::hover(v3(0.0, 1.0, 2.0));
        let path = solve_bvp(&xq0, &xt, 2.0).unwrap();
        let tab = LodwTable {
            waypoints: vec![xt, path.state(1.5), path.state(1.0)],
            horizon: 0.5,
            anchor_terminal: xt,
        };
        let c = ConstraintSet::default();
        let mut ctx = PlanContext::new(Some(tab.clone()));
        let out = replan(&mut ctx, 2.0, &track, &xq0, &params, &c, &ReplanConfig::default()).unwrap();
        assert_eq!(out.k, 2);
        assert_eq!(out.traj.t0, 2.0);
        let knots = out.traj.knot_times();
        let moved = transform_table(&tab, &out.terminal);
        assert!((knots[1] - (out.tf - 1.0)).abs() < 1e-12);
        assert!(out.traj.state(knots[1]).max_abs_diff(&moved[2]) < 1e-9);
        assert!(out.traj.state(knots[2]).max_abs_diff(&moved[1]) < 1e-9);
        assert!(out.traj.end_state().max_abs_diff(&moved[0]) < 1e-9);
    }

    #[test]
    fn forced_fallback_and_no_plan() {
        let params = PerchParams::default();
        let c = ConstraintSet::default();
        let s = SurfaceState::inclined(v3(0.0, 3.0, 1.5), Vector3::zeros(), 70f64.to_radians());
        let xq0 = State9::hover(v3(0.0, 1.0, 2.0));
        let mut ctx = PlanContext::new(None);
        let cfg = ReplanConfig::default();
        replan(&mut ctx, 0.0, &SurfaceTrack::new(s, NoiseSpec::zero()), &xq0, &params, &c, &cfg).unwrap();
        let jumped = SurfaceState { p: s.p + v3(0.0, 40.0, 0.0), ..s };
        let track = SurfaceTrack::new(jumped, NoiseSpec::zero());
        let out = replan(&mut ctx, 0.1, &track, &xq0, &params, &c, &cfg).unwrap();
        assert_eq!(out.branch, Branch::Complementary);
        assert_eq!(ctx.last_branch, Some(Branch::Complementary));
        let strict = ReplanConfig { complementary: false, ..cfg };
        assert!(matches!(replan(&mut ctx, 0.2, &track, &xq0, &params, &c, &strict), Err(Error::NoPlan(_))));
        let mut fresh = PlanContext::new(None);
        assert!(matches!(replan(&mut fresh, 0.0, &track, &xq0, &params, &c, &cfg), Err(Error::NoPlan(_))));
    }

    #[test]
    fn plan_records_are_json_lines() {
        let r = PlanRecord { time: 0.5, branch: Branch::Main, tf: 1.2, k: 2, terminal: State9::zero() };
        let mut buf = Vec::new();
        write_plan_records(&mut buf, &[r.clone(), r.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(serde_json::from_str::<PlanRecord>(lines[1]).unwrap(), r);
        assert!(lines[0].contains("\"branch\":\"main\""));
    }

    proptest! {
        #[test]
        fn flow_matrix_matches_flow(v in proptest::collection::vec(-3.0..3.0f64, 9), t in -2.0..2.0f64) {
            let x = State9::from_vector(&SVector::<f64, 9>::from_column_slice(&v));
            let a = flow_matrix(t) * x.to_vector();
            prop_assert!((a - x.flow(t).to_vector()).amax() < 1e-12);
        }
    }
}
