//! Sequential search for local optimal dexterous waypoints: scan hover
//! starts around the target, collect the states that sit one horizon before
//! the target on each feasible trajectory, and keep the one whose reachable
//! set best covers the uncertain target.

use std::path::Path;

use nalgebra::{SVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reachability::{expected_cover, CoverEstimate, GaussianSpec};
use crate::rng;
use crate::state::State9;
use crate::target::{terminal_covariance, NoiseSpec};
use crate::trajgen::{bvp_feasible, min_feasible_time, solve_bvp, ConstraintSet, Trajectory};

/// Waypoints `[x_T, lodw_1, ..., lodw_N]`, each `horizon` seconds before the
/// previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodwTable {
    pub waypoints: Vec<State9>,
    pub horizon: f64,
    pub anchor_terminal: State9,
}

impl LodwTable {
    pub fn depth(&self) -> usize {
        self.waypoints.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::InvalidArgument("table needs at least one waypoint besides the terminal".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidArgument(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.waypoints[0] != self.anchor_terminal {
            return Err(Error::InvalidArgument("first waypoint differs from the anchor terminal".into()));
        }
        if !self.waypoints.iter().all(State9::is_finite) {
            return Err(Error::InvalidArgument("non-finite waypoint".into()));
        }
        Ok(())
    }

    /// True when every consecutive pair is joined by a feasible BVP of one
    /// horizon.
    pub fn chain_feasible(&self, c: &ConstraintSet) -> bool {
        self.waypoints
            .windows(2)
            .all(|w| bvp_feasible(&w[1], &w[0], self.horizon, c))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Box of hover starts in the sagittal plane, centered `offset` metres from
/// the target along the surface normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanGrid {
    pub offset: f64,
    /// Extent along world Y, m.
    pub width: f64,
    /// Extent along world Z, m.
    pub height: f64,
    pub resolution: f64,
    /// Step of the duration scan, s.
    pub t_step: f64,
    /// Longest duration tried, s.
    pub t_max: f64,
}

impl Default for ScanGrid {
    fn default() -> Self {
        Self {
            offset: 1.5,
            width: 3.0,
            height: 2.0,
            resolution: 0.25,
            t_step: 0.05,
            t_max: 5.0,
        }
    }
}

impl ScanGrid {
    pub fn is_valid(&self) -> bool {
        self.resolution > 0.0
            && self.width >= 0.0
            && self.height >= 0.0
            && self.t_step > 0.0
            && self.t_max > self.t_step
    }

    fn axis(extent: f64, res: f64) -> Vec<f64> {
        let n = (extent / res + 1e-9).floor() as usize + 1;
        let span = (n - 1) as f64 * res;
        (0..n).map(|i| i as f64 * res - 0.5 * span).collect()
    }

    /// Grid positions on the normal side of the target, Y-major order.
    pub fn positions(&self, target: &Vector3<f64>, zs: &Vector3<f64>) -> Vec<Vector3<f64>> {
        let center = target + zs * self.offset;
        let mut out = Vec::new();
        for dy in Self::axis(self.width, self.resolution) {
            for dz in Self::axis(self.height, self.resolution) {
                let p = Vector3::new(center.x, center.y + dy, center.z + dz);
                if (p - target).dot(zs) > 0.0 {
                    out.push(p);
                }
            }
        }
        out
    }

    fn durations(&self) -> impl Iterator<Item = f64> + '_ {
        let n = (self.t_max / self.t_step + 1e-9).floor() as usize;
        (1..=n).map(move |i| i as f64 * self.t_step)
    }
}

/// Feasible trajectory from a hover start, with its minimal duration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScannedTrajectory {
    pub start: State9,
    pub traj: Trajectory,
}

impl ScannedTrajectory {
    pub fn duration(&self) -> f64 {
        self.traj.duration()
    }
}

/// Plans from each grid hover state to `xt` with the shortest feasible
/// duration on the grid's time scan. Starts with no feasible duration or
/// below the height limit are dropped.
pub fn trajectory_scan(xt: &State9, zs: &Vector3<f64>, grid: &ScanGrid, c: &ConstraintSet) -> Vec<ScannedTrajectory> {
    grid.positions(&xt.p, zs)
        .into_par_iter()
        .filter(|p| p.z >= c.z_min)
        .filter_map(|p| {
            let start = State9::hover(p);
            min_feasible_time(&start, |_| *xt, c, grid.durations()).map(|(t, _)| ScannedTrajectory {
                start,
                traj: Trajectory::from_segment(solve_bvp(&start, xt, t).expect("positive duration")),
            })
        })
        .collect()
}

/// States `horizon` seconds before the end of each trajectory that is longer
/// than `horizon`, with the index of their source trajectory.
pub fn feasible_region(set: &[ScannedTrajectory], horizon: f64) -> Vec<(usize, State9)> {
    set.iter()
        .enumerate()
        .filter(|(_, s)| s.duration() > horizon || horizon == 0.0)
        .map(|(j, s)| (j, s.traj.state(s.duration() - horizon)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LodwConfig {
    /// Number of waypoints to find.
    pub n: usize,
    /// Time between consecutive waypoints, s.
    pub horizon: f64,
    pub grid: ScanGrid,
    /// Start-state variances per axis for position, velocity, acceleration.
    pub start_var_p: f64,
    pub start_var_v: f64,
    pub start_var_a: f64,
    pub n_outer: usize,
    pub n_inner: usize,
}

impl Default for LodwConfig {
    fn default() -> Self {
        Self {
            n: 3,
            horizon: 0.5,
            grid: ScanGrid::default(),
            start_var_p: 0.05 * 0.05,
            start_var_v: 0.1 * 0.1,
            start_var_a: 0.0,
            n_outer: 50,
            n_inner: 300,
        }
    }
}

impl LodwConfig {
    pub fn start_var(&self) -> SVector<f64, 9> {
        let mut v = SVector::zeros();
        for i in 0..3 {
            v[i] = self.start_var_p;
            v[i + 3] = self.start_var_v;
            v[i + 6] = self.start_var_a;
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n >= 1
            && self.horizon > 0.0
            && self.grid.is_valid()
            && [self.start_var_p, self.start_var_v, self.start_var_a].iter().all(|v| *v >= 0.0)
            && self.n_outer >= 1
            && self.n_inner >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid waypoint search settings".into()))
        }
    }
}

/// One round of the search: candidate states and their estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchRound {
    pub target: GaussianSpec,
    pub candidates: Vec<State9>,
    pub estimates: Vec<CoverEstimate>,
    pub winner: usize,
    /// Seed the estimates were computed with.
    pub seed: u64,
}

/// Finds `cfg.n` waypoints before `xt`; see [`seek_lodws_detailed`].
pub fn seek_lodws(
    xt: &State9,
    zs: &Vector3<f64>,
    cfg: &LodwConfig,
    noise: &NoiseSpec,
    c: &ConstraintSet,
    seed: u64,
) -> Result<LodwTable> {
    seek_lodws_detailed(xt, zs, cfg, noise, c, seed).map(|(t, _)| t)
}

/// Runs the search and also returns every round's candidates and scores.
pub fn seek_lodws_detailed(
    xt: &State9,
    zs: &Vector3<f64>,
    cfg: &LodwConfig,
    noise: &NoiseSpec,
    c: &ConstraintSet,
    seed: u64,
) -> Result<(LodwTable, Vec<SearchRound>)> {
    cfg.validate()?;
    let var = terminal_covariance(noise, cfg.horizon);
    let start_var = cfg.start_var();
    let mut waypoints = vec![*xt];
    let mut rounds = Vec::with_capacity(cfg.n);
    for i in 1..=cfg.n {
        let current = *waypoints.last().unwrap();
        let set = trajectory_scan(&current, zs, &cfg.grid, c);
        // Keep only candidates whose own one-horizon BVP passes the checker,
        // so the returned chain is feasible under the same sampling.
        let candidates: Vec<State9> = feasible_region(&set, cfg.horizon)
            .into_iter()
            .map(|(_, x)| x)
            .filter(|x| bvp_feasible(x, &current, cfg.horizon, c))
            .collect();
        if candidates.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let target = GaussianSpec::new(current, var);
        let round_seed = rng::derive_seed(seed, i as u64);
        let estimates: Vec<CoverEstimate> = candidates
            .iter()
            .map(|x| expected_cover(x, cfg.horizon, &target, &start_var, c, cfg.n_outer, cfg.n_inner, round_seed))
            .collect();
        let winner = argmax_closest(&candidates, &estimates, &xt.p);
        waypoints.push(candidates[winner]);
        rounds.push(SearchRound {
            target,
            candidates,
            estimates,
            winner,
            seed: round_seed,
        });
    }
    let table = LodwTable {
        waypoints,
        horizon: cfg.horizon,
        anchor_terminal: *xt,
    };
    Ok((table, rounds))
}

/// Highest estimate; ties go to the candidate closest to `anchor`, then to
/// the lower index.
fn argmax_closest(candidates: &[State9], estimates: &[CoverEstimate], anchor: &Vector3<f64>) -> usize {
    let mut best = 0;
    for i in 1..candidates.len() {
        let (a, b) = (estimates[i].value, estimates[best].value);
        let closer = (candidates[i].p - anchor).norm() < (candidates[best].p - anchor).norm();
        if a > b || (a == b && closer) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{terminal_from_surface, PerchParams, SurfaceState};

    fn target70() -> (State9, Vector3<f64>) {
        let s = SurfaceState::inclined(Vector3::new(0.0, 5.0, 1.0), Vector3::new(0.0, 3.0, 0.0), 70f64.to_radians());
        (terminal_from_surface(&s, &PerchParams::default()), s.z)
    }

    fn quick() -> LodwConfig {
        LodwConfig {
            n: 2,
            grid: ScanGrid { resolution: 0.5, ..ScanGrid::default() },
            n_outer: 8,
            n_inner: 40,
            ..LodwConfig::default()
        }
    }

    fn noise() -> NoiseSpec {
        NoiseSpec::from_uniform_half_widths(Vector3::new(0.0, 0.1, 0.1), Vector3::new(0.0, 0.3, 0.1))
    }

    #[test]
    fn grid_lies_on_normal_side() {
        let (xt, zs) = target70();
        let g = ScanGrid::default();
        let pts = g.positions(&xt.p, &zs);
        assert!(!pts.is_empty() && pts.len() <= 13 * 9);
        assert!(pts.iter().all(|p| (p - xt.p).dot(&zs) > 0.0));
        let single = ScanGrid { width: 0.0, height: 0.0, ..g };
        assert_eq!(single.positions(&xt.p, &zs), vec![xt.p + zs * g.offset]);
    }

    #[test]
    fn scan_matches_exhaustive_oracle() {
        let (xt, zs) = target70();
        let g = ScanGrid { width: 2.0, height: 2.0, resolution: 0.5, ..ScanGrid::default() };
        let c = ConstraintSet::default();
        let set = trajectory_scan(&xt, &zs, &g, &c);
        assert!(!set.is_empty());
        for p in g.positions(&xt.p, &zs) {
            let start = State9::hover(p);
            let first = (1..=100).map(|i| i as f64 * 0.05).find(|&t| bvp_feasible(&start, &xt, t, &c));
            let found = set.iter().find(|s| s.start == start);
            match (first, found) {
                (Some(t), Some(s)) => assert!((s.duration() - t).abs() < 1e-12),
                (None, None) => {}
                other => panic!("scan disagrees with oracle at {p:?}: {other:?}"),
            }
        }
        for s in &set {
            assert!(s.traj.end_state().max_abs_diff(&xt) < 1e-9);
        }
    }

    #[test]
    fn terminal_acceleration_out_of_bounds_empties_scan() {
        let (xt, zs) = target70();
        // |a_T| = 2 g sin(35 deg) = 11.25 m/s^2.
        let c = ConstraintSet { a_max: 10.0, ..ConstraintSet::default() };
        assert!(trajectory_scan(&xt, &zs, &ScanGrid::default(), &c).is_empty());
        let err = seek_lodws(&xt, &zs, &quick(), &noise(), &c, 0).unwrap_err();
        assert!(matches!(err, Error::EmptyRegion));
    }

    #[test]
    fn single_point_scan() {
        let (xt, zs) = target70();
        let g = ScanGrid { width: 0.0, height: 0.0, ..ScanGrid::default() };
        assert_eq!(trajectory_scan(&xt, &zs, &g, &ConstraintSet::default()).len(), 1);
    }

    #[test]
    fn region_lookback() {
        let xt = State9::hover(Vector3::new(0.0, 0.0, 1.0));
        let mk = |y: f64, t: f64| {
            let start = State9::hover(Vector3::new(0.0, y, 1.0));
            ScannedTrajectory { start, traj: Trajectory::from_segment(solve_bvp(&start, &xt, t).unwrap()) }
        };
        let set = vec![mk(-1.0, 0.8), mk(-2.0, 1.2), mk(-1.5, 1.2)];
        let zero = feasible_region(&set, 0.0);
        assert_eq!(zero.len(), 3);
        assert!(zero.iter().all(|(_, x)| x.max_abs_diff(&xt) < 1e-12));
        assert!(feasible_region(&set[..1], 0.8).is_empty());
        let mixed = feasible_region(&set, 1.0);
        assert_eq!(mixed.iter().map(|(j, _)| *j).collect::<Vec<_>>(), vec![1, 2]);
        assert!(mixed[0].1.max_abs_diff(&set[1].traj.state(0.2)) < 1e-15);
    }

    #[test]
    fn zero_noise_single_waypoint() {
        let (xt, zs) = target70();
        let cfg = LodwConfig { n: 1, start_var_p: 0.0, start_var_v: 0.0, ..quick() };
        let (table, rounds) = seek_lodws_detailed(&xt, &zs, &cfg, &NoiseSpec::zero(), &ConstraintSet::default(), 3).unwrap();
        assert_eq!(table.waypoints.len(), 2);
        assert_eq!(rounds[0].estimates[rounds[0].winner].value, 1.0);
        assert!(bvp_feasible(&table.waypoints[1], &xt, cfg.horizon, &ConstraintSet::default()));
    }

    #[test]
    fn search_properties_and_determinism() {
        let (xt, zs) = target70();
        let c = ConstraintSet::default();
        let (table, rounds) = seek_lodws_detailed(&xt, &zs, &quick(), &noise(), &c, 17).unwrap();
        table.validate().unwrap();
        assert_eq!(table.waypoints.len(), 3);
        assert!(table.chain_feasible(&c));
        for r in &rounds {
            let best = r.estimates[r.winner].value;
            assert!(r.estimates.iter().all(|e| e.value <= best));
        }
        let again = seek_lodws(&xt, &zs, &quick(), &noise(), &c, 17).unwrap();
        assert_eq!(table, again);
        let back = LodwTable::from_json(&table.to_json().unwrap()).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn invalid_tables_rejected() {
        let x = State9::zero();
        let t = LodwTable { waypoints: vec![x], horizon: 0.5, anchor_terminal: x };
        assert!(t.validate().is_err());
        let t = LodwTable { waypoints: vec![x, x], horizon: 0.0, anchor_terminal: x };
        assert!(t.validate().is_err());
        assert!(LodwTable::from_json("{\"waypoints\": 3}").is_err());
    }
}
