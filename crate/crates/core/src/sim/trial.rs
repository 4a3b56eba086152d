//! Single perching trial: moving inclined surface, noisy detection, 30 Hz
//! replanning and 1 kHz physics until impact or failure.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lodw::{LodwConfig, LodwTable};
use crate::replanner::{replan, Branch, PlanContext, PlanRecord, ReplanConfig};
use crate::rng::stream;
use crate::sim::control::{feedback, flatness, track_command, attitude_command, StageTwo};
use crate::sim::plant::{step_plant, PlantState, VehicleParams};
use crate::state::{classify_impact, PerchParams, State9, SuccessBounds, SurfaceState};
use crate::target::{NoiseSpec, SurfaceTrack};
use crate::thrust_reg::{make_reg_problem, solve_switching, AttitudeRamp, RegBounds, RegWeights, SolveRecord, SolverConfig, ThrustSchedule};
use crate::trajgen::{ConstraintSet, Trajectory};

/// Planner and thrust-controller combination of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "OW+TR")]
    OwTr,
    #[serde(rename = "OW")]
    Ow,
    #[serde(rename = "TE")]
    Te,
    #[serde(rename = "OW+AT")]
    OwAt,
    #[serde(rename = "TE+AT")]
    TeAt,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::OwTr, Arm::Ow, Arm::Te, Arm::OwAt, Arm::TeAt];

    pub fn name(self) -> &'static str {
        match self {
            Arm::OwTr => "OW+TR",
            Arm::Ow => "OW",
            Arm::Te => "TE",
            Arm::OwAt => "OW+AT",
            Arm::TeAt => "TE+AT",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown arm {s:?}")))
    }

    /// Whether the arm plans through waypoints with the fallback branch.
    pub fn uses_waypoints(self) -> bool {
        matches!(self, Arm::OwTr | Arm::Ow | Arm::OwAt)
    }

    pub fn regulates_thrust(self) -> bool {
        self == Arm::OwTr
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arm> {
        Arm::parse(s)
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Environment disturbances. Half-widths are of zero-mean uniform draws on
/// `(y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// Added to the true surface position at each detection, m.
    pub detection_noise: [f64; 2],
    /// Added to the nominal surface velocity, redrawn every control tick, m/s.
    pub velocity_fluct: [f64; 2],
    /// Constant wind acceleration, m/s².
    pub wind_const: [f64; 2],
    /// Standard deviation of white wind acceleration per physics step, m/s².
    pub wind_std: [f64; 2],
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            detection_noise: [0.1, 0.1],
            velocity_fluct: [0.3, 0.1],
            wind_const: [0.0, 0.0],
            wind_std: [0.0, 0.0],
        }
    }
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self {
            detection_noise: [0.0; 2],
            velocity_fluct: [0.0; 2],
            ..Self::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.detection_noise
            .iter()
            .chain(&self.velocity_fluct)
            .chain(&self.wind_std)
            .all(|x| *x >= 0.0 && x.is_finite())
            && self.wind_const.iter().all(|x| x.is_finite())
    }

    /// Variances seen by the planner for this disturbance level.
    pub fn planner_noise(&self) -> NoiseSpec {
        NoiseSpec::from_uniform_half_widths(
            Vector3::new(0.0, self.detection_noise[0], self.detection_noise[1]),
            Vector3::new(0.0, self.velocity_fluct[0], self.velocity_fluct[1]),
        )
    }
}

/// Nominal target motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceScenario {
    /// Initial position of the perch point `(y, z)`, m.
    pub p0: [f64; 2],
    /// Nominal velocity `(y, z)`, m/s.
    pub velocity: [f64; 2],
    /// Inclination, degrees.
    pub incline_deg: f64,
    /// Tangential half-extent of the perchable area, m.
    pub half_extent: f64,
}

impl Default for SurfaceScenario {
    fn default() -> Self {
        Self {
            p0: [0.0, 1.5],
            velocity: [3.0, 0.0],
            incline_deg: 70.0,
            half_extent: 0.15,
        }
    }
}

impl SurfaceScenario {
    pub fn phi_s(&self) -> f64 {
        self.incline_deg.to_radians()
    }

    pub fn state(&self, p: [f64; 2], v: [f64; 2]) -> SurfaceState {
        SurfaceState::inclined(Vector3::new(0.0, p[0], p[1]), Vector3::new(0.0, v[0], v[1]), self.phi_s())
    }
}

/// Vehicle start: offset from the surface, moving with its nominal velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartScenario {
    pub offset: [f64; 2],
}

impl Default for StartScenario {
    fn default() -> Self {
        Self { offset: [-3.0, 1.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegulationConfig {
    /// Thrust correction bound as a fraction of the weight.
    pub bound_frac: f64,
    pub weights: RegWeights,
    pub solver: SolverConfig,
    /// Re-solve the schedule at every control tick of the attitude stage
    /// from the current state and detection, instead of once at entry.
    pub resolve_each_tick: bool,
}

impl Default for RegulationConfig {
    fn default() -> Self {
        Self {
            bound_frac: 0.35,
            weights: RegWeights::default(),
            solver: SolverConfig::default(),
            resolve_each_tick: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Physics step, s.
    pub dt: f64,
    /// Control, detection and replanning rate, Hz.
    pub control_hz: f64,
    /// Trial length limit, s.
    pub timeout: f64,
    /// Extra time allowed past the planned contact, s.
    pub grace: f64,
    /// Physics steps between recorded samples.
    pub record_every: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            control_hz: 30.0,
            timeout: 10.0,
            grace: 0.5,
            record_every: 10,
        }
    }
}

/// Everything that defines a trial apart from the arm and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub surface: SurfaceScenario,
    pub start: StartScenario,
    pub disturbance: DisturbanceSpec,
    pub perch: PerchParams,
    pub bounds: SuccessBounds,
    pub constraints: ConstraintSet,
    pub vehicle: VehicleParams,
    pub replan: ReplanConfig,
    pub regulation: RegulationConfig,
    pub lodw: LodwConfig,
    pub sim: SimConfig,
}

impl Default for Scenario {
    /// Point contact: the bottom point and the centroid coincide.
    fn default() -> Self {
        Self {
            surface: SurfaceScenario::default(),
            start: StartScenario::default(),
            disturbance: DisturbanceSpec::default(),
            perch: PerchParams { l: 0.0, ..PerchParams::default() },
            bounds: SuccessBounds::default(),
            constraints: ConstraintSet::default(),
            vehicle: VehicleParams { l: 0.0, ..VehicleParams::default() },
            replan: ReplanConfig::default(),
            regulation: RegulationConfig::default(),
            lodw: LodwConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("invalid {what}")));
        let s = &self.surface;
        if !(s.p0.iter().chain(&s.velocity).all(|x| x.is_finite())
            && s.incline_deg.is_finite()
            && s.incline_deg.abs() < 90.0
            && s.half_extent > 0.0)
        {
            return bad("surface");
        }
        if !self.start.offset.iter().all(|x| x.is_finite()) {
            return bad("start");
        }
        if !self.disturbance.is_valid() {
            return bad("disturbance");
        }
        if !self.perch.is_valid() || self.perch.g != self.vehicle.g {
            return bad("perch parameters");
        }
        if !self.bounds.is_valid() {
            return bad("success bounds");
        }
        if !self.constraints.is_valid() {
            return bad("constraints");
        }
        if !self.vehicle.is_valid() {
            return bad("vehicle");
        }
        self.replan.validate()?;
        let r = &self.regulation;
        if !(r.bound_frac > 0.0 && r.weights.is_valid() && r.solver.budget > 0 && r.solver.starts > 0) {
            return bad("regulation");
        }
        self.lodw.validate().map_err(|e| Error::Config(e.to_string()))?;
        let m = &self.sim;
        if !(m.dt > 0.0 && m.control_hz > 0.0 && 1.0 / m.control_hz >= m.dt && m.timeout > 0.0 && m.grace >= 0.0 && m.record_every > 0) {
            return bad("sim settings");
        }
        Ok(())
    }

    /// Vehicle terminal the waypoint table is built around: the nominal
    /// surface one nominal flight time ahead. Tables are translation
    /// invariant, so only velocity, attitude and acceleration matter.
    pub fn anchor_terminal(&self) -> State9 {
        let s = self.surface.state(self.surface.p0, self.surface.velocity);
        crate::state::terminal_from_surface(&s, &self.perch)
    }

    pub fn anchor_normal(&self) -> Vector3<f64> {
        self.surface.state(self.surface.p0, self.surface.velocity).z
    }

    /// Builds the waypoint table for this scenario.
    pub fn generate_table(&self, seed: u64) -> Result<LodwTable> {
        crate::lodw::seek_lodws(
            &self.anchor_terminal(),
            &self.anchor_normal(),
            &self.lodw,
            &self.disturbance.planner_noise(),
            &self.constraints,
            seed,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Fail,
    NoImpact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailReason {
    /// Impact outside the acceptance window.
    BadImpact,
    GroundHit,
    /// No plan could be made at the first tick.
    NoPlan,
    /// Planned contact passed without touching the surface.
    Missed,
    Timeout,
    Diverged,
}

/// Relative state at contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Impact {
    pub time: f64,
    /// Tangential offset of the bottom point from the perch point, m.
    pub p_ry: f64,
    pub v_rtau: f64,
    pub v_rn: f64,
    pub phi_c: f64,
    pub phi_err: f64,
    /// Absolute velocities at contact, for recomputation.
    pub v_quad: [f64; 2],
    pub v_surface: [f64; 2],
}

/// One recorded sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: PlantState,
    pub f: f64,
    pub m: f64,
    pub phi_ref: f64,
    pub stage: u8,
    pub surface: [f64; 2],
    /// Planned position at this time, m.
    pub plan: [f64; 2],
}

/// Result of one detection tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t: f64,
    /// Noise added to the true position, m.
    pub noise: [f64; 2],
    /// Velocity fluctuation in force until the next tick, m/s.
    pub fluct: [f64; 2],
}

/// Attitude-stage summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoRecord {
    pub t_entry: f64,
    pub ramp: Option<AttitudeRamp>,
    /// Regulation solves, the first at entry.
    pub solves: Vec<SolveRecord>,
    /// Thrust applied at every physics step of the stage: `(t - t_entry, f)`.
    pub thrust: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub arm: Arm,
    pub seed: u64,
    pub outcome: Outcome,
    pub fail_reason: Option<FailReason>,
    pub impact: Option<Impact>,
    /// Smallest time-to-go among feasible main-branch solves, s.
    pub min_tf: Option<f64>,
    /// Distance to the detected surface at the last feasible solve, m.
    pub min_dis: Option<f64>,
    /// Time-to-go of every feasible main-branch solve, s.
    pub tf_history: Vec<f64>,
    pub plans: Vec<PlanRecord>,
    pub detections: Vec<Detection>,
    pub stage_two: Option<StageTwoRecord>,
    pub samples: Vec<Sample>,
    pub end_time: f64,
}

impl TrialRecord {
    pub fn succeeded(&self) -> bool {
        self.outcome == Outcome::Success
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Env {
    rng: ChaCha8Rng,
    wind_rng: ChaCha8Rng,
    p: [f64; 2],
    v: [f64; 2],
}

fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    // Always consume a draw so streams stay aligned across settings.
    let u: f64 = rng.random_range(-1.0..1.0);
    u * half
}

fn to_state9(x: &PlantState, a: (f64, f64)) -> State9 {
    State9::new(
        Vector3::new(0.0, x.p_y, x.p_z),
        Vector3::new(0.0, x.v_y, x.v_z),
        Vector3::new(0.0, a.0, a.1),
    )
}

fn fail(rec: &mut TrialRecord, why: FailReason, t: f64) {
    rec.outcome = if why == FailReason::Missed { Outcome::NoImpact } else { Outcome::Fail };
    rec.fail_reason = Some(why);
    rec.end_time = t;
}

/// Runs one trial. OW arms need `table`.
pub fn run_trial(sc: &Scenario, arm: Arm, table: Option<&LodwTable>, seed: u64) -> Result<TrialRecord> {
    sc.validate()?;
    let table = if arm.uses_waypoints() {
        let t = table.ok_or_else(|| Error::Config(format!("arm {arm} needs a waypoint table")))?;
        t.validate()?;
        Some(t.clone())
    } else {
        None
    };
    let vp = &sc.vehicle;
    let dist = &sc.disturbance;
    let dt = sc.sim.dt;
    let tick = 1.0 / sc.sim.control_hz;
    let phi_s = sc.surface.phi_s();
    let noise = dist.planner_noise();
    let replan_cfg = ReplanConfig {
        complementary: arm.uses_waypoints() && sc.replan.complementary,
        ..sc.replan
    };
    let wind_normal = [
        Normal::new(0.0, dist.wind_std[0]).map_err(|e| Error::Config(e.to_string()))?,
        Normal::new(0.0, dist.wind_std[1]).map_err(|e| Error::Config(e.to_string()))?,
    ];

    let mut env = Env {
        rng: stream(seed, 0),
        wind_rng: stream(seed, 1),
        p: sc.surface.p0,
        v: sc.surface.velocity,
    };
    let mut x = PlantState {
        p_y: sc.surface.p0[0] + sc.start.offset[0],
        p_z: sc.surface.p0[1] + sc.start.offset[1],
        v_y: sc.surface.velocity[0],
        v_z: sc.surface.velocity[1],
        ..Default::default()
    };
    let mut ctx = PlanContext::new(table);
    let mut rec = TrialRecord {
        arm,
        seed,
        outcome: Outcome::Fail,
        fail_reason: None,
        impact: None,
        min_tf: None,
        min_dis: None,
        tf_history: Vec::new(),
        plans: Vec::new(),
        detections: Vec::new(),
        stage_two: None,
        samples: Vec::new(),
        end_time: 0.0,
    };

    let mut traj: Option<Trajectory> = None;
    let mut stage: Option<StageTwo> = None;
    let mut fb = (0.0, 0.0);
    let mut f_cmd = vp.m_mass * vp.g;
    let mut next_tick = 0usize;
    let max_steps = (sc.sim.timeout / dt).ceil() as usize;
    let zs = sc.surface.state(env.p, env.v).z;
    let ys = sc.surface.state(env.p, env.v).y;

    for step in 0..max_steps {
        let now = step as f64 * dt;
        let ticked = now + 1e-9 >= next_tick as f64 * tick;
        if ticked {
            next_tick += 1;
            // Environment update and detection.
            let fluct = [uniform(&mut env.rng, dist.velocity_fluct[0]), uniform(&mut env.rng, dist.velocity_fluct[1])];
            let dn = [uniform(&mut env.rng, dist.detection_noise[0]), uniform(&mut env.rng, dist.detection_noise[1])];
            env.v = [sc.surface.velocity[0] + fluct[0], sc.surface.velocity[1] + fluct[1]];
            rec.detections.push(Detection { t: now, noise: dn, fluct });
        }
        let detected = {
            let dn = rec.detections.last().map(|d| d.noise).unwrap_or([0.0; 2]);
            sc.surface.state([env.p[0] + dn[0], env.p[1] + dn[1]], env.v)
        };
        let track = SurfaceTrack::new(detected, noise);
        if let Some(s) = stage.as_mut().filter(|_| ticked && arm.regulates_thrust() && sc.regulation.resolve_each_tick) {
            if let Some(next) = reregulate(sc, &x, s, &track, now, &mut rec)? {
                *s = next;
            }
        }
        if ticked && stage.is_none() {
            let xq0 = to_state9(&x, x.accel(f_cmd, vp.m_mass, vp.g));

            match replan(&mut ctx, now, &track, &xq0, &sc.perch, &sc.constraints, &replan_cfg) {
                Ok(out) => {
                    if out.branch == Branch::Main {
                        rec.tf_history.push(out.tf);
                        rec.min_tf = Some(rec.min_tf.map_or(out.tf, |m: f64| m.min(out.tf)));
                        rec.min_dis = Some((detected.p - xq0.p).norm());
                    }
                    rec.plans.push(out.record(now));
                    traj = Some(out.traj);
                }
                Err(Error::NoPlan(_)) => {
                    if traj.is_none() {
                        fail(&mut rec, FailReason::NoPlan, now);
                        return Ok(rec);
                    }
                }
                Err(e) => return Err(e),
            }
            let current = traj.as_ref().expect("plan exists after first tick");
            let t_local = now - current.t0;
            let remaining = current.duration() - t_local;
            if remaining < vp.t_eps {
                stage = Some(enter_stage_two(sc, arm, &x, current, t_local, &track, phi_s, &mut rec, now)?);
            } else {
                fb = feedback(&x, current, t_local, vp);
            }
        }

        let current = traj.as_ref().expect("plan exists after first tick");
        let cmd = match &stage {
            Some(s) => {
                let c = attitude_command(&x, s, now - s.t0, vp);
                if let Some(r) = rec.stage_two.as_mut() {
                    r.thrust.push((now - r.t_entry, c.f));
                }
                c
            }
            None => track_command(&x, current, now - current.t0, fb, vp),
        };
        f_cmd = cmd.f.clamp(vp.f_limits.lo, vp.f_limits.hi);
        let wind = (
            dist.wind_const[0] + wind_normal[0].sample(&mut env.wind_rng),
            dist.wind_const[1] + wind_normal[1].sample(&mut env.wind_rng),
        );
        let before = x;
        let s_before = env.p;
        x = step_plant(&x, cmd.f, cmd.m, vp, wind, dt);
        env.p = [env.p[0] + env.v[0] * dt, env.p[1] + env.v[1] * dt];
        let t_next = now + dt;

        if step % sc.sim.record_every == 0 {
            let pr = current.eval(now - current.t0).p;
            rec.samples.push(Sample {
                t: now,
                x: before,
                f: cmd.f,
                m: cmd.m,
                phi_ref: cmd.phi_ref,
                stage: if stage.is_some() { 2 } else { 1 },
                surface: s_before,
                plan: [pr.y, pr.z],
            });
        }

        if !x.is_finite() {
            fail(&mut rec, FailReason::Diverged, t_next);
            return Ok(rec);
        }
        // Signed distance of the bottom point from the surface plane.
        let side = |x: &PlantState, s: [f64; 2]| {
            let b = x.bottom(vp.l);
            ((b.0 - s[0]) * zs.y + (b.1 - s[1]) * zs.z, (b.0 - s[0]) * ys.y + (b.1 - s[1]) * ys.z)
        };
        let (d0, _) = side(&before, s_before);
        let (d1, tan) = side(&x, env.p);
        if d0 > 0.0 && d1 <= 0.0 && tan.abs() <= sc.surface.half_extent {
            let dv = (x.v_y - env.v[0], x.v_z - env.v[1]);
            let v_rn = dv.0 * zs.y + dv.1 * zs.z;
            let v_rtau = dv.0 * ys.y + dv.1 * ys.z;
            let impact = Impact {
                time: t_next,
                p_ry: tan,
                v_rtau,
                v_rn,
                phi_c: x.phi,
                phi_err: x.phi - phi_s,
                v_quad: [x.v_y, x.v_z],
                v_surface: env.v,
            };
            rec.impact = Some(impact);
            rec.end_time = t_next;
            if classify_impact(tan, v_rtau, v_rn, x.phi, phi_s, &sc.bounds) {
                rec.outcome = Outcome::Success;
            } else {
                fail(&mut rec, FailReason::BadImpact, t_next);
            }
            return Ok(rec);
        }
        if x.p_z <= 0.0 {
            fail(&mut rec, FailReason::GroundHit, t_next);
            return Ok(rec);
        }
        if t_next > current.t0 + current.duration() + sc.sim.grace {
            fail(&mut rec, FailReason::Missed, t_next);
            return Ok(rec);
        }
    }
    fail(&mut rec, FailReason::Timeout, sc.sim.timeout);
    Ok(rec)
}

/// Fixes the attitude ramp and, for regulated arms, the thrust schedule.
#[allow(clippy::too_many_arguments)]
fn enter_stage_two(
    sc: &Scenario,
    arm: Arm,
    x: &PlantState,
    traj: &Trajectory,
    t_local: f64,
    track: &SurfaceTrack,
    phi_s: f64,
    rec: &mut TrialRecord,
    now: f64,
) -> Result<StageTwo> {
    let vp = &sc.vehicle;
    let tail = traj.tail(t_local);
    let remaining = tail.duration();
    let a = tail.eval(0.0).a;
    let phi_plan = flatness(a.y, a.z, vp.m_mass, vp.g).1;
    let omega_bar = if remaining > 0.0 { (phi_s - phi_plan) / remaining } else { 0.0 };
    let ramp = AttitudeRamp { phi0: x.phi, omega_bar, phi_s };
    let ramp = ramp.horizon().ok().filter(|h| *h > 0.0).map(|_| ramp);
    let mut solves = Vec::new();
    let sched = match (&ramp, arm.regulates_thrust()) {
        (Some(r), true) => {
            let (sched, record) = regulate(sc, x, r, &tail, track)?;
            solves.push(record);
            Some(sched)
        }
        _ => None,
    };
    rec.stage_two = Some(StageTwoRecord {
        t_entry: now,
        ramp,
        solves,
        thrust: Vec::new(),
    });
    Ok(StageTwo {
        traj: tail,
        ramp,
        sched,
        phi_s,
        t0: now,
    })
}

/// Solves the switching problem from the current state. The track epoch
/// and the local time of `tail` and `ramp` must all be now.
fn regulate(
    sc: &Scenario,
    x: &PlantState,
    ramp: &AttitudeRamp,
    tail: &Trajectory,
    track: &SurfaceTrack,
) -> Result<(ThrustSchedule, SolveRecord)> {
    let vp = &sc.vehicle;
    let xq = nalgebra::Vector4::new(x.p_y, x.v_y, x.p_z, x.v_z);
    let problem = make_reg_problem(&xq, ramp, tail, track, &sc.perch, vp.m_mass)?;
    let bounds = RegBounds::symmetric(sc.regulation.bound_frac, vp.m_mass, vp.g);
    let sol = solve_switching(&problem, &sc.regulation.weights, &bounds, &sc.regulation.solver);
    Ok((sol.schedule, SolveRecord::new(&problem, &sol)))
}

/// Re-bases the attitude stage at `now` and solves a fresh schedule while
/// the ramp is still running. The roll reference is unchanged.
fn reregulate(
    sc: &Scenario,
    x: &PlantState,
    stage: &StageTwo,
    track: &SurfaceTrack,
    now: f64,
    rec: &mut TrialRecord,
) -> Result<Option<StageTwo>> {
    let t = now - stage.t0;
    let Some(r) = stage.ramp else { return Ok(None) };
    if t >= r.horizon()? {
        return Ok(None);
    }
    let ramp = AttitudeRamp {
        phi0: r.phi(t),
        ..r
    };
    let tail = stage.traj.tail(t);
    let (sched, record) = regulate(sc, x, &ramp, &tail, track)?;
    if let Some(s2) = rec.stage_two.as_mut() {
        s2.solves.push(record);
    }
    Ok(Some(StageTwo {
        traj: tail,
        ramp: Some(ramp),
        sched: Some(sched),
        phi_s: stage.phi_s,
        t0: now,
    }))
}
