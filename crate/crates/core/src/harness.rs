//! Monte-Carlo campaigns over planner/controller arms with paired seeds,
//! summary metrics and plot data.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lodw::{LodwConfig, LodwTable};
use crate::sim::{run_trial, Arm, Scenario, TrialRecord};
use crate::state::SuccessBounds;
use crate::target::NoiseSpec;
use crate::trajgen::ConstraintSet;

/// Version stamped into every JSON and CSV artifact.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of parallel trials.
pub const THREADS_VAR: &str = "PERCHKIT_THREADS";

/// How a waypoint table was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub lodw: LodwConfig,
    pub noise: NoiseSpec,
    pub constraint_hash: String,
    pub generator: String,
}

/// On-disk waypoint table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFile {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub table: LodwTable,
}

impl TableFile {
    pub fn generate(sc: &Scenario, seed: u64) -> Result<Self> {
        sc.validate()?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            provenance: Provenance {
                seed,
                lodw: sc.lodw,
                noise: sc.disturbance.planner_noise(),
                constraint_hash: constraint_hash(&sc.constraints),
                generator: concat!("perchkit ", env!("CARGO_PKG_VERSION")).into(),
            },
            table: sc.generate_table(seed)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        if f.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("table schema {} is not {SCHEMA_VERSION}", f.schema_version)));
        }
        f.table.validate()?;
        Ok(f)
    }
}

/// FNV-1a of the canonical JSON form.
pub fn constraint_hash(c: &ConstraintSet) -> String {
    let text = serde_json::to_string(c).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSpec {
    pub trials: usize,
    pub arms: Vec<Arm>,
    pub base_seed: u64,
}

impl CampaignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("a campaign needs at least one trial".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("a campaign needs at least one arm".into()));
        }
        Ok(())
    }

    pub fn seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }
}

/// One trial of a campaign. `record` is `None` when the trial crashed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub arm: Arm,
    pub trial: usize,
    pub seed: u64,
    pub record: Option<TrialRecord>,
    pub error: Option<String>,
}

impl TrialEntry {
    pub fn succeeded(&self) -> bool {
        self.record.as_ref().is_some_and(TrialRecord::succeeded)
    }

    /// Outcome label: the failure reason, `success`, or `crash`.
    pub fn label(&self) -> String {
        match &self.record {
            None => "crash".into(),
            Some(r) => match r.fail_reason {
                None => "success".into(),
                Some(f) => serde_json::to_value(f)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_default(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// 95% Wilson score interval of the success rate.
    pub success_interval: [f64; 2],
    pub avg_min_tf: Option<f64>,
    pub avg_min_dis: Option<f64>,
    /// Trials that touched the surface.
    pub impacts: usize,
    pub rms_p_ry: Option<f64>,
    /// Errors relative to the centres of the velocity windows.
    pub rmse_v_rtau: Option<f64>,
    pub rmse_v_rn: Option<f64>,
    pub outcomes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub schema_version: u32,
    pub spec: CampaignSpec,
    pub arms: Vec<ArmSummary>,
}

impl CampaignSummary {
    pub fn arm(&self, arm: Arm) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table in the layout of the comparison tables, one row per
    /// arm.
    pub fn render(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        let mut s = format!(
            "{:<7} {:>9} {:>15} {:>9} {:>9} {:>9} {:>10} {:>10}\n",
            "arm", "success", "95% interval", "minT_f", "minDis", "p_ry", "v_rtau", "v_rn"
        );
        for a in &self.arms {
            s += &format!(
                "{:<7} {:>9} {:>15} {:>9} {:>9} {:>9} {:>10} {:>10}\n",
                a.arm.name(),
                format!("{}/{}", a.successes, a.trials),
                format!("[{:.2}, {:.2}]", a.success_interval[0], a.success_interval[1]),
                opt(a.avg_min_tf),
                opt(a.avg_min_dis),
                opt(a.rms_p_ry),
                opt(a.rmse_v_rtau),
                opt(a.rmse_v_rn),
            );
        }
        s
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson(k: usize, n: usize, z: f64) -> [f64; 2] {
    if n == 0 {
        return [0.0, 1.0];
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    [(centre - half).max(0.0), (centre + half).min(1.0)]
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn rms(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.map(|x| x * x).collect();
    mean(&v).map(f64::sqrt)
}

/// Metrics of one arm. Crashed trials count as failures.
pub fn summarize_arm(arm: Arm, entries: &[TrialEntry], bounds: &SuccessBounds) -> ArmSummary {
    let mine: Vec<&TrialEntry> = entries.iter().filter(|e| e.arm == arm).collect();
    let records: Vec<&TrialRecord> = mine.iter().filter_map(|e| e.record.as_ref()).collect();
    let successes = mine.iter().filter(|e| e.succeeded()).count();
    let impacts: Vec<_> = records.iter().filter_map(|r| r.impact).collect();
    let min_tf: Vec<f64> = records.iter().filter_map(|r| r.min_tf).collect();
    let min_dis: Vec<f64> = records.iter().filter_map(|r| r.min_dis).collect();
    let (c_tau, c_n) = (bounds.v_tau_range.center(), bounds.v_n_range.center());
    let mut outcomes = BTreeMap::new();
    for e in &mine {
        *outcomes.entry(e.label()).or_insert(0) += 1;
    }
    let n = mine.len();
    ArmSummary {
        arm,
        trials: n,
        successes,
        success_rate: if n == 0 { 0.0 } else { successes as f64 / n as f64 },
        success_interval: wilson(successes, n, 1.96),
        avg_min_tf: mean(&min_tf),
        avg_min_dis: mean(&min_dis),
        impacts: impacts.len(),
        rms_p_ry: rms(impacts.iter().map(|i| i.p_ry)),
        rmse_v_rtau: rms(impacts.iter().map(|i| i.v_rtau - c_tau)),
        rmse_v_rn: rms(impacts.iter().map(|i| i.v_rn - c_n)),
        outcomes,
    }
}

pub fn summarize(spec: &CampaignSpec, entries: &[TrialEntry], bounds: &SuccessBounds) -> CampaignSummary {
    CampaignSummary {
        schema_version: SCHEMA_VERSION,
        spec: spec.clone(),
        arms: spec.arms.iter().map(|a| summarize_arm(*a, entries, bounds)).collect(),
    }
}

/// Thread cap from the environment; `None` lets rayon decide.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
    }
}

fn run_one(sc: &Scenario, arm: Arm, table: Option<&LodwTable>, trial: usize, seed: u64) -> TrialEntry {
    let (record, error) = match catch_unwind(AssertUnwindSafe(|| run_trial(sc, arm, table, seed))) {
        Ok(Ok(r)) => (Some(r), None),
        Ok(Err(e)) => (None, Some(e.to_string())),
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (None, Some(format!("panic: {msg}")))
        }
    };
    TrialEntry { arm, trial, seed, record, error }
}

/// Runs every arm on trials `0..spec.trials` with seed `base_seed + i`.
/// Entries come back ordered by arm, then trial, whatever the thread count.
pub fn run_campaign(
    sc: &Scenario,
    spec: &CampaignSpec,
    table: Option<&LodwTable>,
    threads: Option<usize>,
) -> Result<Vec<TrialEntry>> {
    spec.validate()?;
    sc.validate()?;
    if table.is_none() {
        if let Some(a) = spec.arms.iter().find(|a| a.uses_waypoints()) {
            return Err(Error::Config(format!("arm {a} needs a waypoint table")));
        }
    }
    let jobs: Vec<(Arm, usize)> = spec
        .arms
        .iter()
        .flat_map(|a| (0..spec.trials).map(move |i| (*a, i)))
        .collect();
    let work = || -> Vec<TrialEntry> {
        jobs.par_iter()
            .map(|(arm, i)| run_one(sc, *arm, table, *i, spec.seed(*i)))
            .collect()
    };
    match threads {
        None => Ok(work()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(work))
        }
    }
}

/// Durations of all feasible main-branch solves, binned per arm.
pub fn write_tf_histogram<W: Write>(out: &mut W, entries: &[TrialEntry], arms: &[Arm], bin: f64) -> Result<()> {
    if !(bin > 0.0) {
        return Err(Error::InvalidArgument(format!("bin width must be positive, got {bin}")));
    }
    writeln!(out, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(out, "arm,bin_lo,bin_hi,count,percent")?;
    for arm in arms {
        let tfs: Vec<f64> = entries
            .iter()
            .filter(|e| e.arm == *arm)
            .filter_map(|e| e.record.as_ref())
            .flat_map(|r| r.tf_history.iter().copied())
            .collect();
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for t in &tfs {
            *counts.entry((t / bin).floor() as i64).or_insert(0) += 1;
        }
        for (k, c) in counts {
            let lo = k as f64 * bin;
            writeln!(out, "{},{:.3},{:.3},{},{:.2}", arm.name(), lo, lo + bin, c, 100.0 * c as f64 / tfs.len() as f64)?;
        }
    }
    Ok(())
}

/// One row per trial: time and distance of the last feasible solve.
pub fn write_scatter<W: Write>(out: &mut W, entries: &[TrialEntry]) -> Result<()> {
    writeln!(out, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(out, "arm,trial,seed,min_tf,min_dis,outcome")?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
    for e in entries {
        let r = e.record.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            e.arm.name(),
            e.trial,
            e.seed,
            opt(r.and_then(|r| r.min_tf)),
            opt(r.and_then(|r| r.min_dis)),
            e.label()
        )?;
    }
    Ok(())
}

/// Recorded plant samples of one trial.
pub fn write_time_series<W: Write>(out: &mut W, rec: &TrialRecord) -> Result<()> {
    writeln!(out, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(out, "t,p_y,p_z,v_y,v_z,phi,phi_dot,f,m,phi_ref,stage,surface_y,surface_z,plan_y,plan_z")?;
    for s in &rec.samples {
        let x = &s.x;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.t, x.p_y, x.p_z, x.v_y, x.v_z, x.phi, x.phi_dot, s.f, s.m, s.phi_ref, s.stage, s.surface[0], s.surface[1], s.plan[0], s.plan[1]
        )?;
    }
    Ok(())
}
