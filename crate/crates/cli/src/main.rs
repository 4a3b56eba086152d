use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use perchkit::config::load_scenario;
use perchkit::harness::{self, CampaignSpec, CampaignSummary, TableFile, TrialEntry, SCHEMA_VERSION};
use perchkit::sim::{run_trial, Arm, Scenario};
use perchkit::Error;
use serde::{Deserialize, Serialize};

const TABLE_FILE: &str = "lodw.json";
const TRIALS_FILE: &str = "trials.json";
const SUMMARY_FILE: &str = "summary.json";

#[derive(Parser)]
#[command(name = "perchkit", version, about = "Perching planner experiments on a moving inclined surface")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search the waypoint table for the configured surface.
    GenLodw {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one trial and write its record and time series.
    RunTrial {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "OW+TR")]
        arm: Arm,
        /// Waypoint table; defaults to lodw.json in the output directory.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Run paired trials for several arms and summarize them.
    Campaign {
        #[command(flatten)]
        common: Common,
        /// Seed of trial 0; trial i uses seed + i in every arm.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Arms to compare; repeat or separate with commas.
        #[arg(long = "arm", value_delimiter = ',', default_values = ["OW+TR", "OW", "TE"])]
        arms: Vec<Arm>,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Recompute and print the summary of a finished campaign.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct TrialsFile {
    schema_version: u32,
    spec: CampaignSpec,
    entries: Vec<TrialEntry>,
}

enum Failure {
    Usage(String),
    MissingTable(String),
    EmptyRegion(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            Error::EmptyRegion => Failure::EmptyRegion(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Other(format!("{}: {e}", path.display()))
}

fn scenario(common: &Common) -> Result<Scenario, Failure> {
    let sc = match &common.config {
        Some(p) => load_scenario(p)?,
        None => Scenario::default(),
    };
    Ok(sc)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(io(path))
}

fn load_table(arms: &[Arm], table: Option<&PathBuf>, out: &Path) -> Result<Option<TableFile>, Failure> {
    if !arms.iter().any(|a| a.uses_waypoints()) {
        return Ok(None);
    }
    let path = table.cloned().unwrap_or_else(|| out.join(TABLE_FILE));
    let text = fs::read_to_string(&path).map_err(|e| {
        Failure::MissingTable(format!("{}: {e}; run gen-lodw first or pass --table", path.display()))
    })?;
    Ok(Some(TableFile::from_json(&text)?))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenLodw { common, seed } => {
            let sc = scenario(&common)?;
            fs::create_dir_all(&common.out).map_err(io(&common.out))?;
            let file = TableFile::generate(&sc, seed)?;
            let path = common.out.join(TABLE_FILE);
            write(&path, &file.to_json().map_err(Failure::from)?)?;
            let chain = file.table.chain_feasible(&sc.constraints);
            println!("{}: {} waypoints, chain feasible: {chain}", path.display(), file.table.depth());
        }
        Cmd::RunTrial { common, seed, arm, table } => {
            let sc = scenario(&common)?;
            let table = load_table(&[arm], table.as_ref(), &common.out)?;
            fs::create_dir_all(&common.out).map_err(io(&common.out))?;
            let rec = run_trial(&sc, arm, table.as_ref().map(|t| &t.table), seed)?;
            let mut json = serde_json::to_value(&rec).map_err(|e| Failure::Other(e.to_string()))?;
            json["schema_version"] = SCHEMA_VERSION.into();
            let text = serde_json::to_string_pretty(&json).map_err(|e| Failure::Other(e.to_string()))?;
            write(&common.out.join("trial.json"), &text)?;
            let mut csv = Vec::new();
            harness::write_time_series(&mut csv, &rec)?;
            write(&common.out.join("timeseries.csv"), &String::from_utf8_lossy(&csv))?;
            let label = rec.fail_reason.map_or("success".to_string(), |f| format!("{f:?}"));
            println!("{arm} seed {seed}: {label}");
        }
        Cmd::Campaign { common, seed, arms, trials, table } => {
            let sc = scenario(&common)?;
            let spec = CampaignSpec { trials, arms, base_seed: seed };
            spec.validate()?;
            let table = load_table(&spec.arms, table.as_ref(), &common.out)?;
            fs::create_dir_all(&common.out).map_err(io(&common.out))?;
            let threads = harness::threads_from_env()?;
            let entries = harness::run_campaign(&sc, &spec, table.as_ref().map(|t| &t.table), threads)?;
            let summary = harness::summarize(&spec, &entries, &sc.bounds);
            let mut hist = Vec::new();
            harness::write_tf_histogram(&mut hist, &entries, &spec.arms, 0.1)?;
            write(&common.out.join("tf_hist.csv"), &String::from_utf8_lossy(&hist))?;
            let mut scatter = Vec::new();
            harness::write_scatter(&mut scatter, &entries)?;
            write(&common.out.join("scatter.csv"), &String::from_utf8_lossy(&scatter))?;
            let file = TrialsFile { schema_version: SCHEMA_VERSION, spec, entries };
            let text = serde_json::to_string(&file).map_err(|e| Failure::Other(e.to_string()))?;
            write(&common.out.join(TRIALS_FILE), &text)?;
            write(&common.out.join(SUMMARY_FILE), &summary.to_json()?)?;
            print!("{}", summary.render());
        }
        Cmd::Report { common } => {
            let sc = scenario(&common)?;
            let path = common.out.join(TRIALS_FILE);
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            let file: TrialsFile = serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            if file.schema_version != SCHEMA_VERSION {
                return Err(Failure::Usage(format!("{}: schema {} is not {SCHEMA_VERSION}", path.display(), file.schema_version)));
            }
            let summary: CampaignSummary = harness::summarize(&file.spec, &file.entries, &sc.bounds);
            print!("{}", summary.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (2, m),
                Failure::MissingTable(m) => (3, m),
                Failure::EmptyRegion(m) => (4, m),
                Failure::Other(m) => (1, m),
            };
            eprintln!("perchkit: {msg}");
            ExitCode::from(code)
        }
    }
}
