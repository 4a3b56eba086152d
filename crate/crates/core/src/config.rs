//! Scenario files. Every section and field is optional; missing values take
//! their defaults and unknown keys are rejected.

use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::Scenario;

pub fn scenario_from_toml(text: &str) -> Result<Scenario> {
    let sc: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    sc.validate()?;
    Ok(sc)
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    scenario_from_toml(&text)
}

pub fn scenario_to_toml(sc: &Scenario) -> Result<String> {
    toml::to_string(sc).map_err(|e| Error::Config(e.to_string()))
}
