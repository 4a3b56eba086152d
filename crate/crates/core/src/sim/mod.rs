//! Planar perching simulator.

pub mod control;
pub mod plant;
pub mod trial;

pub use control::{two_stage_control, Command, StageTwo};
pub use plant::{step_plant, PlantState, VehicleParams};
pub use trial::{run_trial, Arm, DisturbanceSpec, FailReason, Impact, Outcome, Scenario, TrialRecord};
