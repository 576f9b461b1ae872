//! Scenario runner for augmented primal-dual simulations: TOML scenarios
//! in, CSV trajectories and JSON verification reports out.

pub mod error;
pub mod output;
pub mod run;
pub mod scenario;

pub use error::{CliError, Result};
pub use run::{resolve_out_dir, run_scenario, Check, RunOptions, RunReport, ScenarioReport, Status};
pub use scenario::{parse_scenario, Scenario};
