//! Teichmüller harmonic map flow from hyperbolic cylinders into warped-product targets.

pub mod collar;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod grid;
pub mod initial;
pub mod linalg;
pub mod map;
pub mod quad;
pub mod runner;
pub mod target;

pub use collar::{CollarMetric, Variant};
pub use config::{parse_config, ConfigIssue, RunConfig};
pub use diagnostics::{MonitorConfig, Regime};
pub use error::{Error, Result};
pub use flow::{FlowParams, FlowState, Mode, RateFit, Record, Termination};
pub use grid::{Grid, GridKind};
pub use initial::InitialDataSpec;
pub use map::SymmetricMap;
pub use runner::{execute, run_sweep, ErrorReport, Summary};
pub use target::{TargetGeometry, WarpingKind, WarpingSpec};
