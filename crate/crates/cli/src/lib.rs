pub mod error;
pub mod experiment;
pub mod io;
pub mod report;
pub mod verify;

pub use error::{CliError, Result};
pub use experiment::{generate_points, DensitySource, ExperimentSpec, InitKind, Mode, RateFit};
