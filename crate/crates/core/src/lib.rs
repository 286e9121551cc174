pub mod asymptotics;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod io;
pub mod kernel;
pub mod model;
pub mod qprocess;
pub mod simplex;
pub mod simulate;
pub mod spectral;

pub use error::{Error, Result};
