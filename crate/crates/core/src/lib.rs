pub mod cli;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod phantom;
pub mod preprocess;
pub mod training;
pub mod triage;

pub use error::{PecadError, Result};
