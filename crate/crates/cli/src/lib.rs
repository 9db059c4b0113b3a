//! Config-driven runner composing the laboratory's modules into the
//! experiment protocols, plus the report renderer the CLI exposes.

pub mod config;
pub mod csvio;
pub mod engine;
pub mod protocols;
pub mod report;

pub use config::{ExperimentSpec, Protocol};
pub use engine::{paired_streams, run, verify_paired, Family, RunConfig, RunOutcome};
pub use protocols::{aligned_pair, execute, ProtocolOutput};
