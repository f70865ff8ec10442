//! File formats, benchmark generation and run orchestration on top of
//! `ddb-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pnm;
pub mod report;
pub mod run;

pub use checkpoint::Checkpoint;
pub use config::{Config, DomainSpec, Origin, Role};
pub use error::{Error, Result};
