//! Configuration, artifact formats, synchronisation and stage orchestration.

pub mod analysis;
pub mod config;
pub mod experiment;
pub mod injection;
pub mod io;
pub mod stages;
pub mod sync;

pub use config::RunConfig;
pub use stages::{parse_stages, run_pipeline, Stage};
pub use sync::{assign_pulses, build_sync, DropTally, SyncMap};
