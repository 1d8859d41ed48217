//! Simulation and analysis toolkit for cosmic-ray induced correlated qubit errors.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`fluxmc`] samples muons from the zenith-dependent Gaisser flux.
//! * [`geometry`] traces them through axis-aligned prisms and builds cross-sections.
//! * [`streamsim`] generates synthetic qubit shot streams and detector pulses.
//! * [`burstdetect`] finds correlated relaxation bursts with a matched filter.
//! * [`coinstat`] measures qubit/detector coincidences and decomposes rates.
//! * [`detcal`] models and fits the detector energy response.
//! * [`ratealgebra`] evaluates exact multi-Poisson observation probabilities.
//! * [`pipeline`] holds configuration, file formats, synchronisation and orchestration.

pub mod burstdetect;
pub mod coinstat;
pub mod combination;
pub mod detcal;
pub mod error;
pub mod fluxmc;
pub mod geometry;
pub mod pipeline;
pub mod ratealgebra;
pub mod rng;
pub mod streamsim;
pub mod vec3;

pub use combination::{Combination, LabelSet};
pub use error::{Error, Result};
pub use vec3::Vec3;
