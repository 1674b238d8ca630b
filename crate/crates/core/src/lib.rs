//! RIS and scatterer RCS models, mmWave channel-parameter measurement
//! synthesis, and two-stage weighted-least-squares estimators for joint UE
//! localization and environment sensing.

pub mod bounds;
pub mod channel;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod linalg;
pub mod scattering;
pub mod scenario;
pub mod simulation;

pub use error::{Error, Result};
pub use geometry::{Angles, MeasurementSet, Scenario, Vec3};
