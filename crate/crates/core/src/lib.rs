//! Neural-enhanced distributed Kalman filtering.
//!
//! Nodes run a predict/update cycle against learned (or analytical) models and
//! then exchange information-form messages with their neighbours.

pub mod error;
pub mod filter;
pub mod fusion;
pub mod linalg;
pub mod models;
pub mod neural;
pub mod rng;
pub mod selfcheck;
pub mod sim;
pub mod stability;

pub use error::{Error, Result, StepContext};
pub use filter::{predict, predict_linearized, update, Belief, InnovationRecord, NoiseModel, Stage};
pub use fusion::{consensus_round, fuse, info_contribution, FusionScale, InfoMessage, Topology, TopologyKind};
pub use linalg::{invert_spd, spectral_norm, Matrix, Vector};
pub use models::{Model, SharedModel};
pub use stability::{contraction_report, error_bound, ContractionReport, NoiseBounds};
