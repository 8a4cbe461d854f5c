//! Racing simulation toolkit: a contouring-control planner over a spline
//! track, an offline per-portion overtaking policy learner, and a
//! switched-mode controller that consumes the learned policies.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod mpcc;
pub mod opponent;
pub mod qp;
pub mod race;
pub mod scalar;
pub mod spline;
pub mod track;

pub use error::{Error, Result};
pub use scalar::Real;

/// Concrete `f64` aliases for the generic core types.
pub type VehicleState = dynamics::VehicleState<f64>;
pub type ControlInput = dynamics::ControlInput<f64>;
pub type VehicleParams = dynamics::VehicleParams<f64>;
pub type Track = track::Track<f64>;
pub type TrackPoint = track::TrackPoint<f64>;
pub type PortionSpec = track::PortionSpec<f64>;
