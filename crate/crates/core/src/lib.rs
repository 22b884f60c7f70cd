//! Visual-inertial odometry with a right-invariant multi-state-constraint
//! Kalman filter using point, line and vanishing-point measurements.

pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod geometry;
pub mod scalar;
pub mod simulator;
pub mod measurements;
pub mod observability;
pub mod propagation;
pub mod state;
pub mod triangulation;
pub mod update;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ImuState64 = state::ImuState<f64>;
pub type ImuState32 = state::ImuState<f32>;
pub type VioState64 = state::VioState<f64>;
pub type VioState32 = state::VioState<f32>;
pub type PluckerLine64 = geometry::PluckerLine<f64>;
pub type PluckerLine32 = geometry::PluckerLine<f32>;
pub type Estimator64 = estimator::Estimator<f64>;
pub type Estimator32 = estimator::Estimator<f32>;
