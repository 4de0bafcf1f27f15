//! Numerical laboratory for gravity-modified Schrödinger dynamics.

pub mod ensemble;
pub mod gaussian;
pub mod grid;
pub mod model;
pub mod noise;
pub mod output;
pub mod quadrature;
pub mod record;
pub mod variant;
pub mod verify;

pub use record::{Observable, TrajectoryRecord};
pub use variant::{Units, Variant};
