//! Numerical laboratory for linear knowledge distillation.
//!
//! A linear student is trained on the soft labels `σ(w*ᵀx)` of a linear
//! teacher. The crate provides the distillation objective and its
//! closed-form minimiser, gradient-descent trainers for shallow and deep
//! (factorised) students, transfer-risk estimates and bounds, and the
//! experiment pipelines built on them.
//!
//! The numerical core is generic over the scalar type ([`Real`], implemented
//! for `f32` and `f64`); samplers, bounds and experiments work in `f64`. The
//! aliases below fix the default precision.

pub mod bounds;
pub mod distill;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tasks;
pub mod trainers;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;

/// Column vector in double precision.
pub type Vector = nalgebra::DVector<f64>;
/// Data matrix in double precision; inputs are columns.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Column vector in single precision.
pub type Vector32 = nalgebra::DVector<f32>;
/// Data matrix in single precision.
pub type Matrix32 = nalgebra::DMatrix<f32>;

/// Transfer set in double precision.
pub type TransferSet = tasks::TransferSet<f64>;
/// Transfer set in single precision.
pub type TransferSet32 = tasks::TransferSet<f32>;
/// Deep linear student in double precision.
pub type FactorStack = trainers::FactorStack<f64>;
/// Deep linear student in single precision.
pub type FactorStack32 = trainers::FactorStack<f32>;
/// Column span in double precision.
pub type ColumnSpan = geometry::ColumnSpan<f64>;
