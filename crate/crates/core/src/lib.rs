//! Conditional LDDMM stochastic interpolants for shape generation.
//!
//! The crate covers the full pipeline: Chamfer-based diffeomorphic
//! registration of surface meshes ([`registration`]), training and SDE
//! sampling of a conditional drift ([`interpolant`]), transport of nested
//! hexahedral hierarchies onto generated shapes ([`transport`]) and Monte
//! Carlo statistics with hemodynamic biomarkers ([`uq`]).

pub mod autodiff;
pub mod error;
pub mod interpolant;
pub mod mesh;
pub mod nn;
pub mod registration;
pub mod transport;
pub mod uq;

pub use error::{Error, Result};
