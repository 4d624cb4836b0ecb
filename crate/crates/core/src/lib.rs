//! Desk-scale laboratory for second-stage detector training under scarce
//! positive proposals.
//!
//! The numeric core ([`geometry`], [`net`], [`rga`], [`prm`], [`metrics`])
//! is generic over [`Scalar`] (`f32` or `f64`); the synthetic data generator
//! and the experiment harness run in `f64`. Aliases for the common
//! instantiations live at the crate root.

pub mod checkpoint;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod prm;
pub mod rga;
pub mod sampler;
pub mod scalar;
pub mod seed;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BBox64 = geometry::BBox<f64>;
pub type BBox32 = geometry::BBox<f32>;
pub type Backbone64 = net::Backbone<f64>;
pub type Head64 = net::Head<f64>;
pub type Gradients64 = net::Gradients<f64>;
pub type Gradients32 = net::Gradients<f32>;
pub type PrmModel64 = prm::PrmModel<f64>;
pub type PrmModel32 = prm::PrmModel<f32>;
pub type Detection64 = metrics::Detection<f64>;
