//! Point-tube video action recognition on LiDAR point-cloud clips.
//!
//! The crate is organized around a small dense-tensor autodiff substrate
//! ([`tensor`]), geometric sampling and neighborhood machinery ([`sampling`],
//! [`neighborhood`]), the dual-branch recognizer model ([`model`]), a
//! procedural robotic-view clip generator ([`synthdata`]), and the training
//! and evaluation drivers ([`trainer`], [`eval`]). [`config`] holds the
//! TOML run-configuration schema shared with the `ptv` binary.

pub mod config;
pub mod eval;
pub mod model;
pub mod neighborhood;
pub mod sampling;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::Error;

/// Scalar type used by every numeric path. `f32` by default; the `f64`
/// feature promotes it for high-precision gradient checks. On-disk formats
/// are always little-endian `f32` regardless of this setting.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;

pub type Result<T> = std::result::Result<T, Error>;
