//! Geometry-aware spatio-temporal corner detection for static-camera video.
//!
//! The crate is `no_std` + `alloc` with the default `std` feature disabled.
//! It contains a small reverse-mode autodiff engine, the corner network with
//! its geometry prior, training losses, the box decoder, a synthetic scene
//! generator and detection metrics. File formats and the command line live in
//! the `gastkit` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod bbox;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use bbox::{iou, BBox};
pub use error::{Error, Result};
pub use model::{CornerKind, FrameSlot, GastNet, ModelConfig};
pub use params::ParamStore;
pub use real::Real;
pub use tensor::Tensor;
