//! Desk-scale PET simulation, reconstruction and evaluation toolkit.
//!
//! The crate covers the full loop of a small emission-tomography study:
//! dynamic ellipsoid phantoms with compartment-model kinetics, a sparse
//! parallel-beam projector, Poisson acquisition with uniform background,
//! classic EM reconstructions, a constrained reconstruction that represents
//! the image as the output of a convolutional network, and a contrast
//! recovery versus background noise evaluation harness.
//!
//! Everything is deterministic: random streams are derived from a master
//! seed, and parallel code only uses patterns whose results are independent
//! of worker count.

pub mod acquisition;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod plot;
pub mod projector;
pub mod recon;
pub mod rng;
pub mod sinogram;
pub mod volume;

pub use error::{Error, Result};
