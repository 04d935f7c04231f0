//! Core of the generalized graph-ODE simulator.
//!
//! Everything here is pure computation over `alloc` collections: a small
//! reverse-mode autodiff tape, the neural building blocks, trajectory
//! generators for Lennard-Jones and ramp-box particle systems, radius
//! neighbor search, the temporal-graph encoders, the latent ODE with its RK4
//! solver, the three training objectives, and the training / evaluation
//! loop. File formats, the command line and thread pools live in the `ggode`
//! companion crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod datagen;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub(crate) mod math;
pub mod model;
pub mod neighbors;
pub mod nn;
pub mod ode;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
