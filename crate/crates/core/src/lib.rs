//! Recover the coupling structure of an oscillator network from a set of
//! its steady states.
//!
//! The pipeline collects steady states of a known model under varied
//! natural frequencies, fits a sigmoid-parameterised soft adjacency so that
//! every steady-state equation is satisfied, and scores the result against
//! the truth when one is available.

pub mod ansatz;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod metrics;
pub mod networks;
pub mod noise;
pub mod optimizer;
pub mod seed;

pub use error::{Error, Result};
