//! A multigrid neural operator (MgNO) engine.
//!
//! The V-cycle of a geometric multigrid solver is written entirely as
//! multi-channel convolutions; with fixed classical stencils it is a Poisson
//! solver, with learned stencils it is the linear operator inside each layer
//! of the network. The crate also carries the hand-written reverse-mode
//! gradients, the optimizer and training loop, and a Darcy-flow data
//! generator with a finite-difference reference solver.

pub mod backend;
pub mod darcy;
pub mod error;
pub mod mgt;
pub mod multigrid;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BoundaryMode, Field, Kernel, Matrix};
