//! Physics-informed networks coupled with neural oscillators for
//! extrapolating time-dependent PDE solutions past their training window.
//!
//! The pipeline: a tanh MLP is trained on PDE residual and initial/boundary
//! mismatch over the training hull ([`pinn`]); its predictions on a uniform
//! space-time grid become a sequence of spatial profiles ([`grid`]); a
//! recurrent cell ([`oscillator`]) learns the map between consecutive
//! profiles and is rolled out autoregressively into the unseen time window,
//! where it is scored against high-accuracy references ([`reference`],
//! [`metrics`]).

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod grid;
pub mod jet;
pub mod metrics;
pub mod optim;
pub mod oscillator;
pub mod params;
pub mod pde;
pub mod pinn;
pub mod reference;
pub mod tape;

pub use array::Array;
pub use error::{Error, Result};
