//! Rigid motion simulation and autofocus compensation for circular
//! cone-beam CT.

pub mod consistency;
pub mod error;
pub mod geometry;
pub mod io;
pub mod iqm;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod phantom;
pub mod recon;

pub use error::{Error, Result};
