//! Path-space free energies of stopped diffusions via least-squares Monte Carlo
//! for the associated FBSDE, with the fitted value function reused as a feedback
//! control for importance sampling of rare exit events.

pub mod basis;
pub mod control;
pub mod error;
pub mod harness;
pub mod lsmc;
pub mod model;
pub mod pde;
pub mod sde;

pub use error::{Error, Result};
