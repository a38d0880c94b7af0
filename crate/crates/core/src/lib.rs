pub mod error;
pub mod estimators;
pub mod fgn;
pub mod gaussdiag;
pub mod grid;
pub mod harness;
pub mod integrals;
pub mod io;
pub mod quad;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
