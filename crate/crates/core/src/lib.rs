//! Distributionally robust system level synthesis from trajectory data under
//! bounded model mismatch.

pub mod batch;
pub mod bounds;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod lp;
pub mod ot;
pub mod sls;
pub mod synthesis;
pub mod validation;

pub use error::{Error, Result};
