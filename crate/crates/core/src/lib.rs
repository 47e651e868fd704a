//! Networked state estimation over strongly connected sensor networks with
//! residual-based sensor fault detection, isolation and observability recovery.

pub mod digraph;
pub mod error;
pub mod estimator;
pub mod fdi;
pub mod gain;
pub mod linalg;
pub mod network;
pub mod observability;
pub mod scenario;
pub mod system;

pub use error::{Error, Result};
