//! Simulation and verification toolkit for inhomogeneous branching Brownian
//! motion on an interval, its spine and k-spine moment machinery, the
//! Sturm-Liouville spectral data that drive it, and genealogies of
//! continuous-state branching processes through reduced processes.

pub mod bbm;
pub mod csbp;
pub mod error;
pub mod functional;
pub mod harness;
pub mod quad;
pub mod rng;
pub mod spectral;
pub mod spine;
pub mod stats;
pub mod ultrametric;

pub use error::{Error, Result};
