//! Privacy-preserving distributed EM for Gaussian mixtures over vertically
//! partitioned data, with the centralized baseline, the cryptographic and
//! consensus primitives it is built from, and a round-based network simulator.

pub mod data_io;
pub mod em;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod paillier;
pub mod ppd_em;
pub mod ppd_inner;
pub mod ppd_sum;
pub mod protocol;
pub mod rng;
pub mod simnet;
pub mod topology;

pub use error::{Error, Result};
