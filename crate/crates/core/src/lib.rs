//! Uplink simulator for cell-free massive MIMO with multi-antenna access
//! points and user equipments over Weichselberger Rayleigh fading.

pub mod channel;
pub mod closedform;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod receive;
pub mod rng;
pub mod scenario;
pub mod snapshot;
pub mod wmmse;

pub use error::{Error, Result};
