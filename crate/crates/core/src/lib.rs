#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod crossbar;
pub mod device;
pub mod network;
mod error;
pub mod quant;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
