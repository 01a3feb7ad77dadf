//! Amortized recurrent transducers: branched encoder layers gated per frame
//! by a small recurrent arbitrator, trained against a latency-aware loss.

pub mod amortized;
pub mod cells;
pub mod compression;
pub mod harness;
pub mod latency;
pub mod optim;
mod error;
pub mod tensor;
pub mod transducer;

pub use error::{Error, Result};
