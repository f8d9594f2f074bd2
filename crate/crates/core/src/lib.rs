//! Integer-only LSTM inference.

pub mod attention;
pub mod error;
pub mod exact;
pub mod instrument;
pub mod linear;
pub mod lstm;
pub mod madnorm;
pub mod pwl;
pub mod quant;
pub mod runtime;

pub use error::{IrnnError, Result};
