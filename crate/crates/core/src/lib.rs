//! Multilingual news classification: genre, framing and persuasion
//! techniques, trained from scratch with optional bottleneck adapters.

pub mod balance;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod inference;
pub mod model;
pub mod tensor;
pub mod textprep;
pub mod train;
pub mod translate;
pub mod util;

pub use error::{Error, Result};
