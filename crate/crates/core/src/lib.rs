//! Progressive memory banks for incremental domain adaptation.
//!
//! A bidirectional RNN classifier reads from a key/value memory bank at every
//! step. When a new domain arrives the bank (and optionally the vocabulary or
//! hidden state) is expanded in place and the whole model is fine-tuned.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod ida;
pub mod layers;
pub mod membank;
pub mod model;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
