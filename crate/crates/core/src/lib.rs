//! Knowledge tracing as next-token prediction.
//!
//! Student interaction histories are rendered into tagged instruction text,
//! tokenized with atomic outcome tokens, and fed to a small decoder-only
//! transformer that is fine-tuned through low-rank adapters under a loss that
//! only counts the `Correct`/`Incorrect` positions. A DKT (LSTM) baseline, a
//! ground-truth student simulator and the evaluation protocols live alongside.
//!
//! The crate is `no_std` + `alloc`; file formats, checkpoints and the command
//! line live in the `ntkt` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod data;
pub mod dkt;
pub mod error;
pub mod eval;
pub mod nn;
pub mod real;
pub mod rng;
pub mod serializer;
pub mod sim;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
