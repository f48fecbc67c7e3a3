//! Co-referential multi-document graphs (Coref-MDG) and differential
//! knowledge selection for document-grounded dialog.
//!
//! The crate is `no_std` + `alloc`. Everything here is pure computation:
//! the corpus data model, graph construction, a small reverse-mode tape over
//! dense `f64` matrices, the Res-RGAT / differential-linearization model,
//! the optimizer and training loop, and the evaluation metrics. File formats,
//! checkpoints and the command line live in the `corefdiffs` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
