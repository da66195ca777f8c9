//! Contrastive prompt ensembles on a frozen visual encoder.
//!
//! The crate trains one visual prompt per domain factor with contrastive
//! objectives, fuses the prompted embeddings through a cosine-guided attention
//! ensemble, and learns navigation policies that adapt zero-shot across
//! procedurally generated visual domains.

pub mod config;
pub mod contrast;
pub mod encoder;
pub mod ensemble;
pub mod optim;
pub mod error;
pub mod harness;
pub mod pipeline;
pub mod policy;
pub mod prompt;
pub mod rng;
pub mod semantic;
pub mod tape;
pub mod tensor;
pub mod world;



pub use error::{ConpeError, Result};
