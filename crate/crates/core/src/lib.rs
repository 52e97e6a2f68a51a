//! Masked autoencoder over discrete mel and attribute tokens with learned
//! continuous residual tokens, trained on a synthetic factorized corpus.

mod binio;
pub mod club;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
