//! Recursive convolutional sequence auto-encoders.
//!
//! The crate provides a small reverse-mode tensor engine ([`tensor`]), the
//! layers built on it ([`nn`]), byte/word tokenization with balanced padding
//! ([`padding`]), the byte-level auto-encoder and word-level sentence encoder
//! ([`model`]), training and evaluation ([`train`]), Integrated-Gradients
//! attribution ([`attribution`]), cosine retrieval ([`retrieval`]) and the
//! checkpoint/config/CLI layer ([`cli`]).

pub mod attribution;
pub mod cli;
pub mod error;
pub mod model;
pub mod nn;
pub mod padding;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
