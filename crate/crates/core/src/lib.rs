//! A photo-grounded reminiscence dialogue engine.
//!
//! The crate bundles everything a session needs: a small reverse-mode
//! differentiation stack ([`autodiff`], [`nn`]), an attention LSTM that asks
//! questions about a photo's feature grid ([`vqg`]), a bidirectional-GRU
//! seq2seq model that comments on answers ([`chatbot`]), Adam training and
//! checkpoints ([`train`], [`checkpoint`]), BLEU scoring ([`bleu`]), the
//! session state machine ([`dialogue`]) and an HTTP chat service
//! ([`service`]).

pub mod autodiff;
pub mod bleu;
pub mod chatbot;
pub mod cli;
pub mod checkpoint;
pub mod data;
pub mod dialogue;
pub mod error;
pub mod nn;
pub mod service;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod vqg;

pub use error::{Error, Result};
