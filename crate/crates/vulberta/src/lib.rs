//! VulBERTa-style pipeline for C/C++ vulnerability detection: a code-aware
//! tokenization stack (lexer, BPE with pre-defined tokens, encoder), a small
//! RoBERTa-style masked-language-model pre-trainer, MLP and TextCNN
//! fine-tuning heads, and an evaluation metrics engine.

pub mod error;
pub mod heads;
pub mod ingest;
pub mod lexer;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
