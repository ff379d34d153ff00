//! Infilling prompt transformation and serving simulation.
//!
//! The gateway rewrites fill-in-the-middle requests so that consecutive
//! requests from one user share a token prefix, which lets a prefix KV cache
//! reuse work across rounds. The crate also holds the tokenizer, a
//! block-granular prefix cache, a closed-loop serving simulator, a workload
//! generator and training-data processing.

pub mod config;
pub mod corpus;
pub mod fragment;
pub mod gateway;
pub mod kv_cache;
pub mod prompt;
pub mod report;
pub mod service;
pub mod sim;
pub mod tokenizer;
pub mod workload;
