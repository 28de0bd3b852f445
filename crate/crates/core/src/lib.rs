//! Streaming dyadic audio-to-motion generation.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernel`]: dense tensors, reverse-mode differentiation, attention
//!   masks, RoPE, seeded randomness and an AdamW optimizer.
//! - [`world`]: a synthetic dyadic world with a known audio-to-motion oracle
//!   and its binary dataset format.
//! - [`encoder`]: the lookahead-bounded causal audio encoder with teacher
//!   pretraining and student distillation.
//! - [`generator`]: the autoregressive backbone, flow-matching head and the
//!   training objective.
//! - [`engine`]: guidance, the Euler sampler, offline generation and the
//!   packet-driven streaming scheduler with latency traces.
//! - [`metrics`]: sync proxy, Fréchet distance, variance, cluster entropy,
//!   drift and MSE.
//! - [`checkpoint`], [`config`] and [`experiments`]: persistence, run
//!   configuration and the ablation drivers used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod kernel;
pub mod metrics;
pub mod world;

pub use error::{Error, Result};
