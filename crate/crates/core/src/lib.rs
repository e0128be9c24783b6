//! Deterministic generate-then-select trajectory planning on a synthetic
//! 2-D driving micro-world.
//!
//! The pipeline renders bird's-eye-view features from a seeded simulator,
//! injects anchor-conditioned action intents into the grid, rolls the scene
//! forward with a Transformer–Mamba–Transformer world model, decodes refined
//! trajectory candidates, and selects among them with a stub language-model
//! critic trained against a rule-based metric oracle.

pub mod anchors;
pub mod error;
pub mod fatg;
pub mod metrics;
pub mod microworld;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vloe;

pub use error::{CoreError, Result};
pub use tensor::{Init, ParamStore, Tape, Tensor, Var};
