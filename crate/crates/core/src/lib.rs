//! Desk-scale reinforcement learning for autoregressive token policies.
//!
//! The crate bundles a small reverse-mode autodiff engine, a synthetic
//! audio/text token world, an attention sequence policy, GRPO and DiffRO
//! losses, rule-based ASR/TTS rewards, an orchestrating trainer, and an
//! analytic simulator of an alternating-device RL pipeline.

pub mod autodiff;
pub mod seed;
pub mod rewards;
pub mod world;
pub mod optim;
pub mod policy;
pub mod grpo;
pub mod diffro;
pub mod trainer;
pub mod checkpoint;
pub mod pipeline;
pub mod cli;
