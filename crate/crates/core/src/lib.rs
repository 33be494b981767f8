//! Modular diffusion policies for offline RL: guidance modules trained on
//! offline data, diffusion actors, training regimens that decouple the two,
//! and the evaluation statistics used to compare them.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod nn;
pub mod pipelines;
pub mod policy;
pub mod rng;
pub mod schedule;
pub mod stats;

mod codec;

pub use checkpoint::{compose_modules, load_checkpoint, save_checkpoint, HybridAgent, Module, ModuleKind};
pub use config::{Regimen, TrainConfig};
pub use dataset::{generate_dataset, OfflineDataset, Tier, Transition};
pub use envs::{ActionBox, ToyEnv};
pub use error::{Error, Result};
pub use eval::{evaluate_checkpoint, EvalReport};
pub use guidance::{pretrain_guidance, GuidanceConfig, GuidanceHandle, GuidanceKind};
pub use nn::{Activation, Mlp};
pub use pipelines::{train, RunOutput};
pub use policy::{Algorithm, DiffusionPolicy, LossBundle, PolicyConfig, QSource, SamplerMode};
pub use schedule::NoiseSchedule;
