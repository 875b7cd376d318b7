//! flowlab-core: a desk-scale laboratory for rectified-flow generative
//! modeling — flow-matching training, multimodal rotary position embeddings,
//! ODE/SDE samplers with exact Gaussian transition densities, preference
//! optimization (DPO and GRPO), toy tasks, and a bounded producer-consumer
//! data pipeline. Everything runs in 64-bit floats with hand-derived
//! reverse-mode gradients so finite-difference checks are exact to roundoff.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod flow;
pub mod graph;
pub mod net;
pub mod pipeline;
pub mod positional;
pub mod preference;
pub mod rng;
pub mod sampler;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use config::{RunConfig, TaskKind};
pub use error::{Error, Result};
pub use flow::{fm_loss, interpolate, sample_timestep, FlowSample, TimestepDist};
pub use graph::{Graph, NodeId};
pub use net::{Condition, Model, ModelConfig, NetInput, ParamSet};
pub use pipeline::{BucketKey, Pipeline, PipelineConfig, Resequencer, WorkItem};
pub use positional::{PositionId, RopeConfig, RopeTable};
pub use preference::{dpo_loss, group_advantages, grpo_objective, Group, PreferencePair, RLConfig};
pub use rng::{derive_rng, seed_rng, Rng};
pub use sampler::{
    sample_trajectory, step_kl, transition_logprob, NoiseSchedule, Trajectory, TIME_FLOOR,
};
pub use tasks::{render_glyph, EditOp, GlyphSpec, MixtureSpec};
pub use tensor::Tensor;
pub use train::{Adam, OptimizerConfig};
