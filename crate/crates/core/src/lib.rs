#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluators;
pub mod guidance;
pub mod harness;
pub mod output;
pub mod world;

pub use diffusion::{Condition, LatentState, NoiseSchedule, Sampler, ScheduleFamily};
pub use error::{Error, Result};
pub use world::{MixtureWorld, WorldSpec};
pub use evaluators::{Evaluator, EvaluatorKind};
pub use guidance::{GuidanceCandidateSet, GuidancePolicy, NfeCounter, ScheduleTrace, Testbed};
