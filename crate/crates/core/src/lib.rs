//! Online unweaving of clip-feature streams into activity threads.
//!
//! Clips arrive one at a time; a learned controller compares each against a
//! bank of per-thread states and either extends an existing thread or opens a
//! new one. The crate also holds the synthetic-story generator used for
//! self-supervised pretraining, the teacher-forced trainer, the baselines and
//! the evaluation metrics. It needs only `alloc`.

#![no_std]
// NaN-rejecting `!(x > 0.0)` checks and index loops over matrices are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod bank;
pub mod baselines;
pub mod controller;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod story;
pub mod storygen;
pub mod tensor;
pub mod train;

pub use bank::{ThreadBank, ThreadUpdater};
pub use controller::{
    decide, softmax_with_temperature, unweave_online, update_thread, ControllerKind,
    DecisionDistribution, Model, ModelConfig, UpdateKind,
};
pub use error::{Error, Result};
pub use story::{canonicalize, partition_of, scenario_of, ClipFeature, Provenance, Scenario, Story, ThreadAssignment};
pub use tensor::Tensor;
