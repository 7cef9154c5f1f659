//! The autoregressive frame-selection scorer.
//!
//! Each frame's tokens run through a small tanh recurrence; the last hidden
//! state is the frame embedding, from which key and value heads project.
//! A selection state starts from the query and is advanced by the value of
//! every picked frame. At each step the state's query projection is scored
//! against all keys, already-picked frames are masked, and the next frame
//! is drawn from the softmax.

pub mod checkpoint;
pub mod gradient;
pub mod params;
pub mod rollout;

pub use gradient::{objective_and_gradient, objective_value, EntropyMode, GroupBatch, ObjectiveOutput};
pub use params::{PolicyDims, PolicyParams};
pub use rollout::{
    frame_embeddings, sample_subsets, step_distribution, subset_logprob, CandidateSubset, FrameEmbeddings,
    StepDistribution,
};
