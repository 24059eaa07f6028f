//! Checkpoint merging toolkit: sparse reverse-KL complementary fusion,
//! five baseline merge operators, and spectral/provenance diagnostics
//! over tensor checkpoints in a flat binary container.

pub mod baselines;
pub mod checkpoint;
pub mod diagnostics;
pub mod dtype;
pub mod fusion;
pub mod linalg;
pub mod rng;
pub mod stats;

pub use checkpoint::{
    align, load_checkpoint, save_checkpoint, AlignmentReport, CheckpointError, CheckpointReader,
    CheckpointWriter, TensorEntry, TensorMap,
};
pub use dtype::DType;
pub use fusion::{
    build_mask, fuse_checkpoint, fuse_tensor, importance, iqr_threshold, reverse_kl,
    stable_softmax, FusionConfig, FusionError, TensorFusionStats, UnmatchedPolicy,
};
