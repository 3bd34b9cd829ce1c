//! Domain-representation mixture-of-experts for multi-domain point clouds.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: fp64 arrays, reverse-mode tape, AdamW.
//! - [`synth`]: synthetic multi-domain scenes, voxelization, student augmentations.
//! - [`sparse`]: hashed voxel grids, submanifold convolution, grid pooling.
//! - [`net`]: layer building blocks and the sparse U-Net backbone.
//! - [`pretrain`]: EMA teacher-student distillation.
//! - [`checkpoint`]: parameter checkpoint files.
//! - [`moe`]: the mixture layer (frozen representation expert, domain-guided
//!   spatial routing, entropy-controlled allocation, balance loss).
//! - [`train`]: joint training, fine-tuning, metrics, utilization analysis.

pub mod checkpoint;
pub mod moe;
pub mod rng;
pub mod net;
pub mod pretrain;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod train;
