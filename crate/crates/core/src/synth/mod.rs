//! Synthetic multi-domain scenes.
//!
//! Domains differ along three axes: color palette, sampling density
//! (with sensor noise), and completeness (view-cone occlusion). Scenes
//! are voxelized for the network, and split into grid patches for the
//! student-side pretraining corruptions.

mod augment;
mod domain;
mod io;
mod scene;
mod voxel;

pub use augment::{augment_student, partition_patches, AugmentPolicy, Augmented, Patch, PatchAugment};
pub use domain::{default_domains, validate_domains, DomainSpec, CLASS_NAMES, NUM_CLASSES};
pub use io::{load_cloud, read_cloud, save_cloud, write_cloud, CorpusManifest, SeedRange, Split};
pub use scene::{generate_scene, layout_scene, sample_layout, PointCloud, Primitive, SceneLayout, Surface, MIN_SCENE_POINTS};
pub use voxel::{point_features, voxel_coord, voxelize, voxelize_features, Reducer, Voxelized, POINT_FEATURES};

use thiserror::Error;

use crate::sparse::SparseError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("scene has {got} points, need at least {min}")]
    TooFewPoints { got: usize, min: usize },
    #[error("augmentation removed every point")]
    EmptyAugmentation,
    #[error("unknown domain {0}")]
    UnknownDomain(u32),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
