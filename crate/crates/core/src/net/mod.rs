//! Layer building blocks and the sparse U-Net backbone shared by
//! pretraining and the mixture model.

mod backbone;
mod geometry;
mod layers;

pub use backbone::{Backbone, BackboneConfig, Block, BlockRef, FfnHook, NoHook, Stage};
pub use geometry::{prepare_scene, GeometrySpec, Level, SceneInput};
pub use layers::{ffn_dims, Linear, Mlp, Norm, SparseConvLayer};
