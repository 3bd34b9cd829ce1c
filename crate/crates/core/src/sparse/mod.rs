//! Hashed sparse voxel grids, submanifold convolution and grid pooling.

mod conv;
mod grid;
mod pool;

pub use conv::{build_rules, conv_forward, kernel_offsets, neighbor_lookup, submanifold_conv, SparseConvKernel};
pub use grid::{Coord, CoordHasher, CoordMap, SparseVoxelGrid};
pub use pool::{grid_pool, grid_unpool, pooling_map, PoolingMap};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("voxel size must be positive, got {0}")]
    VoxelSize(f64),
    #[error("{coords} coordinates but {rows} feature rows")]
    RowMismatch { coords: usize, rows: usize },
    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateCoord(Coord),
    #[error("kernel extent must be odd, got {0}")]
    EvenExtent(usize),
    #[error("bad kernel shape: {0}")]
    KernelShape(String),
    #[error("pool factor must be at least 2, got {0}")]
    PoolFactor(i32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
