use std::rc::Rc;

use crate::sparse::{build_rules, pooling_map, PoolingMap, SparseError, SparseVoxelGrid};
use crate::synth::{voxelize, PointCloud, Reducer, SynthError};
use crate::tensor::{ConvRules, Tensor};

/// Active set of one resolution level and its convolution plan.
#[derive(Debug, Clone)]
pub struct Level {
    pub grid: SparseVoxelGrid,
    pub rules: Rc<ConvRules>,
    /// Map from this level into the next coarser one.
    pub pool: Option<PoolingMap>,
}

/// A voxelized scene with its multi-resolution geometry, ready for the network.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub domain_id: u32,
    /// Level-0 voxel features.
    pub features: Tensor,
    pub levels: Vec<Level>,
    pub point_to_voxel: Rc<[usize]>,
    pub labels: Rc<[usize]>,
}

impl SceneInput {
    pub fn n_points(&self) -> usize {
        self.point_to_voxel.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometrySpec {
    pub voxel_size: f64,
    pub levels: usize,
    pub extent: usize,
    pub pool_factor: i32,
}

fn level_of(grid: SparseVoxelGrid, extent: usize) -> Result<Level, SparseError> {
    let rules = Rc::new(build_rules(&grid, extent)?);
    Ok(Level { grid, rules, pool: None })
}

pub fn prepare_scene(cloud: &PointCloud, spec: &GeometrySpec) -> Result<SceneInput, SynthError> {
    let vox = voxelize(cloud, spec.voxel_size, Reducer::Mean)?;
    let features = vox.grid.features().clone();
    let mut levels = Vec::with_capacity(spec.levels);
    let base = vox.grid.with_features(Tensor::zeros(&[vox.grid.len(), 0]))?;
    levels.push(level_of(base, spec.extent)?);
    for _ in 1..spec.levels {
        let prev = levels.last_mut().expect("level 0 exists");
        let (coords, map) = pooling_map(&prev.grid, spec.pool_factor)?;
        let size = prev.grid.voxel_size() * spec.pool_factor as f64;
        prev.pool = Some(map);
        let n = coords.len();
        let grid = SparseVoxelGrid::new(coords, Tensor::zeros(&[n, 0]), size)?;
        levels.push(level_of(grid, spec.extent)?);
    }
    Ok(SceneInput {
        domain_id: cloud.domain_id,
        features,
        levels,
        point_to_voxel: vox.point_to_voxel.into(),
        labels: cloud.labels.iter().map(|&l| l as usize).collect(),
    })
}
