use std::rc::Rc;

use crate::tensor::Tensor;

use super::grid::{Coord, CoordMap, SparseVoxelGrid};
use super::SparseError;

/// Parent/child correspondence of one pooling step.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolingMap {
    pub factor: i32,
    /// Child row of every parent row.
    pub parent_to_child: Rc<[usize]>,
    /// Parent rows per child, ascending.
    pub children: Vec<Vec<usize>>,
}

impl PoolingMap {
    pub fn n_children(&self) -> usize {
        self.children.len()
    }
}

/// Child coordinates `floor(coord / factor)`, rows in ascending coordinate order.
pub fn pooling_map(grid: &SparseVoxelGrid, factor: i32) -> Result<(Vec<Coord>, PoolingMap), SparseError> {
    if factor < 2 {
        return Err(SparseError::PoolFactor(factor));
    }
    let parent_child: Vec<Coord> = grid
        .coords()
        .iter()
        .map(|c| [c[0].div_euclid(factor), c[1].div_euclid(factor), c[2].div_euclid(factor)])
        .collect();
    let mut child_coords = parent_child.clone();
    child_coords.sort_unstable();
    child_coords.dedup();
    let mut index = CoordMap::default();
    for (i, c) in child_coords.iter().enumerate() {
        index.insert(*c, i);
    }
    let parent_to_child: Vec<usize> = parent_child.iter().map(|c| index[c]).collect();
    let mut children = vec![Vec::new(); child_coords.len()];
    for (p, &c) in parent_to_child.iter().enumerate() {
        children[c].push(p);
    }
    Ok((
        child_coords,
        PoolingMap {
            factor,
            parent_to_child: parent_to_child.into(),
            children,
        },
    ))
}

/// Mean-pool member voxels into `floor(coord / factor)` cells.
pub fn grid_pool(grid: &SparseVoxelGrid, factor: i32) -> Result<(SparseVoxelGrid, PoolingMap), SparseError> {
    let (coords, map) = pooling_map(grid, factor)?;
    let d = grid.width();
    let mut data = vec![0.0; coords.len() * d];
    for (c, members) in map.children.iter().enumerate() {
        let row = &mut data[c * d..(c + 1) * d];
        for &p in members {
            for (o, v) in row.iter_mut().zip(grid.features().row(p)) {
                *o += v;
            }
        }
        let n = members.len() as f64;
        for o in row.iter_mut() {
            *o /= n;
        }
    }
    let features = Tensor::new(vec![coords.len(), d], data).expect("pooled size");
    let child = SparseVoxelGrid::new(coords, features, grid.voxel_size() * factor as f64)?;
    Ok((child, map))
}

/// Copy every child feature back to its parent voxels.
pub fn grid_unpool(child: &Tensor, map: &PoolingMap) -> Tensor {
    let d = child.cols();
    let mut data = Vec::with_capacity(map.parent_to_child.len() * d);
    for &c in map.parent_to_child.iter() {
        data.extend_from_slice(child.row(c));
    }
    Tensor::new(vec![map.parent_to_child.len(), d], data).expect("unpooled size")
}
