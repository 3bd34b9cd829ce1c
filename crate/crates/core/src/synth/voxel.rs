use std::collections::BTreeMap;

use crate::sparse::{Coord, SparseVoxelGrid};
use crate::tensor::Tensor;

use super::scene::PointCloud;
use super::SynthError;

/// Per-point input attributes: color (3) then position (3).
pub const POINT_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reducer {
    #[default]
    Mean,
    Max,
}

/// Occupied voxels plus the voxel row of every input point.
#[derive(Debug, Clone)]
pub struct Voxelized {
    pub grid: SparseVoxelGrid,
    pub point_to_voxel: Vec<usize>,
}

pub fn point_features(cloud: &PointCloud) -> Tensor {
    let mut data = Vec::with_capacity(cloud.len() * POINT_FEATURES);
    for (c, p) in cloud.colors.iter().zip(&cloud.positions) {
        data.extend_from_slice(c);
        data.extend_from_slice(p);
    }
    Tensor::new(vec![cloud.len(), POINT_FEATURES], data).expect("feature size")
}

pub fn voxel_coord(p: &[f64; 3], voxel_size: f64) -> Coord {
    [
        (p[0] / voxel_size).floor() as i32,
        (p[1] / voxel_size).floor() as i32,
        (p[2] / voxel_size).floor() as i32,
    ]
}

pub fn voxelize(cloud: &PointCloud, voxel_size: f64, reducer: Reducer) -> Result<Voxelized, SynthError> {
    voxelize_features(&cloud.positions, &point_features(cloud), voxel_size, reducer)
}

/// Rows come out in ascending coordinate order. Each channel is reduced
/// over its sorted member values, so the result is independent of the
/// input point order bit for bit.
pub fn voxelize_features(
    positions: &[[f64; 3]],
    features: &Tensor,
    voxel_size: f64,
    reducer: Reducer,
) -> Result<Voxelized, SynthError> {
    if !(voxel_size > 0.0) {
        return Err(SynthError::InvalidSpec(format!("voxel size {voxel_size}")));
    }
    let mut members: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
    for (i, p) in positions.iter().enumerate() {
        members.entry(voxel_coord(p, voxel_size)).or_default().push(i);
    }
    let d = features.cols();
    let mut coords = Vec::with_capacity(members.len());
    let mut data = Vec::with_capacity(members.len() * d);
    let mut point_to_voxel = vec![0; positions.len()];
    let mut scratch = Vec::new();
    for (row, (c, idx)) in members.iter().enumerate() {
        coords.push(*c);
        for &i in idx {
            point_to_voxel[i] = row;
        }
        for ch in 0..d {
            scratch.clear();
            scratch.extend(idx.iter().map(|&i| features.get2(i, ch)));
            scratch.sort_by(f64::total_cmp);
            let v = match reducer {
                Reducer::Mean => scratch.iter().sum::<f64>() / scratch.len() as f64,
                Reducer::Max => *scratch.last().expect("nonempty voxel"),
            };
            data.push(v);
        }
    }
    let features = Tensor::new(vec![coords.len(), d], data)?;
    let grid = SparseVoxelGrid::new(coords, features, voxel_size)?;
    Ok(Voxelized { grid, point_to_voxel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_in_one_voxel_average() {
        let pos = [[0.1, 0.1, 0.1], [0.2, 0.3, 0.4]];
        let f = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let v = voxelize_features(&pos, &f, 1.0, Reducer::Mean).unwrap();
        assert_eq!(v.grid.len(), 1);
        assert_eq!(v.grid.features().row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(v.point_to_voxel, vec![0, 0]);
    }

    #[test]
    fn unit_grid_points_map_one_to_one() {
        let pos: Vec<[f64; 3]> = (0..5).map(|i| [i as f64 + 0.5, 0.5, 2.5]).collect();
        let f = Tensor::zeros(&[5, 1]);
        let v = voxelize_features(&pos, &f, 1.0, Reducer::Mean).unwrap();
        assert_eq!(v.grid.len(), 5);
        assert_eq!(v.point_to_voxel, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn max_reducer_takes_channel_max() {
        let pos = [[0.1, 0.1, 0.1], [0.2, 0.3, 0.4]];
        let f = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.0, 3.0]]).unwrap();
        let v = voxelize_features(&pos, &f, 1.0, Reducer::Max).unwrap();
        assert_eq!(v.grid.features().row(0), &[1.0, 3.0]);
    }
}
