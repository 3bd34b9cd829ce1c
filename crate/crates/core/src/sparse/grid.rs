use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};

use crate::tensor::Tensor;

use super::SparseError;

pub type Coord = [i32; 3];

/// Multiply-xorshift hasher for integer voxel keys.
#[derive(Default, Clone, Copy)]
pub struct CoordHasher(u64);

impl Hasher for CoordHasher {
    fn finish(&self) -> u64 {
        let mut z = self.0;
        z ^= z >> 33;
        z = z.wrapping_mul(0xff51_afd7_ed55_8ccd);
        z ^= z >> 33;
        z
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.write_u64(b as u64);
        }
    }

    fn write_i32(&mut self, i: i32) {
        self.write_u64(i as u32 as u64);
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = (self.0.rotate_left(21) ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }

    fn write_usize(&mut self, v: usize) {
        self.write_u64(v as u64);
    }
}

pub type CoordMap<V> = HashMap<Coord, V, BuildHasherDefault<CoordHasher>>;

/// Occupied voxels with one feature row each.
#[derive(Debug, Clone)]
pub struct SparseVoxelGrid {
    coords: Vec<Coord>,
    features: Tensor,
    voxel_size: f64,
    index: CoordMap<usize>,
}

impl PartialEq for SparseVoxelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.coords == other.coords && self.features == other.features && self.voxel_size == other.voxel_size
    }
}

impl SparseVoxelGrid {
    pub fn new(coords: Vec<Coord>, features: Tensor, voxel_size: f64) -> Result<Self, SparseError> {
        if !(voxel_size > 0.0) {
            return Err(SparseError::VoxelSize(voxel_size));
        }
        if features.rows() != coords.len() || features.shape().len() != 2 {
            return Err(SparseError::RowMismatch {
                coords: coords.len(),
                rows: features.rows(),
            });
        }
        let mut index = CoordMap::default();
        index.reserve(coords.len());
        for (row, c) in coords.iter().enumerate() {
            if index.insert(*c, row).is_some() {
                return Err(SparseError::DuplicateCoord(*c));
            }
        }
        Ok(Self {
            coords,
            features,
            voxel_size,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn lookup(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).copied()
    }

    /// Same active set with new features.
    pub fn with_features(&self, features: Tensor) -> Result<Self, SparseError> {
        if features.rows() != self.coords.len() {
            return Err(SparseError::RowMismatch {
                coords: self.coords.len(),
                rows: features.rows(),
            });
        }
        Ok(Self {
            coords: self.coords.clone(),
            features,
            voxel_size: self.voxel_size,
            index: self.index.clone(),
        })
    }

    pub fn translated(&self, shift: Coord) -> Self {
        let coords = self
            .coords
            .iter()
            .map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]])
            .collect();
        Self::new(coords, self.features.clone(), self.voxel_size).expect("translation keeps coords unique")
    }

    /// Rows reordered by ascending coordinate.
    pub fn canonical(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.coords[i]);
        let d = self.width();
        let mut data = Vec::with_capacity(self.features.len());
        for &i in &order {
            data.extend_from_slice(self.features.row(i));
        }
        let coords = order.iter().map(|&i| self.coords[i]).collect();
        let features = Tensor::new(vec![self.len(), d], data).expect("same size");
        Self::new(coords, features, self.voxel_size).expect("canonical grid")
    }
}
