use std::rc::Rc;

use crate::tensor::{ConvRules, Graph, Tensor, Var};

use super::grid::{Coord, SparseVoxelGrid};
use super::SparseError;

/// Window offsets of an odd cubic kernel in lexicographic `(dx, dy, dz)` order.
pub fn kernel_offsets(extent: usize) -> Vec<Coord> {
    let r = (extent / 2) as i32;
    let mut out = Vec::with_capacity(extent.pow(3));
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}

fn check_extent(extent: usize) -> Result<(), SparseError> {
    if extent % 2 == 1 {
        Ok(())
    } else {
        Err(SparseError::EvenExtent(extent))
    }
}

/// Occupied neighbors of `coord` inside the centered window, as
/// `(offset_index, row)` in offset order.
pub fn neighbor_lookup(grid: &SparseVoxelGrid, coord: Coord, extent: usize) -> Result<Vec<(usize, usize)>, SparseError> {
    check_extent(extent)?;
    Ok(kernel_offsets(extent)
        .iter()
        .enumerate()
        .filter_map(|(o, d)| {
            grid.lookup(&[coord[0] + d[0], coord[1] + d[1], coord[2] + d[2]])
                .map(|row| (o, row))
        })
        .collect())
}

/// Gather plan for a submanifold convolution over `grid`'s active set.
pub fn build_rules(grid: &SparseVoxelGrid, extent: usize) -> Result<ConvRules, SparseError> {
    check_extent(extent)?;
    let offsets = kernel_offsets(extent);
    let mut per_offset = vec![Vec::new(); offsets.len()];
    for (v, c) in grid.coords().iter().enumerate() {
        for (o, d) in offsets.iter().enumerate() {
            if let Some(u) = grid.lookup(&[c[0] + d[0], c[1] + d[1], c[2] + d[2]]) {
                per_offset[o].push((v as u32, u as u32));
            }
        }
    }
    Ok(ConvRules {
        n_rows: grid.len(),
        per_offset,
    })
}

/// Plain-tensor submanifold kernel: `extent³` stacked `Din×Dout` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvKernel {
    pub extent: usize,
    pub weights: Tensor,
    pub bias: Tensor,
    pub norm: Option<(Tensor, Tensor)>,
}

impl SparseConvKernel {
    pub fn new(extent: usize, weights: Tensor, bias: Tensor, norm: Option<(Tensor, Tensor)>) -> Result<Self, SparseError> {
        check_extent(extent)?;
        let n_off = extent.pow(3);
        if weights.shape().len() != 2 || weights.rows() % n_off != 0 || bias.len() != weights.cols() {
            return Err(SparseError::KernelShape(format!(
                "weights {:?}, bias {:?} for extent {extent}",
                weights.shape(),
                bias.shape()
            )));
        }
        if let Some((g, o)) = &norm {
            if g.len() != weights.cols() || o.len() != weights.cols() {
                return Err(SparseError::KernelShape("norm width".into()));
            }
        }
        Ok(Self {
            extent,
            weights,
            bias,
            norm,
        })
    }

    pub fn din(&self) -> usize {
        self.weights.rows() / self.extent.pow(3)
    }

    pub fn dout(&self) -> usize {
        self.weights.cols()
    }
}

/// `norm(conv(x) + bias)` on a graph. `norm` is `(gain, offset)`.
pub fn conv_forward(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    norm: Option<(Var, Var)>,
    rules: Rc<ConvRules>,
) -> crate::tensor::Result<Var> {
    let y = g.sparse_conv(x, weight, rules)?;
    let y = g.add_row(y, bias)?;
    match norm {
        Some((gain, offset)) => g.layer_norm(y, gain, offset),
        None => Ok(y),
    }
}

/// Submanifold convolution: output occupies exactly the input's active sites.
pub fn submanifold_conv(grid: &SparseVoxelGrid, kernel: &SparseConvKernel) -> Result<SparseVoxelGrid, SparseError> {
    if kernel.din() != grid.width() {
        return Err(SparseError::KernelShape(format!(
            "kernel expects width {}, grid has {}",
            kernel.din(),
            grid.width()
        )));
    }
    let rules = Rc::new(build_rules(grid, kernel.extent)?);
    let mut g = Graph::new();
    let x = g.constant(grid.features().clone());
    let w = g.constant(kernel.weights.clone());
    let b = g.constant(kernel.bias.clone());
    let norm = kernel
        .norm
        .as_ref()
        .map(|(gain, off)| (g.constant(gain.clone()), g.constant(off.clone())));
    let y = conv_forward(&mut g, x, w, b, norm, rules)?;
    grid.with_features(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(coords: Vec<Coord>, rows: Vec<Vec<f64>>) -> SparseVoxelGrid {
        SparseVoxelGrid::new(coords, Tensor::from_rows(&rows).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn isolated_voxel_sees_only_itself() {
        let g = grid(vec![[0, 0, 0], [5, 5, 5]], vec![vec![1.0], vec![2.0]]);
        assert_eq!(neighbor_lookup(&g, [0, 0, 0], 3).unwrap(), vec![(13, 0)]);
    }

    #[test]
    fn full_block_center_has_27_hits() {
        let coords = kernel_offsets(3);
        let rows = vec![vec![0.0]; 27];
        let g = grid(coords, rows);
        assert_eq!(neighbor_lookup(&g, [0, 0, 0], 3).unwrap().len(), 27);
    }

    #[test]
    fn even_extent_rejected() {
        let g = grid(vec![[0, 0, 0]], vec![vec![1.0]]);
        assert!(matches!(neighbor_lookup(&g, [0, 0, 0], 2), Err(SparseError::EvenExtent(2))));
    }

    #[test]
    fn identity_center_kernel_is_identity() {
        let g = grid(vec![[3, -1, 2]], vec![vec![0.5, -1.5]]);
        let mut w = Tensor::zeros(&[27 * 2, 2]);
        // center offset is index 13
        w.data_mut()[13 * 4] = 1.0;
        w.data_mut()[13 * 4 + 3] = 1.0;
        let k = SparseConvKernel::new(3, w, Tensor::zeros(&[2]), None).unwrap();
        let out = submanifold_conv(&g, &k).unwrap();
        assert_eq!(out.features(), g.features());
    }

    #[test]
    fn all_ones_kernel_sums_adjacent_pair() {
        let g = grid(vec![[0, 0, 0], [1, 0, 0]], vec![vec![1.5], vec![10.0]]);
        let k = SparseConvKernel::new(3, Tensor::full(&[27, 1], 1.0), Tensor::zeros(&[1]), None).unwrap();
        let out = submanifold_conv(&g, &k).unwrap();
        assert_eq!(out.features().data(), &[11.5, 11.5]);
    }

}
