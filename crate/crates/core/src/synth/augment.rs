use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::sparse::Coord;

use super::scene::PointCloud;
use super::voxel::voxel_coord;
use super::SynthError;

/// Grid cell of the cloud and the points inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub coord: Coord,
    pub members: Vec<usize>,
}

/// Partition by `floor((position − min_corner) / patch_extent)`; patches
/// ordered by cell coordinate.
pub fn partition_patches(cloud: &PointCloud, patch_extent_m: f64) -> Result<Vec<Patch>, SynthError> {
    if !(patch_extent_m > 0.0) {
        return Err(SynthError::InvalidSpec(format!("patch extent {patch_extent_m}")));
    }
    let mut lo = [f64::INFINITY; 3];
    for p in &cloud.positions {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
        }
    }
    let mut cells: BTreeMap<Coord, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        let rel = [p[0] - lo[0], p[1] - lo[1], p[2] - lo[2]];
        cells.entry(voxel_coord(&rel, patch_extent_m)).or_default().push(i);
    }
    Ok(cells.into_iter().map(|(coord, members)| Patch { coord, members }).collect())
}

/// Student-view corruption: per-patch color blackout and point dropout,
/// plus whole-patch masking on a cosine curriculum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub color_drop_ratio: (f64, f64),
    pub color_drop_prob: f64,
    pub point_drop_ratio: (f64, f64),
    pub point_drop_prob: f64,
    pub mask_lo: f64,
    pub mask_hi: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            color_drop_ratio: (0.0, 0.6),
            color_drop_prob: 0.5,
            point_drop_ratio: (0.0, 0.6),
            point_drop_prob: 0.5,
            mask_lo: 0.1,
            mask_hi: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Identity policy.
    pub fn none() -> Self {
        Self {
            color_drop_ratio: (0.0, 0.0),
            color_drop_prob: 0.0,
            point_drop_ratio: (0.0, 0.0),
            point_drop_prob: 0.0,
            mask_lo: 0.0,
            mask_hi: 0.0,
        }
    }

    /// Masked patch fraction at training progress `t ∈ [0,1]`.
    pub fn mask_fraction(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        self.mask_lo + (self.mask_hi - self.mask_lo) * (1.0 - (PI * t).cos()) / 2.0
    }
}

/// What happened to one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchAugment {
    pub masked: bool,
    pub color_ratio: f64,
    pub drop_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub cloud: PointCloud,
    /// Source index in the input cloud of every surviving point.
    pub source: Vec<usize>,
    pub patches: Vec<PatchAugment>,
}

pub fn augment_student(
    cloud: &PointCloud,
    patches: &[Patch],
    policy: &AugmentPolicy,
    epoch_progress: f64,
    seed: u64,
) -> Result<Augmented, SynthError> {
    let mut rng = rng::stream(seed, &[rng::tag("augment"), cloud.domain_id as u64]);
    let n_patches = patches.len();
    let frac = policy.mask_fraction(epoch_progress);
    // never mask every patch
    let n_mask = ((frac * n_patches as f64).round() as usize).min(n_patches.saturating_sub(1));
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut rng);
    let mut masked = vec![false; n_patches];
    for &p in &order[..n_mask] {
        masked[p] = true;
    }

    let sample_ratio = |rng: &mut rng::Rng, prob: f64, (lo, hi): (f64, f64)| -> f64 {
        if prob > 0.0 && rng.random::<f64>() < prob {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        } else {
            0.0
        }
    };

    let mut keep = vec![false; cloud.len()];
    let mut black = vec![false; cloud.len()];
    let mut report = Vec::with_capacity(n_patches);
    for (pi, patch) in patches.iter().enumerate() {
        let color_ratio = sample_ratio(&mut rng, policy.color_drop_prob, policy.color_drop_ratio);
        let drop_ratio = sample_ratio(&mut rng, policy.point_drop_prob, policy.point_drop_ratio);
        for &i in &patch.members {
            let blacken = color_ratio > 0.0 && rng.random::<f64>() < color_ratio;
            let dropped = drop_ratio > 0.0 && rng.random::<f64>() < drop_ratio;
            black[i] = blacken;
            keep[i] = !masked[pi] && !dropped;
        }
        report.push(PatchAugment {
            masked: masked[pi],
            color_ratio,
            drop_ratio,
        });
    }
    let source: Vec<usize> = (0..cloud.len()).filter(|&i| keep[i]).collect();
    if source.is_empty() {
        return Err(SynthError::EmptyAugmentation);
    }
    let mut out = cloud.select(&source);
    for (k, &i) in source.iter().enumerate() {
        if black[i] {
            out.colors[k] = [0.0; 3];
        }
    }
    Ok(Augmented {
        cloud: out,
        source,
        patches: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_domains, generate_scene};

    #[test]
    fn single_point_single_patch() {
        let c = PointCloud {
            positions: vec![[0.3, 0.2, 0.1]],
            colors: vec![[0.1; 3]],
            labels: vec![0],
            domain_id: 0,
        };
        let p = partition_patches(&c, 0.5).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].members, vec![0]);
    }

    #[test]
    fn huge_patch_covers_scene() {
        let c = generate_scene(&default_domains()[0], 1).unwrap();
        let p = partition_patches(&c, 100.0).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].members.len(), c.len());
    }

    #[test]
    fn identity_policy_is_identity() {
        let c = generate_scene(&default_domains()[2], 4).unwrap();
        let p = partition_patches(&c, 0.5).unwrap();
        let a = augment_student(&c, &p, &AugmentPolicy::none(), 0.3, 9).unwrap();
        assert_eq!(a.cloud, c);
    }

    #[test]
    fn mask_schedule_endpoints_exact() {
        let pol = AugmentPolicy::default();
        assert_eq!(pol.mask_fraction(0.0), pol.mask_lo);
        assert_eq!(pol.mask_fraction(1.0), pol.mask_hi);
    }

    #[test]
    fn full_color_drop_blackens_patch() {
        let c = generate_scene(&default_domains()[0], 2).unwrap();
        let p = partition_patches(&c, 0.5).unwrap();
        let pol = AugmentPolicy {
            color_drop_ratio: (1.0, 1.0),
            color_drop_prob: 1.0,
            ..AugmentPolicy::none()
        };
        let a = augment_student(&c, &p, &pol, 0.0, 1).unwrap();
        assert!(a.cloud.colors.iter().all(|c| *c == [0.0; 3]));
    }

    #[test]
    fn dropping_everything_is_an_error() {
        let c = generate_scene(&default_domains()[0], 2).unwrap();
        let p = partition_patches(&c, 0.5).unwrap();
        let pol = AugmentPolicy {
            point_drop_ratio: (1.0, 1.0),
            point_drop_prob: 1.0,
            ..AugmentPolicy::none()
        };
        assert!(matches!(augment_student(&c, &p, &pol, 0.0, 1), Err(SynthError::EmptyAugmentation)));
    }
}
