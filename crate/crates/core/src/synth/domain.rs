use serde::{Deserialize, Serialize};

use super::SynthError;

/// Semantic classes shared by every synthetic domain.
pub const CLASS_NAMES: [&str; 5] = ["floor", "wall", "box", "sphere", "cylinder"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

/// How one synthetic "dataset" renders its scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub name: String,
    /// Expected points per unit of surface area.
    pub density_points_per_m3: f64,
    /// Color every point is pulled toward.
    pub color_palette_bias: [f64; 3],
    /// Base color of each class; domains may disagree on them.
    pub class_colors: Vec<[f64; 3]>,
    pub noise_sigma_m: f64,
    /// Azimuthal share of the scene hidden from the virtual sensor.
    pub occlusion_fraction: f64,
    pub class_set: Vec<u32>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |why: &str| Err(SynthError::InvalidSpec(format!("domain {}: {why}", self.name)));
        if !(self.density_points_per_m3 > 0.0 && self.density_points_per_m3.is_finite()) {
            return bad("density must be positive");
        }
        if self.color_palette_bias.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("palette bias outside [0,1]");
        }
        if self.class_colors.len() != NUM_CLASSES || self.class_colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("class colors must give one RGB in [0,1] per class");
        }
        if !(self.noise_sigma_m >= 0.0) {
            return bad("noise sigma must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return bad("occlusion fraction must lie in [0,1)");
        }
        if self.class_set.is_empty() || self.class_set.iter().any(|&c| c as usize >= NUM_CLASSES) {
            return bad("class set empty or out of range");
        }
        // floor and walls are always present in a room
        if !self.class_set.contains(&0) || !self.class_set.contains(&1) {
            return bad("class set must include floor and wall");
        }
        Ok(())
    }

    pub fn has_class(&self, c: u32) -> bool {
        self.class_set.contains(&c)
    }
}

const FLOOR: [f64; 3] = [0.55, 0.45, 0.35];
const WALL: [f64; 3] = [0.85, 0.85, 0.80];
const RED: [f64; 3] = [0.75, 0.25, 0.20];
const BLUE: [f64; 3] = [0.20, 0.40, 0.80];
const GREEN: [f64; 3] = [0.25, 0.70, 0.30];

/// Three training domains plus one held out for the unseen-domain protocol.
/// Object colors are permuted between domains.
pub fn default_domains() -> Vec<DomainSpec> {
    vec![
        DomainSpec {
            domain_id: 0,
            class_colors: vec![FLOOR, WALL, RED, BLUE, GREEN],
            name: "dense-clean".into(),
            density_points_per_m3: 1600.0,
            color_palette_bias: [0.5, 0.5, 0.5],
            noise_sigma_m: 0.002,
            occlusion_fraction: 0.0,
            class_set: vec![0, 1, 2, 3, 4],
        },
        DomainSpec {
            domain_id: 1,
            class_colors: vec![FLOOR, WALL, GREEN, RED, BLUE],
            name: "sparse-noisy".into(),
            density_points_per_m3: 700.0,
            color_palette_bias: [0.9, 0.55, 0.25],
            noise_sigma_m: 0.012,
            occlusion_fraction: 0.1,
            class_set: vec![0, 1, 2, 3, 4],
        },
        DomainSpec {
            domain_id: 2,
            class_colors: vec![FLOOR, WALL, BLUE, GREEN, RED],
            name: "occluded-colored".into(),
            density_points_per_m3: 1100.0,
            color_palette_bias: [0.15, 0.35, 0.85],
            noise_sigma_m: 0.005,
            occlusion_fraction: 0.35,
            class_set: vec![0, 1, 2, 3, 4],
        },
        DomainSpec {
            domain_id: 3,
            class_colors: vec![FLOOR, WALL, BLUE, RED, GREEN],
            name: "held-out".into(),
            density_points_per_m3: 900.0,
            color_palette_bias: [0.6, 0.8, 0.3],
            noise_sigma_m: 0.008,
            occlusion_fraction: 0.2,
            class_set: vec![0, 1, 2, 3, 4],
        },
    ]
}

/// Rejects duplicate domain ids.
pub fn validate_domains(domains: &[DomainSpec]) -> Result<(), SynthError> {
    for (i, d) in domains.iter().enumerate() {
        d.validate()?;
        if domains[..i].iter().any(|o| o.domain_id == d.domain_id) {
            return Err(SynthError::InvalidSpec(format!("duplicate domain id {}", d.domain_id)));
        }
    }
    Ok(())
}
