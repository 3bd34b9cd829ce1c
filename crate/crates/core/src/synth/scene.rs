use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};

use crate::rng::{self, Rng};

use super::domain::DomainSpec;
use super::SynthError;

pub const MIN_SCENE_POINTS: usize = 64;
const WALL_HEIGHT: f64 = 0.5;
const PALETTE_MIX: f64 = 0.3;

/// Labeled points of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub labels: Vec<u32>,
    pub domain_id: u32,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            domain_id: self.domain_id,
        }
    }
}

/// One analytic surface patch.
#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    /// `origin + a·u + b·v` for `a, b ∈ [0,1]`, `u ⟂ v`.
    Rect { origin: [f64; 3], u: [f64; 3], v: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Lateral surface of a vertical cylinder standing on `base`.
    CylinderSide { base: [f64; 3], radius: f64, height: f64 },
    /// Horizontal disk.
    Disk { center: [f64; 3], radius: f64 },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

impl Surface {
    pub fn area(&self) -> f64 {
        match *self {
            Surface::Rect { u, v, .. } => norm(u) * norm(v),
            Surface::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Surface::CylinderSide { radius, height, .. } => 2.0 * PI * radius * height,
            Surface::Disk { radius, .. } => PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut Rng) -> [f64; 3] {
        match *self {
            Surface::Rect { origin, u, v } => {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                [
                    origin[0] + a * u[0] + b * v[0],
                    origin[1] + a * u[1] + b * v[1],
                    origin[2] + a * u[2] + b * v[2],
                ]
            }
            Surface::Sphere { center, radius } => {
                let n = Normal::new(0.0, 1.0).unwrap();
                let mut d = [n.sample(rng), n.sample(rng), n.sample(rng)];
                let l = norm(d).max(1e-12);
                d.iter_mut().for_each(|x| *x /= l);
                [center[0] + radius * d[0], center[1] + radius * d[1], center[2] + radius * d[2]]
            }
            Surface::CylinderSide { base, radius, height } => {
                let t = rng.random::<f64>() * 2.0 * PI;
                let z = rng.random::<f64>() * height;
                [base[0] + radius * t.cos(), base[1] + radius * t.sin(), base[2] + z]
            }
            Surface::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let t = rng.random::<f64>() * 2.0 * PI;
                [center[0] + r * t.cos(), center[1] + r * t.sin(), center[2]]
            }
        }
    }

    /// Euclidean distance from `p` to the surface.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        match *self {
            Surface::Rect { origin, u, v } => {
                let d = sub(p, origin);
                let a = (dot(d, u) / dot(u, u)).clamp(0.0, 1.0);
                let b = (dot(d, v) / dot(v, v)).clamp(0.0, 1.0);
                let q = [
                    origin[0] + a * u[0] + b * v[0],
                    origin[1] + a * u[1] + b * v[1],
                    origin[2] + a * u[2] + b * v[2],
                ];
                norm(sub(p, q))
            }
            Surface::Sphere { center, radius } => (norm(sub(p, center)) - radius).abs(),
            Surface::CylinderSide { base, radius, height } => {
                let rho = ((p[0] - base[0]).powi(2) + (p[1] - base[1]).powi(2)).sqrt();
                let dz = p[2] - base[2];
                let oz = if dz < 0.0 {
                    -dz
                } else if dz > height {
                    dz - height
                } else {
                    0.0
                };
                ((rho - radius).powi(2) + oz * oz).sqrt()
            }
            Surface::Disk { center, radius } => {
                let rho = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt();
                let out = (rho - radius).max(0.0);
                (out * out + (p[2] - center[2]).powi(2)).sqrt()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub class: u32,
    pub surfaces: Vec<Surface>,
    pub base_color: [f64; 3],
}

impl Primitive {
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        self.surfaces.iter().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min)
    }
}

/// Geometry of a scene before sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    pub extent: [f64; 3],
    pub primitives: Vec<Primitive>,
    /// Start azimuth of the occluded arc, radians.
    pub occlusion_start: f64,
}

fn jittered(base: [f64; 3], rng: &mut Rng) -> [f64; 3] {
    let mut c = base;
    for v in &mut c {
        *v = (*v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    c
}

fn spec_stream(spec: &DomainSpec, seed: u64, purpose: &str) -> Rng {
    rng::stream(seed, &[rng::tag("scene"), spec.domain_id as u64, rng::tag(purpose)])
}

/// Room corner (floor plus two walls) with 2–4 objects from the domain's class set.
pub fn layout_scene(spec: &DomainSpec, seed: u64) -> SceneLayout {
    let mut rng = spec_stream(spec, seed, "layout");
    let lx = rng.random_range(0.9..1.2);
    let ly = rng.random_range(0.9..1.2);
    let mut primitives = vec![
        Primitive {
            class: 0,
            surfaces: vec![Surface::Rect {
                origin: [0.0, 0.0, 0.0],
                u: [lx, 0.0, 0.0],
                v: [0.0, ly, 0.0],
            }],
            base_color: jittered(spec.class_colors[0], &mut rng),
        },
        Primitive {
            class: 1,
            surfaces: vec![
                Surface::Rect {
                    origin: [0.0, 0.0, 0.0],
                    u: [0.0, ly, 0.0],
                    v: [0.0, 0.0, WALL_HEIGHT],
                },
                Surface::Rect {
                    origin: [0.0, 0.0, 0.0],
                    u: [lx, 0.0, 0.0],
                    v: [0.0, 0.0, WALL_HEIGHT],
                },
            ],
            base_color: jittered(spec.class_colors[1], &mut rng),
        },
    ];
    let object_classes: Vec<u32> = spec.class_set.iter().copied().filter(|&c| c >= 2).collect();
    let n_objects = if object_classes.is_empty() { 0 } else { rng.random_range(2..=4) };
    for _ in 0..n_objects {
        let class = object_classes[rng.random_range(0..object_classes.len())];
        let cx = rng.random_range(0.25..lx - 0.2);
        let cy = rng.random_range(0.25..ly - 0.2);
        let surfaces = match class {
            2 => {
                let (a, b, h) = (
                    rng.random_range(0.07..0.15),
                    rng.random_range(0.07..0.15),
                    rng.random_range(0.12..0.3),
                );
                let o = [cx - a, cy - b, 0.0];
                let (ex, ey, ez) = (2.0 * a, 2.0 * b, h);
                vec![
                    Surface::Rect { origin: [o[0], o[1], h], u: [ex, 0.0, 0.0], v: [0.0, ey, 0.0] },
                    Surface::Rect { origin: o, u: [ex, 0.0, 0.0], v: [0.0, 0.0, ez] },
                    Surface::Rect { origin: [o[0], o[1] + ey, 0.0], u: [ex, 0.0, 0.0], v: [0.0, 0.0, ez] },
                    Surface::Rect { origin: o, u: [0.0, ey, 0.0], v: [0.0, 0.0, ez] },
                    Surface::Rect { origin: [o[0] + ex, o[1], 0.0], u: [0.0, ey, 0.0], v: [0.0, 0.0, ez] },
                ]
            }
            3 => {
                let r = rng.random_range(0.07..0.14);
                vec![Surface::Sphere { center: [cx, cy, r], radius: r }]
            }
            _ => {
                let r = rng.random_range(0.05..0.1);
                let h = rng.random_range(0.18..0.35);
                vec![
                    Surface::CylinderSide { base: [cx, cy, 0.0], radius: r, height: h },
                    Surface::Disk { center: [cx, cy, h], radius: r },
                ]
            }
        };
        primitives.push(Primitive {
            class,
            surfaces,
            base_color: jittered(spec.class_colors[class as usize], &mut rng),
        });
    }
    SceneLayout {
        extent: [lx, ly, WALL_HEIGHT],
        primitives,
        occlusion_start: rng.random_range(0.0..2.0 * PI),
    }
}

/// Samples a labeled scene for `spec`. Same `(spec, seed)` gives a bit-identical cloud.
pub fn generate_scene(spec: &DomainSpec, seed: u64) -> Result<PointCloud, SynthError> {
    spec.validate()?;
    let layout = layout_scene(spec, seed);
    sample_layout(spec, &layout, seed)
}

pub fn sample_layout(spec: &DomainSpec, layout: &SceneLayout, seed: u64) -> Result<PointCloud, SynthError> {
    let mut rng = spec_stream(spec, seed, "points");
    let noise = Normal::new(0.0, spec.noise_sigma_m.max(0.0)).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let jitter = Normal::new(0.0, 0.02).unwrap();
    let center = [layout.extent[0] / 2.0, layout.extent[1] / 2.0];
    let arc = spec.occlusion_fraction * 2.0 * PI;

    let mut cloud = PointCloud {
        positions: Vec::new(),
        colors: Vec::new(),
        labels: Vec::new(),
        domain_id: spec.domain_id,
    };
    for prim in &layout.primitives {
        for s in &prim.surfaces {
            let lambda = spec.density_points_per_m3 * s.area();
            let count = if lambda > 0.0 {
                Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
            } else {
                0
            };
            for _ in 0..count {
                let mut p = s.sample(&mut rng);
                if spec.noise_sigma_m > 0.0 {
                    for v in &mut p {
                        *v += noise.sample(&mut rng);
                    }
                }
                let mut c = [0.0; 3];
                for k in 0..3 {
                    let base = prim.base_color[k] + jitter.sample(&mut rng);
                    c[k] = ((1.0 - PALETTE_MIX) * base + PALETTE_MIX * spec.color_palette_bias[k]).clamp(0.0, 1.0);
                }
                if arc > 0.0 {
                    let az = (p[1] - center[1]).atan2(p[0] - center[0]);
                    let rel = (az - layout.occlusion_start).rem_euclid(2.0 * PI);
                    if rel < arc {
                        continue;
                    }
                }
                cloud.positions.push(p);
                cloud.colors.push(c);
                cloud.labels.push(prim.class);
            }
        }
    }
    if cloud.len() < MIN_SCENE_POINTS {
        return Err(SynthError::TooFewPoints {
            got: cloud.len(),
            min: MIN_SCENE_POINTS,
        });
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::domain::default_domains;

    #[test]
    fn same_seed_same_cloud() {
        let spec = &default_domains()[1];
        assert_eq!(generate_scene(spec, 11).unwrap(), generate_scene(spec, 11).unwrap());
        assert_ne!(generate_scene(spec, 11).unwrap(), generate_scene(spec, 12).unwrap());
    }

    #[test]
    fn noiseless_points_lie_on_their_primitive() {
        let mut spec = default_domains()[0].clone();
        spec.noise_sigma_m = 0.0;
        spec.occlusion_fraction = 0.0;
        for seed in 0..5 {
            let layout = layout_scene(&spec, seed);
            let cloud = sample_layout(&spec, &layout, seed).unwrap();
            for (p, &l) in cloud.positions.iter().zip(&cloud.labels) {
                let d = layout
                    .primitives
                    .iter()
                    .filter(|q| q.class == l)
                    .map(|q| q.distance(*p))
                    .fold(f64::INFINITY, f64::min);
                assert!(d < 1e-12, "distance {d}");
            }
        }
    }

    #[test]
    fn density_doubling_doubles_count() {
        let spec = default_domains()[0].clone();
        let mut dense = spec.clone();
        dense.density_points_per_m3 *= 2.0;
        let n1: usize = (0..20).map(|s| generate_scene(&spec, s).unwrap().len()).sum();
        let n2: usize = (0..20).map(|s| generate_scene(&dense, s).unwrap().len()).sum();
        let ratio = n2 as f64 / n1 as f64;
        assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
    }

    #[test]
    fn too_sparse_scene_is_an_error() {
        let mut spec = default_domains()[0].clone();
        spec.density_points_per_m3 = 5.0;
        assert!(matches!(generate_scene(&spec, 0), Err(SynthError::TooFewPoints { .. })));
    }

    #[test]
    fn labels_and_colors_respect_invariants() {
        for spec in default_domains() {
            let c = generate_scene(&spec, 3).unwrap();
            assert!(c.labels.iter().all(|l| spec.class_set.contains(l)));
            assert!(c.colors.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
