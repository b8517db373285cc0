//! Procedural generation of labeled source/target point-cloud datasets with
//! controllable domain shift and label imbalance.
//!
//! Six primitive classes stand in for real scan datasets at desk scale. Each
//! cloud's RNG stream is derived from (dataset_seed, cloud_index), so serial
//! and parallel generation produce identical output.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{normalize_unit_cube, PointCloud};

pub const NUM_CLASSES: usize = 6;
const MIN_CLOUD_POINTS: usize = 16;

/// The six primitive shape classes, with stable ids 0..5.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere = 0,
    Cube = 1,
    Cylinder = 2,
    Cone = 3,
    Torus = 4,
    Plane = 5,
}

impl ShapeClass {
    pub fn from_id(id: usize) -> Result<Self> {
        Ok(match id {
            0 => ShapeClass::Sphere,
            1 => ShapeClass::Cube,
            2 => ShapeClass::Cylinder,
            3 => ShapeClass::Cone,
            4 => ShapeClass::Torus,
            5 => ShapeClass::Plane,
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown shape class id {id}, expected 0..{}",
                    NUM_CLASSES - 1
                )))
            }
        })
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Torus => "torus",
            ShapeClass::Plane => "plane",
        }
    }
}

/// Parameters describing one domain's shift away from clean primitives.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShiftSpec {
    /// Fraction of points dropped on one side of a random plane through the
    /// centroid (mimics self-occlusion). In [0, 1).
    pub occlusion_fraction: f64,
    /// Isotropic Gaussian noise stddev (mimics sensor noise). >= 0.
    pub jitter_sigma: f64,
    /// Random subsample ratio (mimics point density). In (0, 1].
    pub density_factor: f64,
    /// Per-axis anisotropic scale range (lo, hi) (mimics object scales).
    pub scale_range: (f64, f64),
    /// Class prior vector, length NUM_CLASSES, sums to 1.
    pub class_priors: Vec<f64>,
    pub rng_seed: u64,
}

impl DomainShiftSpec {
    /// Neutral spec: no shift, uniform priors.
    pub fn neutral(seed: u64) -> Self {
        DomainShiftSpec {
            occlusion_fraction: 0.0,
            jitter_sigma: 0.0,
            density_factor: 1.0,
            scale_range: (1.0, 1.0),
            class_priors: vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES],
            rng_seed: seed,
        }
    }

    /// Default "synthetic-to-real-like" shift magnitudes.
    pub fn real_like(seed: u64) -> Self {
        DomainShiftSpec {
            occlusion_fraction: 0.3,
            jitter_sigma: 0.02,
            density_factor: 0.5,
            scale_range: (0.7, 1.3),
            class_priors: vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES],
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.occlusion_fraction) {
            return Err(Error::InvalidConfig(format!(
                "occlusion_fraction must be in [0, 1), got {}",
                self.occlusion_fraction
            )));
        }
        if self.jitter_sigma < 0.0 {
            return Err(Error::InvalidConfig("jitter_sigma must be >= 0".into()));
        }
        if !(self.density_factor > 0.0 && self.density_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "density_factor must be in (0, 1], got {}",
                self.density_factor
            )));
        }
        if self.scale_range.0 > self.scale_range.1 || self.scale_range.0 <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "scale_range ({}, {}) is invalid",
                self.scale_range.0, self.scale_range.1
            )));
        }
        if self.class_priors.len() != NUM_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "class_priors must have {NUM_CLASSES} entries, got {}",
                self.class_priors.len()
            )));
        }
        if self.class_priors.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidConfig("class_priors must be nonnegative".into()));
        }
        let sum: f64 = self.class_priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "class_priors must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut impl Rng) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let n = f64::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Samples `n_points` uniformly from the surface of the primitive. Every
/// primitive is constructed analytically inside the unit cube centered at
/// the origin, so no empirical renormalization is applied here.
pub fn generate_shape(class: ShapeClass, n_points: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if n_points < MIN_CLOUD_POINTS {
        return Err(Error::InvalidConfig(format!(
            "n_points must be >= {MIN_CLOUD_POINTS}, got {n_points}"
        )));
    }
    let mut points = Vec::with_capacity(n_points);
    match class {
        ShapeClass::Sphere => {
            // radius 0.5, centered at origin
            for _ in 0..n_points {
                let d = unit_vector(rng);
                points.push([0.5 * d[0], 0.5 * d[1], 0.5 * d[2]]);
            }
        }
        ShapeClass::Cube => {
            // surface of [-0.5, 0.5]^3; faces are equal-area
            for _ in 0..n_points {
                let face = rng.gen_range(0..6usize);
                let u = rng.gen_range(-0.5..0.5);
                let v = rng.gen_range(-0.5..0.5);
                let p = match face {
                    0 => [0.5, u, v],
                    1 => [-0.5, u, v],
                    2 => [u, 0.5, v],
                    3 => [u, -0.5, v],
                    4 => [u, v, 0.5],
                    _ => [u, v, -0.5],
                };
                points.push(p);
            }
        }
        ShapeClass::Cylinder => {
            // radius 0.35, height 1, area-weighted lateral + caps
            let r = 0.35;
            let lateral = 2.0 * std::f64::consts::PI * r * 1.0;
            let cap = std::f64::consts::PI * r * r;
            let total = lateral + 2.0 * cap;
            for _ in 0..n_points {
                let pick = rng.gen_range(0.0..total);
                let theta = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                if pick < lateral {
                    let z = rng.gen_range(-0.5..0.5);
                    points.push([r * theta.cos(), r * theta.sin(), z]);
                } else {
                    let z = if pick < lateral + cap { 0.5 } else { -0.5 };
                    let rr = r * rng.gen::<f64>().sqrt();
                    points.push([rr * theta.cos(), rr * theta.sin(), z]);
                }
            }
        }
        ShapeClass::Cone => {
            // base radius 0.4 at z=-0.5, apex at z=0.5, lateral + base
            let r: f64 = 0.4;
            let h: f64 = 1.0;
            let slant = (r * r + h * h).sqrt();
            let lateral = std::f64::consts::PI * r * slant;
            let base = std::f64::consts::PI * r * r;
            let total = lateral + base;
            for _ in 0..n_points {
                let pick = rng.gen_range(0.0..total);
                let theta = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                if pick < lateral {
                    // uniform over the lateral surface: density grows with
                    // distance from the apex, so take sqrt of the uniform draw
                    let t = rng.gen::<f64>().sqrt();
                    let rr = r * t;
                    let z = 0.5 - h * t;
                    points.push([rr * theta.cos(), rr * theta.sin(), z]);
                } else {
                    let rr = r * rng.gen::<f64>().sqrt();
                    points.push([rr * theta.cos(), rr * theta.sin(), -0.5]);
                }
            }
        }
        ShapeClass::Torus => {
            // major radius 0.35, minor 0.15; rejection on the Jacobian term
            let major = 0.35;
            let minor = 0.15;
            for _ in 0..n_points {
                loop {
                    let u = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                    let v = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
                    let accept = (major + minor * v.cos()) / (major + minor);
                    if rng.gen::<f64>() < accept {
                        let ring = major + minor * v.cos();
                        points.push([ring * u.cos(), ring * u.sin(), minor * v.sin()]);
                        break;
                    }
                }
            }
        }
        ShapeClass::Plane => {
            // unit square at z = 0
            for _ in 0..n_points {
                points.push([rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0]);
            }
        }
    }
    Ok(PointCloud::new(points, Some(class.id())))
}

/// Applies scale -> occlusion -> density subsample -> jitter, then
/// re-normalizes to the unit cube. Errors if fewer than 16 points would
/// remain.
pub fn apply_shift(
    cloud: &PointCloud,
    spec: &DomainShiftSpec,
    rng: &mut impl Rng,
) -> Result<PointCloud> {
    spec.validate()?;
    let m = cloud.len();

    // anisotropic per-axis scaling
    let (lo, hi) = spec.scale_range;
    let sx = rng.gen_range(lo..=hi);
    let sy = rng.gen_range(lo..=hi);
    let sz = rng.gen_range(lo..=hi);
    let mut points: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] * sx, p[1] * sy, p[2] * sz])
        .collect();

    // occlusion: drop the ceil(f*m) points farthest along a random normal
    if spec.occlusion_fraction > 0.0 {
        let n_remove = (spec.occlusion_fraction * m as f64).ceil() as usize;
        if m.saturating_sub(n_remove) < MIN_CLOUD_POINTS {
            return Err(Error::InvalidConfig(format!(
                "occlusion_fraction {} leaves fewer than {MIN_CLOUD_POINTS} points",
                spec.occlusion_fraction
            )));
        }
        let normal = unit_vector(rng);
        let tmp = PointCloud::new(points.clone(), None);
        let centroid = tmp.centroid();
        let mut signed: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = (p[0] - centroid[0]) * normal[0]
                    + (p[1] - centroid[1]) * normal[1]
                    + (p[2] - centroid[2]) * normal[2];
                (d, i)
            })
            .collect();
        signed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut keep: Vec<usize> = signed[n_remove..].iter().map(|&(_, i)| i).collect();
        keep.sort_unstable();
        points = keep.into_iter().map(|i| points[i]).collect();
    }

    // density subsample
    if spec.density_factor < 1.0 {
        let n_keep = (spec.density_factor * points.len() as f64).round() as usize;
        if n_keep < MIN_CLOUD_POINTS {
            return Err(Error::InvalidConfig(format!(
                "density_factor {} leaves fewer than {MIN_CLOUD_POINTS} points",
                spec.density_factor
            )));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        // Fisher-Yates prefix shuffle
        for i in 0..n_keep {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let mut keep = order[..n_keep].to_vec();
        keep.sort_unstable();
        points = keep.into_iter().map(|i| points[i]).collect();
    }

    // jitter
    if spec.jitter_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.jitter_sigma).unwrap();
        for p in &mut points {
            for a in 0..3 {
                p[a] += noise.sample(rng);
            }
        }
    }

    normalize_unit_cube(&PointCloud::new(points, cloud.label))
}

/// splitmix64 mix for deriving per-cloud RNG streams
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn cloud_rng(dataset_seed: u64, cloud_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(dataset_seed, cloud_index as u64))
}

/// Generates `n_total` labeled clouds; each cloud's class is drawn from
/// `spec.class_priors` and its geometry from its own derived RNG stream.
pub fn generate_dataset(
    n_total: usize,
    spec: &DomainShiftSpec,
    points_per_cloud: usize,
) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    if n_total < NUM_CLASSES {
        return Err(Error::InvalidConfig(format!(
            "n_total must be >= {NUM_CLASSES}, got {n_total}"
        )));
    }
    let mut clouds = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let mut rng = cloud_rng(spec.rng_seed, i);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class_id = NUM_CLASSES - 1;
        for (t, &p) in spec.class_priors.iter().enumerate() {
            acc += p;
            if u < acc {
                class_id = t;
                break;
            }
        }
        let class = ShapeClass::from_id(class_id)?;
        let shape = generate_shape(class, points_per_cloud, &mut rng)?;
        clouds.push(apply_shift(&shape, spec, &mut rng)?);
    }
    Ok(clouds)
}
