//! Ray-cast synthetic LiDAR sequences with per-point ground truth.
//!
//! Scenes are built from a handful of primitives in a z-up world frame. Each
//! trajectory pose casts a fixed ray pattern (sensor frame x forward, y left,
//! z up); the first primitive a ray meets within range produces a point with
//! that primitive's class and a Gaussian intensity.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{RawScan, ScanSequence};
use crate::segmenter::mix_seed;
use crate::{ClassId, Pose};

const MIN_HIT_DISTANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Infinite horizontal plane.
    GroundPlane { height: f64 },
    /// Horizontal rectangle `x ∈ [x0, x1], y ∈ [y0, y1]` at `height`.
    Strip {
        x: [f64; 2],
        y: [f64; 2],
        height: f64,
    },
    /// Axis-aligned box.
    Box { min: [f64; 3], max: [f64; 3] },
    /// Axis-aligned ellipsoid.
    Blob { center: [f64; 3], radii: [f64; 3] },
}

impl Shape {
    /// Smallest ray parameter `t > 0` at which `origin + t * dir` meets the surface.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let positive = |t: f64| (t.is_finite() && t > MIN_HIT_DISTANCE).then_some(t);
        match self {
            Shape::GroundPlane { height } => positive((height - origin.z) / dir.z),
            Shape::Strip { x, y, height } => {
                let t = positive((height - origin.z) / dir.z)?;
                let hit = origin + dir * t;
                (hit.x >= x[0] && hit.x <= x[1] && hit.y >= y[0] && hit.y <= y[1]).then_some(t)
            }
            Shape::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let ta = (min[a] - origin[a]) / dir[a];
                    let tb = (max[a] - origin[a]) / dir[a];
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                if t0 > t1 {
                    return None;
                }
                positive(t0).or_else(|| positive(t1))
            }
            Shape::Blob { center, radii } => {
                let r = Vector3::from(*radii);
                let o = (origin - Vector3::from(*center)).component_div(&r);
                let d = dir.component_div(&r);
                let a = d.dot(&d);
                let b = 2.0 * o.dot(&d);
                let c = o.dot(&o) - 1.0;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let q = if b < 0.0 {
                    -0.5 * (b - sq)
                } else {
                    -0.5 * (b + sq)
                };
                let (r0, r1) = (q / a, c / q);
                let (near, far) = if r0 < r1 { (r0, r1) } else { (r1, r0) };
                positive(near).or_else(|| positive(far))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::GroundPlane { height } => height.is_finite(),
            Shape::Strip { x, y, height } => x[0] <= x[1] && y[0] <= y[1] && height.is_finite(),
            Shape::Box { min, max } => (0..3).all(|a| min[a] < max[a]),
            Shape::Blob { radii, .. } => radii.iter().all(|&r| r > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("degenerate primitive {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub class: ClassId,
    pub intensity_mean: f64,
    pub intensity_sigma: f64,
}

/// Rotating multi-beam sensor model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayPattern {
    pub beams: u32,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_resolution_deg: f64,
    /// Horizontal field of view centred on the sensor x axis.
    pub azimuth_fov_deg: f64,
}

impl RayPattern {
    /// Unit ray directions in the sensor frame, azimuth-major.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let steps = (self.azimuth_fov_deg / self.azimuth_resolution_deg)
            .round()
            .max(1.0) as usize;
        let full_circle = self.azimuth_fov_deg >= 360.0;
        let mut out = Vec::with_capacity(steps * self.beams as usize);
        for s in 0..steps {
            let az = if full_circle {
                -180.0 + s as f64 * self.azimuth_resolution_deg
            } else {
                -0.5 * self.azimuth_fov_deg + (s as f64 + 0.5) * self.azimuth_fov_deg / steps as f64
            }
            .to_radians();
            for b in 0..self.beams {
                let el = if self.beams == 1 {
                    self.elevation_min_deg
                } else {
                    self.elevation_min_deg
                        + (self.elevation_max_deg - self.elevation_min_deg) * f64::from(b)
                            / f64::from(self.beams - 1)
                }
                .to_radians();
                out.push(Vector3::new(
                    el.cos() * az.cos(),
                    el.cos() * az.sin(),
                    el.sin(),
                ));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub class_names: Vec<String>,
    pub trajectory: Vec<Pose>,
    pub primitives: Vec<Primitive>,
    pub rays: RayPattern,
    pub max_range: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if self.trajectory.is_empty() {
            return Err(Error::Invalid("scene has no trajectory".into()));
        }
        if self.rays.beams == 0 {
            return Err(Error::Invalid("beam count must be >= 1".into()));
        }
        if !(self.rays.azimuth_resolution_deg > 0.0
            && self.rays.azimuth_fov_deg > 0.0
            && self.rays.azimuth_fov_deg <= 360.0)
        {
            return Err(Error::Invalid("bad azimuth pattern".into()));
        }
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::Invalid(format!(
                "max range {} must be > 0",
                self.max_range
            )));
        }
        for p in &self.primitives {
            if usize::from(p.class) >= c {
                return Err(Error::InvalidClass {
                    class: u32::from(p.class),
                    num_classes: c,
                });
            }
            if !(0.0..=1.0).contains(&p.intensity_mean)
                || p.intensity_sigma.is_nan()
                || p.intensity_sigma < 0.0
            {
                return Err(Error::Invalid(format!(
                    "intensity N({}, {}) must have mean in [0, 1] and sigma >= 0",
                    p.intensity_mean, p.intensity_sigma
                )));
            }
            p.shape.validate()?;
        }
        Ok(())
    }
}

/// Nearest primitive hit along a world ray: `(primitive index, distance)`.
pub fn cast(
    primitives: &[Primitive],
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in primitives.iter().enumerate() {
        if let Some(t) = p.shape.intersect(origin, dir) {
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}

pub fn generate(spec: &SceneSpec) -> Result<ScanSequence> {
    spec.validate()?;
    let dirs = spec.rays.directions();
    let scans = spec
        .trajectory
        .par_iter()
        .enumerate()
        .map(|(pose_idx, pose)| {
            let origin = *pose.translation();
            let mut positions = Vec::new();
            let mut intensity = Vec::new();
            let mut labels = Vec::new();
            for (ray_idx, d) in dirs.iter().enumerate() {
                let dir = pose.rotation() * d;
                let Some((hit, t)) = cast(&spec.primitives, &origin, &dir) else {
                    continue;
                };
                if t > spec.max_range {
                    continue;
                }
                let prim = &spec.primitives[hit];
                let stream = ((pose_idx as u64) << 32) | ray_idx as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, stream));
                let noise: f64 = rng.sample(StandardNormal);
                positions.push(pose.apply_inverse(&(origin + dir * t)));
                intensity
                    .push((prim.intensity_mean + prim.intensity_sigma * noise).clamp(0.0, 1.0));
                labels.push(prim.class);
            }
            RawScan::new(pose_idx, positions, intensity, Some(labels))
        })
        .collect::<Result<Vec<_>>>()?;
    ScanSequence::new(scans, spec.trajectory.clone(), spec.class_names.clone())
}

pub const DEFAULT_CLASSES: [&str; 5] = [
    "driveable_surface",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

pub const SENSOR_HEIGHT: f64 = 1.8;

/// A street scene along a 50 m straight trajectory of 20 poses: road plane,
/// raised sidewalks, terrain verges, building blocks and tree crowns. The
/// seed jitters building heights and crown placement as well as intensities.
/// The sensor scans the forward half-plane, matching the forward-looking
/// virtual cameras.
pub fn default_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX));
    let (road, sidewalk, terrain, manmade, vegetation) = (0, 1, 2, 3, 4);
    let prim = |shape, class, mean| Primitive {
        shape,
        class,
        intensity_mean: mean,
        intensity_sigma: 0.05,
    };
    let (x_lo, x_hi) = (-60.0, 110.0);
    let mut primitives = vec![prim(Shape::GroundPlane { height: 0.0 }, road, 0.15)];
    for side in [1.0, -1.0] {
        let span = |a: f64, b: f64| if side > 0.0 { [a, b] } else { [-b, -a] };
        primitives.push(prim(
            Shape::Strip {
                x: [x_lo, x_hi],
                y: span(5.0, 8.0),
                height: 0.15,
            },
            sidewalk,
            0.35,
        ));
        primitives.push(prim(
            Shape::Strip {
                x: [x_lo, x_hi],
                y: span(8.0, 40.0),
                height: 0.05,
            },
            terrain,
            0.45,
        ));
    }
    let blocks: [(f64, f64, f64); 7] = [
        (-12.0, 4.0, 1.0),
        (10.0, 24.0, 1.0),
        (31.0, 44.0, 1.0),
        (52.0, 70.0, 1.0),
        (-2.0, 14.0, -1.0),
        (21.0, 37.0, -1.0),
        (45.0, 62.0, -1.0),
    ];
    for (x0, x1, side) in blocks {
        let height = rng.random_range(6.0..14.0);
        let (y0, y1) = if side > 0.0 {
            (13.0, 23.0)
        } else {
            (-23.0, -13.0)
        };
        primitives.push(prim(
            Shape::Box {
                min: [x0, y0, -0.5],
                max: [x1, y1, height],
            },
            manmade,
            0.6,
        ));
    }
    for side in [1.0, -1.0] {
        let mut x = -6.0 + rng.random_range(0.0..3.0);
        while x < 62.0 {
            let center = [
                x,
                side * (10.0 + rng.random_range(-0.5..0.5)),
                3.0 + rng.random_range(-0.3..0.3),
            ];
            let r = rng.random_range(1.2..1.8);
            primitives.push(prim(
                Shape::Blob {
                    center,
                    radii: [r, r, r * 1.3],
                },
                vegetation,
                0.8,
            ));
            x += rng.random_range(7.0..10.0);
        }
    }
    let trajectory = (0..20)
        .map(|i| {
            Pose::from_translation(Vector3::new(50.0 * f64::from(i) / 19.0, 0.0, SENSOR_HEIGHT))
        })
        .collect();
    SceneSpec {
        class_names: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        trajectory,
        primitives,
        rays: RayPattern {
            beams: 32,
            elevation_min_deg: -25.0,
            elevation_max_deg: 10.0,
            azimuth_resolution_deg: 0.5,
            azimuth_fov_deg: 180.0,
        },
        max_range: 40.0,
        seed,
    }
}
