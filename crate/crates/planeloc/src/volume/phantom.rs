//! Procedural head phantoms with exact ground-truth landmarks and planes.
//!
//! A phantom is a smooth ellipsoidal "head" with internal structure (shell,
//! ventricles, a central nucleus, a posterior lobe), multiplicative
//! speckle-like noise, and three bright Gaussian blobs marking the genu,
//! splenium, and vermis landmarks. The anatomy is defined once in a
//! canonical frame and rendered through a similarity pose (rotation,
//! translation, isotropic scale), so every ground-truth quantity is known in
//! closed form:
//!
//! * landmarks move as `scale·R·p + t`;
//! * the TT plane is the canonical `z = 0` plane through genu and splenium;
//! * the TC plane is the TT plane rotated about the genu–splenium axis until
//!   it passes through the vermis (the vermis sits off that axis, giving a
//!   fixed ~34° dihedral between the two).
//!
//! Generation is fully deterministic per `(seed, pose, config)`.

use nalgebra::{Rotation3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plane::Plane;
use crate::volume::{PlaneType, Volume};

/// Canonical landmark positions (mm): genu and splenium sit on the midline
/// y axis, the vermis sits posterior-inferior and off-axis.
pub const CANONICAL_GENU: [f64; 3] = [0.0, 13.0, 0.0];
pub const CANONICAL_SPLENIUM: [f64; 3] = [0.0, -12.0, 0.0];
pub const CANONICAL_VERMIS: [f64; 3] = [7.5, -3.0, -5.0];

/// Standard deviation of the landmark blobs, in world millimetres.
pub const BLOB_SIGMA_MM: f64 = 2.0;
const BLOB_AMPLITUDE: f64 = 0.38;

/// Head semi-axes (mm) in the canonical frame.
const HEAD_SEMI_AXES: [f64; 3] = [16.0, 19.0, 14.0];

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
}

/// Similarity pose applied to the canonical anatomy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Euler angles in degrees, applied as `Rz(z)·Ry(y)·Rx(x)`.
    pub rotation_deg: [f64; 3],
    /// Translation in mm.
    pub translation_mm: [f64; 3],
    /// Isotropic scale, restricted to `[0.8, 1.2]`.
    pub scale: f64,
}

impl Pose {
    pub fn identity() -> Pose {
        Pose { rotation_deg: [0.0; 3], translation_mm: [0.0; 3], scale: 1.0 }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(
            self.rotation_deg[0].to_radians(),
            self.rotation_deg[1].to_radians(),
            self.rotation_deg[2].to_radians(),
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation_mm)
    }

    /// Canonical → world mapping for points.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation() * p) + self.translation()
    }

    fn validate(&self) -> Result<(), PhantomError> {
        let finite = self.rotation_deg.iter().all(|v| v.is_finite())
            && self.translation_mm.iter().all(|v| v.is_finite())
            && self.scale.is_finite();
        if !finite {
            return Err(PhantomError::InvalidPose("non-finite pose field".into()));
        }
        if !(0.8..=1.2).contains(&self.scale) {
            return Err(PhantomError::InvalidPose(format!(
                "scale {} outside [0.8, 1.2]",
                self.scale
            )));
        }
        if self.translation_mm.iter().any(|t| t.abs() > 8.0) {
            return Err(PhantomError::InvalidPose(
                "translation component exceeds 8 mm; landmarks would leave the volume core".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Marginal standard deviation of the multiplicative speckle field.
    pub speckle_amp: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { dims: [96, 96, 96], spacing: [0.5, 0.5, 0.5], speckle_amp: 0.2 }
    }
}

/// Ground truth for one phantom: named landmarks plus one plane per type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub landmarks: Landmarks,
    pub planes: AnnotatedPlanes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub genu: [f64; 3],
    pub splenium: [f64; 3],
    pub vermis: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedPlanes {
    #[serde(rename = "TT")]
    pub tt: Plane,
    #[serde(rename = "TC")]
    pub tc: Plane,
}

impl Annotation {
    pub fn plane(&self, plane_type: PlaneType) -> &Plane {
        match plane_type {
            PlaneType::TT => &self.planes.tt,
            PlaneType::TC => &self.planes.tc,
        }
    }

    pub fn genu(&self) -> Vector3<f64> {
        Vector3::from(self.landmarks.genu)
    }

    pub fn splenium(&self) -> Vector3<f64> {
        Vector3::from(self.landmarks.splenium)
    }

    pub fn vermis(&self) -> Vector3<f64> {
        Vector3::from(self.landmarks.vermis)
    }

    pub fn landmark_points(&self) -> [Vector3<f64>; 3] {
        [self.genu(), self.splenium(), self.vermis()]
    }
}

/// The canonical ground-truth planes (before any pose).
pub fn canonical_planes() -> (Plane, Plane) {
    let tt = Plane::new(Vector3::new(0.0, 0.0, 1.0), 0.0).unwrap();
    // Pencil of planes about the genu–splenium (y) axis: the member through
    // the vermis has normal ŷ × (vx, 0, vz) = (vz, 0, -vx).
    let v = CANONICAL_VERMIS;
    let tc = Plane::new(Vector3::new(v[2], 0.0, -v[0]), 0.0).unwrap();
    (tt, tc)
}

/// Ground-truth annotation for a pose, independent of rendering.
pub fn annotation_for_pose(pose: &Pose) -> Result<Annotation, PhantomError> {
    pose.validate()?;
    let rot = pose.rotation();
    let t = pose.translation();
    let map = |p: [f64; 3]| -> [f64; 3] {
        let w = pose.scale * (rot * Vector3::from(p)) + t;
        [w.x, w.y, w.z]
    };
    let (tt_c, tc_c) = canonical_planes();
    // Canonical planes pass through the canonical origin (d = 0), so under
    // x' = s·R·x + t the offset becomes -n'·t.
    let map_plane = |p: &Plane| -> Plane {
        let n = rot * p.normal();
        Plane::new(n, -n.dot(&t)).unwrap()
    };
    Ok(Annotation {
        landmarks: Landmarks {
            genu: map(CANONICAL_GENU),
            splenium: map(CANONICAL_SPLENIUM),
            vermis: map(CANONICAL_VERMIS),
        },
        planes: AnnotatedPlanes { tt: map_plane(&tt_c), tc: map_plane(&tc_c) },
    })
}

/// Renders a phantom with the default 96³ @ 0.5 mm geometry.
pub fn generate_phantom(seed: u64, pose: &Pose) -> Result<(Volume, Annotation), PhantomError> {
    generate_phantom_with(&PhantomConfig::default(), seed, pose)
}

/// Renders a phantom volume and its exact annotation.
pub fn generate_phantom_with(
    config: &PhantomConfig,
    seed: u64,
    pose: &Pose,
) -> Result<(Volume, Annotation), PhantomError> {
    let annotation = annotation_for_pose(pose)?;
    let dims = config.dims;
    let n_voxels = dims[0] * dims[1] * dims[2];

    let rot_inv = pose.rotation().inverse();
    let t = pose.translation();
    let inv_scale = 1.0 / pose.scale;
    let landmarks = annotation.landmark_points();

    // Geometry helper volume for voxel-center positions.
    let geom = Volume::new(dims, config.spacing, vec![0.0; n_voxels]).expect("valid geometry");

    let mut voxels = vec![0.0f32; n_voxels];
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let world = geom.voxel_center_mm(i, j, k);
                let canonical = inv_scale * (rot_inv * (world - t));
                let mut value = canonical_intensity(&canonical);
                // Blobs add on top of the structure (the local shape stays a
                // clean Gaussian, which the matched-filter detector assumes)
                // and are σ-sized in world units regardless of head scale.
                for lm in &landmarks {
                    let dv = world - lm;
                    if dv.x.abs() < 4.0 * BLOB_SIGMA_MM
                        && dv.y.abs() < 4.0 * BLOB_SIGMA_MM
                        && dv.z.abs() < 4.0 * BLOB_SIGMA_MM
                    {
                        value += BLOB_AMPLITUDE
                            * (-dv.norm_squared() / (2.0 * BLOB_SIGMA_MM * BLOB_SIGMA_MM)).exp();
                    }
                }
                voxels[idx] = value.clamp(0.0, 1.0) as f32;
                idx += 1;
            }
        }
    }

    if config.speckle_amp > 0.0 {
        apply_speckle(&mut voxels, dims, config.speckle_amp, seed);
    } else {
        for v in voxels.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    let volume = Volume::new(dims, config.spacing, voxels).expect("rendered voxels are finite");
    Ok((volume, annotation))
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Normalized ellipsoid radius of `p` for an ellipsoid at `center` with the
/// given semi-axes.
fn ellipsoid_rho(p: &Vector3<f64>, center: [f64; 3], semi: [f64; 3]) -> f64 {
    let dx = (p.x - center[0]) / semi[0];
    let dy = (p.y - center[1]) / semi[1];
    let dz = (p.z - center[2]) / semi[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Noise-free anatomy in the canonical frame, in `[0, 1]`.
fn canonical_intensity(p: &Vector3<f64>) -> f64 {
    let rho = ellipsoid_rho(p, [0.0; 3], HEAD_SEMI_AXES);
    if rho >= 1.0 {
        return 0.0;
    }
    // Brain tissue with a gentle radial falloff. Structure edges are kept a
    // few millimetres clear of the canonical landmarks so the blobs sit on
    // smooth background.
    let mut value = 0.45 + 0.10 * (1.0 - rho);
    // Bright shell near the head boundary.
    value = mix(value, 0.85, smoothstep(0.90, 0.96, rho));
    // Dark lateral ventricles.
    for side in [-1.0, 1.0] {
        let w = 1.0 - smoothstep(0.85, 1.0, ellipsoid_rho(p, [4.5 * side, 5.0, 2.5], [3.0, 5.5, 3.0]));
        value = mix(value, 0.15, w);
    }
    // Central nucleus.
    let w = 1.0 - smoothstep(0.85, 1.0, ellipsoid_rho(p, [0.0, 1.0, -1.0], [5.5, 4.5, 4.0]));
    value = mix(value, 0.65, w);
    // Posterior-inferior lobe.
    let w = 1.0 - smoothstep(0.85, 1.0, ellipsoid_rho(p, [1.5, -7.0, -3.0], [4.5, 4.0, 3.0]));
    value = mix(value, 0.58, w);
    value.clamp(0.0, 1.0)
}

fn mix(a: f64, b: f64, w: f64) -> f64 {
    a + (b - a) * w
}

/// Multiplies the volume by `1 + amp·g` where `g` is unit-variance noise
/// smoothed at σ = 1 voxel, then clamps to `[0, 1]`.
fn apply_speckle(voxels: &mut [f32], dims: [usize; 3], amp: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = voxels.len();
    let mut field: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();

    // Separable Gaussian, σ = 1 voxel, radius 3, clamp-to-edge.
    let kernel: Vec<f64> = (-3i64..=3).map(|k| (-(k * k) as f64 / 2.0).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|w| w / ksum).collect();
    // Smoothing shrinks the marginal variance by (Σw²) per axis; rescale so
    // the field keeps unit variance and `amp` stays the speckle strength.
    let w2: f64 = kernel.iter().map(|w| w * w).sum();
    let gain = 1.0 / w2.powf(1.5);

    let stride = [1usize, dims[0], dims[0] * dims[1]];
    let mut scratch = vec![0.0f64; n];
    for axis in 0..3 {
        let len = dims[axis];
        let st = stride[axis];
        // Iterate every line along `axis`.
        let (a, b) = match axis {
            0 => (dims[1], dims[2]),
            1 => (dims[0], dims[2]),
            _ => (dims[0], dims[1]),
        };
        let (sa, sb) = match axis {
            0 => (stride[1], stride[2]),
            1 => (stride[0], stride[2]),
            _ => (stride[0], stride[1]),
        };
        for ib in 0..b {
            for ia in 0..a {
                let base = ia * sa + ib * sb;
                for pos in 0..len {
                    let mut acc = 0.0;
                    for (ki, w) in kernel.iter().enumerate() {
                        let off = (pos as i64 + ki as i64 - 3).clamp(0, len as i64 - 1) as usize;
                        acc += w * field[base + off * st];
                    }
                    scratch[base + pos * st] = acc;
                }
            }
        }
        std::mem::swap(&mut field, &mut scratch);
    }

    for (v, g) in voxels.iter_mut().zip(field.iter()) {
        let out = (*v as f64) * (1.0 + amp * gain * g);
        *v = out.clamp(0.0, 1.0) as f32;
    }
}
