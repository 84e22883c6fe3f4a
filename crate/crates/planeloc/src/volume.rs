//! Voxel volumes, trilinear sampling, and oblique slice extraction.
//!
//! Volumes live in a millimetre coordinate frame centered on the grid: voxel
//! `(i, j, k)` sits at `((i - (nx-1)/2)·sx, …)`, so the world origin is the
//! volume center and plane offsets `d` are distances to that center. Voxels
//! are stored x-fastest. Intensities are `f32` in `[0, 1]` (matching the raw
//! file payload); all sampling arithmetic is `f64`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plane::Plane;

pub mod phantom;

pub use phantom::{generate_phantom, generate_phantom_with, Annotation, PhantomConfig, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("voxel count {got} does not match dims product {want}")]
    VoxelCountMismatch { got: usize, want: usize },
    #[error("dims and spacing must be positive")]
    BadGeometry,
    #[error("non-finite voxel intensity at index {index}")]
    NonFiniteVoxel { index: usize },
    #[error("slice size {size} too small (minimum 8) or resolution not positive")]
    InvalidSize { size: usize },
}

/// The standard-plane types this pipeline localizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PlaneType {
    /// Transthalamic.
    TT,
    /// Transcerebellar.
    TC,
}

impl PlaneType {
    pub const ALL: [PlaneType; 2] = [PlaneType::TT, PlaneType::TC];
}

impl std::fmt::Display for PlaneType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlaneType::TT => write!(f, "TT"),
            PlaneType::TC => write!(f, "TC"),
        }
    }
}

impl std::str::FromStr for PlaneType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TT" => Ok(PlaneType::TT),
            "TC" => Ok(PlaneType::TC),
            other => Err(format!("unknown plane type {other:?} (expected TT or TC)")),
        }
    }
}

/// A voxel grid with physical spacing, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Volume, VolumeError> {
        if dims.iter().any(|&d| d == 0) || spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadGeometry);
        }
        let want = dims[0] * dims[1] * dims[2];
        if voxels.len() != want {
            return Err(VolumeError::VoxelCountMismatch { got: voxels.len(), want });
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteVoxel { index });
        }
        Ok(Volume { dims, spacing, voxels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    /// Flat index of voxel `(i, j, k)`, x-fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.index(i, j, k)]
    }

    /// World position (mm) of a voxel center.
    pub fn voxel_center_mm(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        Vector3::new(
            (i as f64 - (self.dims[0] as f64 - 1.0) / 2.0) * self.spacing[0],
            (j as f64 - (self.dims[1] as f64 - 1.0) / 2.0) * self.spacing[1],
            (k as f64 - (self.dims[2] as f64 - 1.0) / 2.0) * self.spacing[2],
        )
    }

    /// Continuous voxel coordinates of a world point.
    pub fn mm_to_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x / self.spacing[0] + (self.dims[0] as f64 - 1.0) / 2.0,
            p.y / self.spacing[1] + (self.dims[1] as f64 - 1.0) / 2.0,
            p.z / self.spacing[2] + (self.dims[2] as f64 - 1.0) / 2.0,
        )
    }

    /// Half of the volume's space diagonal in mm.
    pub fn half_diagonal_mm(&self) -> f64 {
        let ext = Vector3::new(
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        );
        ext.norm() / 2.0
    }

    /// Trilinear interpolation of the 8 voxels around a world point (mm).
    /// Points outside the voxel-center grid sample as 0.
    pub fn trilinear_sample(&self, p: &Vector3<f64>) -> f64 {
        let v = self.mm_to_voxel(p);
        let max = [
            self.dims[0] as f64 - 1.0,
            self.dims[1] as f64 - 1.0,
            self.dims[2] as f64 - 1.0,
        ];
        if !(0.0..=max[0]).contains(&v.x)
            || !(0.0..=max[1]).contains(&v.y)
            || !(0.0..=max[2]).contains(&v.z)
        {
            return 0.0;
        }
        let i0 = (v.x.floor() as usize).min(self.dims[0] - 1);
        let j0 = (v.y.floor() as usize).min(self.dims[1] - 1);
        let k0 = (v.z.floor() as usize).min(self.dims[2] - 1);
        let i1 = (i0 + 1).min(self.dims[0] - 1);
        let j1 = (j0 + 1).min(self.dims[1] - 1);
        let k1 = (k0 + 1).min(self.dims[2] - 1);
        let fx = v.x - i0 as f64;
        let fy = v.y - j0 as f64;
        let fz = v.z - k0 as f64;

        let c000 = self.voxel(i0, j0, k0) as f64;
        let c100 = self.voxel(i1, j0, k0) as f64;
        let c010 = self.voxel(i0, j1, k0) as f64;
        let c110 = self.voxel(i1, j1, k0) as f64;
        let c001 = self.voxel(i0, j0, k1) as f64;
        let c101 = self.voxel(i1, j0, k1) as f64;
        let c011 = self.voxel(i0, j1, k1) as f64;
        let c111 = self.voxel(i1, j1, k1) as f64;

        let c00 = c000 + (c100 - c000) * fx;
        let c10 = c010 + (c110 - c010) * fx;
        let c01 = c001 + (c101 - c001) * fx;
        let c11 = c011 + (c111 - c011) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        c0 + (c1 - c0) * fz
    }

    /// Resamples a square oblique slice of `size`×`size` pixels at `res_mm`
    /// per pixel, centered at the plane's foot of perpendicular from the
    /// origin and oriented by [`in_plane_basis`].
    pub fn extract_slice(&self, plane: &Plane, size: usize, res_mm: f64) -> Result<SliceImage, VolumeError> {
        if size < 8 || !(res_mm > 0.0) || !res_mm.is_finite() {
            return Err(VolumeError::InvalidSize { size });
        }
        let (u, v) = in_plane_basis(&plane.normal());
        let center = plane.foot_point();
        let half = (size as f64 - 1.0) / 2.0;
        let mut pixels = vec![0.0f64; size * size];
        for py in 0..size {
            let off_v = (py as f64 - half) * res_mm;
            let row_base = center + off_v * v;
            for px in 0..size {
                let off_u = (px as f64 - half) * res_mm;
                let point = row_base + off_u * u;
                pixels[py * size + px] = self.trilinear_sample(&point);
            }
        }
        Ok(SliceImage { width: size, height: size, pixel_spacing: res_mm, pixels })
    }
}

/// Deterministic in-plane orthonormal basis for a plane normal.
///
/// `u = normalize(up × n)` with `up = (0,0,1)`, falling back to `(0,1,0)`
/// when the normal is within ~2.5° of the z axis; `v = n × u`.
pub fn in_plane_basis(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let up = if normal.z.abs() > 0.999 {
        Vector3::new(0.0, 1.0, 0.0)
    } else {
        Vector3::new(0.0, 0.0, 1.0)
    };
    let u = up.cross(normal).normalize();
    let v = normal.cross(&u);
    (u, v)
}

/// A resampled 2D cross-section with uniform pixel spacing (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceImage {
    width: usize,
    height: usize,
    pixel_spacing: f64,
    pixels: Vec<f64>,
}

impl SliceImage {
    pub fn new(width: usize, height: usize, pixel_spacing: f64, pixels: Vec<f64>) -> Option<SliceImage> {
        if width == 0 || height == 0 || pixels.len() != width * height || !(pixel_spacing > 0.0) {
            return None;
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return None;
        }
        Some(SliceImage { width, height, pixel_spacing, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Volume whose intensity is affine in world position:
    /// `v(x,y,z) = a x + b y + c z + e` (values kept inside [0,1]).
    fn affine_volume(dims: [usize; 3], coeff: [f64; 4]) -> Volume {
        let spacing = [0.5, 0.5, 0.5];
        let mut voxels = vec![0.0f32; dims[0] * dims[1] * dims[2]];
        let vol = Volume::new(dims, spacing, voxels.clone()).unwrap();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = vol.voxel_center_mm(i, j, k);
                    voxels[vol.index(i, j, k)] =
                        (coeff[0] * p.x + coeff[1] * p.y + coeff[2] * p.z + coeff[3]) as f32;
                }
            }
        }
        Volume::new(dims, spacing, voxels).unwrap()
    }

    #[test]
    fn construction_validates() {
        assert!(matches!(
            Volume::new([2, 2, 2], [0.5; 3], vec![0.0; 7]),
            Err(VolumeError::VoxelCountMismatch { .. })
        ));
        assert!(matches!(
            Volume::new([2, 2, 2], [0.0, 0.5, 0.5], vec![0.0; 8]),
            Err(VolumeError::BadGeometry)
        ));
        assert!(matches!(
            Volume::new([2, 1, 1], [0.5; 3], vec![f32::NAN, 0.0]),
            Err(VolumeError::NonFiniteVoxel { index: 0 })
        ));
    }

    #[test]
    fn sample_at_voxel_center_is_exact() {
        let mut rng = StdRng::seed_from_u64(3);
        let dims = [9, 7, 5];
        let voxels: Vec<f32> = (0..dims[0] * dims[1] * dims[2])
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let vol = Volume::new(dims, [0.5, 0.7, 1.1], voxels).unwrap();
        for (i, j, k) in [(0, 0, 0), (4, 3, 2), (8, 6, 4)] {
            let p = vol.voxel_center_mm(i, j, k);
            assert_relative_eq!(vol.trilinear_sample(&p), vol.voxel(i, j, k) as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn sample_midpoint_is_average() {
        // Two voxels 0 and 1 along x, everything else equal along the axis.
        let mut voxels = vec![0.0f32; 4 * 3 * 3];
        let vol = Volume::new([4, 3, 3], [1.0; 3], voxels.clone()).unwrap();
        let a = vol.index(1, 1, 1);
        let b = vol.index(2, 1, 1);
        voxels[a] = 0.0;
        voxels[b] = 1.0;
        let vol = Volume::new([4, 3, 3], [1.0; 3], voxels).unwrap();
        let mid = (vol.voxel_center_mm(1, 1, 1) + vol.voxel_center_mm(2, 1, 1)) / 2.0;
        assert_relative_eq!(vol.trilinear_sample(&mid), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sample_far_outside_is_zero() {
        let vol = Volume::new([4, 4, 4], [0.5; 3], vec![1.0; 64]).unwrap();
        assert_eq!(vol.trilinear_sample(&Vector3::new(1000.0, 0.0, 0.0)), 0.0);
        assert_eq!(vol.trilinear_sample(&Vector3::new(0.0, -1000.0, 0.0)), 0.0);
    }

    #[test]
    fn trilinear_exact_on_affine_volume() {
        let coeff = [0.01, -0.02, 0.015, 0.5];
        let vol = affine_volume([16, 16, 16], coeff);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..1000 {
            // Interior points only: one voxel margin from the grid edge.
            let p = Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let want = coeff[0] * p.x + coeff[1] * p.y + coeff[2] * p.z + coeff[3];
            assert!((vol.trilinear_sample(&p) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn axis_aligned_slice_equals_voxel_layer() {
        let mut rng = StdRng::seed_from_u64(9);
        let dims = [16, 16, 16];
        let voxels: Vec<f32> = (0..dims[0] * dims[1] * dims[2])
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let vol = Volume::new(dims, [0.5; 3], voxels).unwrap();
        // Plane z = z_k for layer k, normal +z → u = (1,0,0), v = (0,1,0).
        let k = 10;
        let z_k = vol.voxel_center_mm(0, 0, k).z;
        let plane = Plane::new(Vector3::new(0.0, 0.0, 1.0), -z_k).unwrap();
        let size = 16;
        let slice = vol.extract_slice(&plane, size, 0.5).unwrap();
        for y in 0..size {
            for x in 0..size {
                assert!(
                    (slice.pixel(x, y) - vol.voxel(x, y, k) as f64).abs() < 1e-6,
                    "pixel ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn flipped_normal_gives_mirrored_slice() {
        let mut rng = StdRng::seed_from_u64(21);
        let dims = [20, 20, 20];
        let voxels: Vec<f32> = (0..dims[0] * dims[1] * dims[2])
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        let vol = Volume::new(dims, [0.5; 3], voxels).unwrap();
        let n = Vector3::new(0.3, 0.5, 0.8).normalize();
        let plane = Plane::new(n, 1.5).unwrap();
        let flipped = Plane::new(-n, -1.5).unwrap();
        let size = 12;
        let a = vol.extract_slice(&plane, size, 0.75).unwrap();
        let b = vol.extract_slice(&flipped, size, 0.75).unwrap();
        // u flips sign, v is unchanged → horizontal mirror.
        for y in 0..size {
            for x in 0..size {
                assert_relative_eq!(a.pixel(x, y), b.pixel(size - 1 - x, y), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn constant_volume_gives_constant_slice() {
        let vol = Volume::new([24, 24, 24], [0.5; 3], vec![0.37; 24 * 24 * 24]).unwrap();
        let plane = Plane::new(Vector3::new(0.4, -0.3, 0.6), 0.7).unwrap();
        let slice = vol.extract_slice(&plane, 8, 0.5).unwrap();
        for p in slice.pixels() {
            assert_relative_eq!(*p, 0.37, epsilon = 1e-6);
        }
    }

    #[test]
    fn slice_rejects_bad_geometry() {
        let vol = Volume::new([8, 8, 8], [0.5; 3], vec![0.0; 512]).unwrap();
        let plane = Plane::new(Vector3::new(0.0, 0.0, 1.0), 0.0).unwrap();
        assert!(matches!(
            vol.extract_slice(&plane, 4, 1.0),
            Err(VolumeError::InvalidSize { size: 4 })
        ));
        assert!(vol.extract_slice(&plane, 8, 0.0).is_err());
    }

    #[test]
    fn basis_is_orthonormal_and_deterministic() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..200 {
            let n = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if n.norm() < 0.1 {
                continue;
            }
            let n = n.normalize();
            let (u, v) = in_plane_basis(&n);
            assert_relative_eq!(u.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
            assert!(u.dot(&n).abs() < 1e-12);
            assert!(v.dot(&n).abs() < 1e-12);
            assert!(u.dot(&v).abs() < 1e-12);
        }
        // Near-z normals take the fallback axis.
        let (u, _) = in_plane_basis(&Vector3::new(0.0, 0.0, 1.0));
        assert_relative_eq!(u, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }
}
