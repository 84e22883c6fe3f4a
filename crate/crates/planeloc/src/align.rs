//! Rigid registration between landmark sets, plane-specific atlas
//! selection, and warm-start plane construction.
//!
//! With three labeled landmarks the correspondence is known, so the
//! closed-form Kabsch fit is the primary registration; ICP is available as
//! an optional refinement stage over denser point samples.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::landmarks::LandmarkSet;
use crate::plane::{dihedral_angle_deg, Plane};
use crate::volume::PlaneType;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("atlas selection needs at least two records, got {0}")]
    InsufficientRecords(usize),
}

/// Proper rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> RigidTransform {
        RigidTransform { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> RigidTransform {
        RigidTransform { rotation, translation }
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Composition: `self` after `first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let inv = self.rotation.inverse();
        RigidTransform { rotation: inv, translation: -(inv * self.translation) }
    }
}

/// Least-squares rigid fit mapping `src` points onto `dst` points with
/// known correspondence; returns the transform and its residual RMS.
///
/// Needs at least three pairs that are not (nearly) collinear.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(RigidTransform, f64), AlignError> {
    if src.len() != dst.len() {
        return Err(AlignError::DegenerateConfiguration(format!(
            "point counts differ: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(AlignError::DegenerateConfiguration(format!(
            "need at least 3 point pairs, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let c_src: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let c_dst: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (s - c_src) * (d - c_dst).transpose();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| AlignError::DegenerateConfiguration("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| AlignError::DegenerateConfiguration("SVD failed".into()))?;
    // Rank 2 is expected (three points span a plane); rank < 2 means the
    // points are collinear or coincident and the rotation is not unique.
    let s = svd.singular_values;
    if s[1] <= 1e-9 * s[0].max(1e-12) || s[0] <= 1e-12 {
        return Err(AlignError::DegenerateConfiguration(
            "points are collinear or coincident".into(),
        ));
    }
    let det = (v_t.transpose() * u.transpose()).determinant();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rot_mat = v_t.transpose() * correction * u.transpose();
    let rotation = Rotation3::from_matrix_unchecked(rot_mat);
    let translation = c_dst - rotation * c_src;
    let transform = RigidTransform { rotation, translation };

    let mut sq = 0.0;
    for (s, d) in src.iter().zip(dst) {
        sq += (transform.apply(s) - d).norm_squared();
    }
    Ok((transform, (sq / n).sqrt()))
}

/// ICP result: the refined transform plus the RMS after every iteration
/// (including the RMS under the initial transform, at index 0).
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: RigidTransform,
    pub rms_history: Vec<f64>,
}

/// Iterative closest point: alternates nearest-neighbour correspondence and
/// Kabsch alignment until the RMS improvement drops below `tol` or
/// `max_iter` rounds have run. The RMS sequence is non-increasing.
pub fn icp_refine(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    init: &RigidTransform,
    max_iter: usize,
    tol: f64,
) -> Result<IcpResult, AlignError> {
    if src.is_empty() || dst.is_empty() {
        return Err(AlignError::DegenerateConfiguration("empty point cloud".into()));
    }
    let correspondence_rms = |t: &RigidTransform| -> (Vec<Vector3<f64>>, f64) {
        let mut matched = Vec::with_capacity(src.len());
        let mut sq = 0.0;
        for s in src {
            let moved = t.apply(s);
            let mut best = dst[0];
            let mut best_d = f64::INFINITY;
            for d in dst {
                let dd = (moved - d).norm_squared();
                if dd < best_d {
                    best_d = dd;
                    best = *d;
                }
            }
            sq += best_d;
            matched.push(best);
        }
        (matched, (sq / src.len() as f64).sqrt())
    };

    let mut transform = *init;
    let (mut matched, mut rms) = correspondence_rms(&transform);
    let mut history = vec![rms];
    for _ in 0..max_iter {
        let (candidate, _) = kabsch(src, &matched)?;
        let (new_matched, new_rms) = correspondence_rms(&candidate);
        if new_rms > rms {
            // The closed-form fit under stale correspondences cannot improve
            // further; keep the previous transform.
            break;
        }
        transform = candidate;
        matched = new_matched;
        let improved = rms - new_rms;
        rms = new_rms;
        history.push(rms);
        if improved < tol {
            break;
        }
    }
    Ok(IcpResult { transform, rms_history: history })
}

/// Maps a plane through a rigid transform: points on the plane move with
/// `x ↦ R·x + t`, so the normal rotates and the offset picks up `-n'·t`.
pub fn transform_plane(t: &RigidTransform, p: &Plane) -> Plane {
    let normal = t.rotation * p.normal();
    let d = p.d() - normal.dot(&t.translation);
    Plane::new(normal, d).expect("rotation preserves the unit norm")
}

/// One training volume's contribution to atlas selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtlasRecord {
    pub volume_id: u32,
    pub landmarks: LandmarkSet,
    pub tt: Plane,
    pub tc: Plane,
}

impl AtlasRecord {
    pub fn plane(&self, plane_type: PlaneType) -> &Plane {
        match plane_type {
            PlaneType::TT => &self.tt,
            PlaneType::TC => &self.tc,
        }
    }
}

/// Result of atlas selection for one plane type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasChoice {
    pub plane_type: PlaneType,
    pub volume_id: u32,
    /// Sum over the other records of angle (degrees) plus offset gap (mm).
    pub objective: f64,
}

/// How the plane-offset term of the selection objective is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OffsetTerm {
    /// Compare raw `d` values, `|d_j - d_i|`.
    #[default]
    Raw,
    /// Compare the candidate's `d` with the other plane's `d` after mapping
    /// that plane through the pairwise transform.
    Transformed,
}

/// Picks the record whose plane parameters, mapped into every other record's
/// frame by landmark registration, disagree least with the others:
/// `argmin_i Σ_{j≠i} Θ(T_j→i·n_j, n_i) + |d_j - d_i|` with Θ in degrees.
/// Ties break toward the lowest volume id.
pub fn select_atlas(
    records: &[AtlasRecord],
    plane_type: PlaneType,
) -> Result<AtlasChoice, AlignError> {
    select_atlas_with(records, plane_type, OffsetTerm::Raw)
}

/// [`select_atlas`] with an explicit offset-term variant.
pub fn select_atlas_with(
    records: &[AtlasRecord],
    plane_type: PlaneType,
    offset_term: OffsetTerm,
) -> Result<AtlasChoice, AlignError> {
    if records.len() < 2 {
        return Err(AlignError::InsufficientRecords(records.len()));
    }
    let mut best: Option<(u32, f64)> = None;
    for candidate in records {
        let mut objective = 0.0;
        for other in records {
            if other.volume_id == candidate.volume_id {
                continue;
            }
            let (t, _) = kabsch(&other.landmarks.points(), &candidate.landmarks.points())?;
            let mapped = transform_plane(&t, other.plane(plane_type));
            let candidate_plane = candidate.plane(plane_type);
            objective += dihedral_angle_deg(&mapped, candidate_plane);
            objective += match offset_term {
                OffsetTerm::Raw => (other.plane(plane_type).d() - candidate_plane.d()).abs(),
                OffsetTerm::Transformed => (mapped.d() - candidate_plane.d()).abs(),
            };
        }
        let better = match best {
            None => true,
            Some((best_id, best_obj)) => {
                objective < best_obj - 1e-12
                    || ((objective - best_obj).abs() <= 1e-12 && candidate.volume_id < best_id)
            }
        };
        if better {
            best = Some((candidate.volume_id, objective));
        }
    }
    let (volume_id, objective) = best.expect("at least two records");
    Ok(AtlasChoice { plane_type, volume_id, objective })
}

/// Registers the atlas landmarks onto the test landmarks and maps the atlas
/// plane through the fit: the agent's starting plane.
pub fn warm_start(
    test_landmarks: &LandmarkSet,
    atlas: &AtlasRecord,
    plane_type: PlaneType,
) -> Result<Plane, AlignError> {
    let (t, _) = kabsch(&atlas.landmarks.points(), &test_landmarks.points())?;
    Ok(transform_plane(&t, atlas.plane(plane_type)))
}

/// [`warm_start`] with an ICP refinement stage over denser point clouds
/// (e.g. blob-surface samples), seeded by the landmark Kabsch fit.
pub fn warm_start_refined(
    test_landmarks: &LandmarkSet,
    atlas: &AtlasRecord,
    plane_type: PlaneType,
    atlas_cloud: &[Vector3<f64>],
    test_cloud: &[Vector3<f64>],
    max_iter: usize,
    tol: f64,
) -> Result<Plane, AlignError> {
    let (init, _) = kabsch(&atlas.landmarks.points(), &test_landmarks.points())?;
    let refined = icp_refine(atlas_cloud, test_cloud, &init, max_iter, tol)?;
    Ok(transform_plane(&refined.transform, atlas.plane(plane_type)))
}

/// Points on the landmark blob surfaces (a sphere of one blob σ around each
/// landmark), the cloud ICP refinement runs on.
pub fn blob_surface_cloud(landmarks: &LandmarkSet, radius_mm: f64) -> Vec<Vector3<f64>> {
    // 26 directions: the nonzero offsets of a 3×3×3 stencil, normalized.
    let mut cloud = Vec::with_capacity(27 * 3);
    for center in landmarks.points() {
        cloud.push(center);
        for dz in -1i32..=1 {
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let dir = Vector3::new(dx as f64, dy as f64, dz as f64).normalize();
                    cloud.push(center + radius_mm * dir);
                }
            }
        }
    }
    cloud
}
