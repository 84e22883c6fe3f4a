//! Landmark detection in phantom volumes.
//!
//! The detector is a matched filter: the volume is correlated with a
//! Gaussian blob template (normalized cross-correlation, computed with
//! separable passes plus integral images), candidate peaks are collected
//! inside spatial prior balls around the atlas-aligned canonical landmark
//! positions, and the three peaks are assigned to landmark names by matching
//! the triangle they form against the canonical landmark triangle. The
//! triangle match disambiguates genu from splenium (and splenium from
//! vermis) when a pose moves one blob into a neighbouring prior ball.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::phantom::{
    Annotation, BLOB_SIGMA_MM, CANONICAL_GENU, CANONICAL_SPLENIUM, CANONICAL_VERMIS,
};
use crate::volume::Volume;

/// Radius of the spatial prior ball around each canonical position.
pub const PRIOR_RADIUS_MM: f64 = 15.0;
const PEAK_SEPARATION_MM: f64 = 5.0;
const CONFIDENCE_FLOOR: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("best landmark correlation {best:.3} below the {floor} confidence floor")]
    LowConfidence { best: f64, floor: f64 },
    #[error("invalid heatmap spec: {0}")]
    InvalidSpec(String),
}

/// The three named landmark points plus per-point confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub genu: [f64; 3],
    pub splenium: [f64; 3],
    pub vermis: [f64; 3],
    pub confidence: [f64; 3],
}

impl LandmarkSet {
    pub fn points(&self) -> [Vector3<f64>; 3] {
        [
            Vector3::from(self.genu),
            Vector3::from(self.splenium),
            Vector3::from(self.vermis),
        ]
    }

    /// Ground-truth landmarks as a detection result with full confidence.
    pub fn from_annotation(ann: &Annotation) -> LandmarkSet {
        LandmarkSet {
            genu: ann.landmarks.genu,
            splenium: ann.landmarks.splenium,
            vermis: ann.landmarks.vermis,
            confidence: [1.0; 3],
        }
    }
}

/// Gaussian blob shape used both for heatmap rendering and as the matched
/// filter template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    /// Gaussian spread in mm.
    pub sigma_mm: f64,
    /// Template half-width in voxels.
    pub template_radius: usize,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec { sigma_mm: BLOB_SIGMA_MM, template_radius: 8 }
    }
}

impl HeatmapSpec {
    fn validate(&self, spacing: &[f64; 3]) -> Result<(), DetectError> {
        if !(self.sigma_mm > 0.0) || !self.sigma_mm.is_finite() {
            return Err(DetectError::InvalidSpec(format!("sigma {} not positive", self.sigma_mm)));
        }
        let min_spacing = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let needed = (2.0 * self.sigma_mm / min_spacing).ceil() as usize;
        if self.template_radius < needed {
            return Err(DetectError::InvalidSpec(format!(
                "template radius {} below 2σ/spacing = {}",
                self.template_radius, needed
            )));
        }
        Ok(())
    }
}

/// Renders `exp(-‖x - center‖² / 2σ²)` over the volume's grid.
pub fn gaussian_heatmap(
    volume: &Volume,
    center: &Vector3<f64>,
    spec: &HeatmapSpec,
) -> Result<Volume, DetectError> {
    spec.validate(&volume.spacing())?;
    if !center.iter().all(|c| c.is_finite()) {
        return Err(DetectError::InvalidSpec("non-finite heatmap center".into()));
    }
    let dims = volume.dims();
    let inv = 1.0 / (2.0 * spec.sigma_mm * spec.sigma_mm);
    let mut voxels = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    let mut idx = 0;
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let p = volume.voxel_center_mm(i, j, k);
                voxels[idx] = (-(p - center).norm_squared() * inv).exp() as f32;
                idx += 1;
            }
        }
    }
    Ok(Volume::new(dims, volume.spacing(), voxels).expect("heatmap voxels are finite"))
}

/// Detects the three landmarks by matched filtering; see the module docs.
pub fn detect_landmarks(volume: &Volume, spec: &HeatmapSpec) -> Result<LandmarkSet, DetectError> {
    spec.validate(&volume.spacing())?;
    let ncc = NccField::compute(volume, spec);
    let priors = [
        Vector3::from(CANONICAL_GENU),
        Vector3::from(CANONICAL_SPLENIUM),
        Vector3::from(CANONICAL_VERMIS),
    ];
    let peaks = ncc.peaks_in_balls(volume, &priors, PRIOR_RADIUS_MM);
    if peaks.len() < 3 {
        let best = peaks.first().map(|p| p.score).unwrap_or(0.0);
        return Err(DetectError::LowConfidence { best, floor: CONFIDENCE_FLOOR });
    }

    let assignment = best_triangle_assignment(&peaks, &priors)
        .ok_or(DetectError::LowConfidence { best: peaks[0].score, floor: CONFIDENCE_FLOOR })?;
    let chosen: Vec<&Peak> = assignment.iter().map(|&i| &peaks[i]).collect();
    if chosen.iter().any(|p| p.score < CONFIDENCE_FLOOR) {
        let best = chosen.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
        return Err(DetectError::LowConfidence { best, floor: CONFIDENCE_FLOOR });
    }
    let pos = |p: &Peak| [p.position.x, p.position.y, p.position.z];
    Ok(LandmarkSet {
        genu: pos(chosen[0]),
        splenium: pos(chosen[1]),
        vermis: pos(chosen[2]),
        confidence: [
            chosen[0].score.clamp(0.0, 1.0),
            chosen[1].score.clamp(0.0, 1.0),
            chosen[2].score.clamp(0.0, 1.0),
        ],
    })
}

/// Ground-truth landmarks plus isotropic Gaussian noise of the given
/// per-axis standard deviation; the knob for alignment-error experiments.
pub fn perturbed_oracle(ann: &Annotation, noise_mm: f64, seed: u64) -> LandmarkSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |p: [f64; 3]| -> [f64; 3] {
        let mut out = p;
        for v in out.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += noise_mm * n;
        }
        out
    };
    LandmarkSet {
        genu: jitter(ann.landmarks.genu),
        splenium: jitter(ann.landmarks.splenium),
        vermis: jitter(ann.landmarks.vermis),
        confidence: [1.0; 3],
    }
}

#[derive(Debug, Clone)]
struct Peak {
    voxel: [usize; 3],
    position: Vector3<f64>,
    score: f64,
}

/// Normalized cross-correlation of the volume against the Gaussian template,
/// defined at every voxel whose template window fits inside the grid.
struct NccField {
    dims: [usize; 3],
    radius: usize,
    values: Vec<f64>,
}

impl NccField {
    /// Gaussian-windowed NCC: local means and variances are weighted by the
    /// template's own window (like SSIM's windowing), so far-off corners of
    /// the support barely count and nearby structure edges cannot drag the
    /// peak away from the blob center. Every field is a separable pass.
    fn compute(volume: &Volume, spec: &HeatmapSpec) -> NccField {
        let dims = volume.dims();
        let spacing = volume.spacing();
        let r = spec.template_radius;
        let sigma_sq = spec.sigma_mm * spec.sigma_mm;

        // Per-axis template taps g and their powers.
        let g: Vec<Vec<f64>> = (0..3)
            .map(|axis| {
                (-(r as i64)..=r as i64)
                    .map(|k| {
                        let d = k as f64 * spacing[axis];
                        (-d * d / (2.0 * sigma_sq)).exp()
                    })
                    .collect()
            })
            .collect();
        let pow_sum = |p: u32| -> f64 {
            g.iter()
                .map(|t| t.iter().map(|v| v.powi(p as i32)).sum::<f64>())
                .product()
        };
        let t_sum = pow_sum(1);
        let t_sumsq = pow_sum(2);
        let t_sumcube = pow_sum(3);
        // Template moments under its own (normalized) window w = T / ΣT.
        let mu_t = t_sumsq / t_sum;
        let var_t = (t_sumcube / t_sum - mu_t * mu_t).max(0.0);

        let w_taps: Vec<Vec<f64>> = g
            .iter()
            .map(|t| {
                let s: f64 = t.iter().sum();
                t.iter().map(|v| v / s).collect()
            })
            .collect();
        let g2_taps: Vec<Vec<f64>> = g
            .iter()
            .map(|t| t.iter().map(|v| v * v).collect())
            .collect();

        let raw: Vec<f64> = volume.voxels().iter().map(|v| *v as f64).collect();
        let raw_sq: Vec<f64> = raw.iter().map(|v| v * v).collect();
        let mean_p = separable_correlate(&raw, dims, &w_taps, r);
        let mean_p_sq = separable_correlate(&raw_sq, dims, &w_taps, r);
        let corr_t2 = separable_correlate(&raw, dims, &g2_taps, r);

        let mut values = vec![0.0f64; raw.len()];
        if var_t > 0.0 {
            let t_norm = var_t.sqrt();
            for (idx, out) in values.iter_mut().enumerate() {
                let mu_p = mean_p[idx];
                let var_p = (mean_p_sq[idx] - mu_p * mu_p).max(0.0);
                if var_p < 1e-12 {
                    continue;
                }
                let cov = corr_t2[idx] / t_sum - mu_t * mu_p;
                *out = cov / (t_norm * var_p.sqrt());
            }
        }
        NccField { dims, radius: r, values }
    }

    fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    /// Local maxima of the field inside any of the prior balls, strongest
    /// first, thinned to a minimum mutual separation.
    fn peaks_in_balls(&self, volume: &Volume, centers: &[Vector3<f64>], radius_mm: f64) -> Vec<Peak> {
        let margin = self.radius.max(1);
        let mut candidates: Vec<Peak> = Vec::new();
        if self.dims.iter().any(|&d| d <= 2 * margin) {
            return candidates;
        }
        for k in margin..self.dims[2] - margin {
            for j in margin..self.dims[1] - margin {
                'voxel: for i in margin..self.dims[0] - margin {
                    let p = volume.voxel_center_mm(i, j, k);
                    if !centers.iter().any(|c| (p - c).norm() <= radius_mm) {
                        continue;
                    }
                    let v = self.value(i, j, k);
                    if v <= 0.05 {
                        continue;
                    }
                    for dk in -1i64..=1 {
                        for dj in -1i64..=1 {
                            for di in -1i64..=1 {
                                if di == 0 && dj == 0 && dk == 0 {
                                    continue;
                                }
                                let nb = self.value(
                                    (i as i64 + di) as usize,
                                    (j as i64 + dj) as usize,
                                    (k as i64 + dk) as usize,
                                );
                                if nb > v {
                                    continue 'voxel;
                                }
                            }
                        }
                    }
                    candidates.push(Peak { voxel: [i, j, k], position: p, score: v });
                }
            }
        }
        // Strongest first; ties broken by voxel index for determinism.
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.voxel.cmp(&b.voxel))
        });
        let mut kept: Vec<Peak> = Vec::new();
        for c in candidates {
            if kept.iter().all(|k| (k.position - c.position).norm() >= PEAK_SEPARATION_MM) {
                kept.push(c);
                if kept.len() == 8 {
                    break;
                }
            }
        }
        kept
    }
}

// A plausible landmark triple may disagree with the (scaled) canonical
// triangle by at most this much, summed over the three edges. Detection
// noise of ~1 voxel per point contributes well under 3 mm.
const EDGE_MISFIT_GATE_MM: f64 = 9.0;

/// Picks the peak triple that looks most like the canonical landmark
/// triangle. Triples must respect the per-landmark prior balls; among those
/// whose pairwise-distance pattern matches the (scale-adjusted) canonical
/// triangle within a gate, the strongest-correlating triple wins, which
/// keeps spurious speckle peaks from displacing a true blob.
fn best_triangle_assignment(peaks: &[Peak], priors: &[Vector3<f64>; 3]) -> Option<[usize; 3]> {
    let canonical = [
        Vector3::from(CANONICAL_GENU),
        Vector3::from(CANONICAL_SPLENIUM),
        Vector3::from(CANONICAL_VERMIS),
    ];
    let canon_edges = [
        (canonical[0] - canonical[1]).norm(),
        (canonical[0] - canonical[2]).norm(),
        (canonical[1] - canonical[2]).norm(),
    ];
    let canon_total: f64 = canon_edges.iter().sum();

    struct Candidate {
        trio: [usize; 3],
        misfit: f64,
        score: f64,
    }
    let mut gated: Option<Candidate> = None;
    let mut fallback: Option<Candidate> = None;
    let k = peaks.len();
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                if a == b || a == c || b == c {
                    continue;
                }
                let trio = [a, b, c];
                let in_balls = trio
                    .iter()
                    .zip(priors)
                    .all(|(&pi, prior)| (peaks[pi].position - prior).norm() <= PRIOR_RADIUS_MM);
                if !in_balls {
                    continue;
                }
                let edges = [
                    (peaks[a].position - peaks[b].position).norm(),
                    (peaks[a].position - peaks[c].position).norm(),
                    (peaks[b].position - peaks[c].position).norm(),
                ];
                let scale = (edges.iter().sum::<f64>() / canon_total).clamp(0.8, 1.2);
                let misfit: f64 = edges
                    .iter()
                    .zip(&canon_edges)
                    .map(|(e, ce)| (e - scale * ce).abs())
                    .sum();
                let score: f64 = trio.iter().map(|&i| peaks[i].score).sum();
                let cand = Candidate { trio, misfit, score };
                if misfit <= EDGE_MISFIT_GATE_MM {
                    let better = match &gated {
                        None => true,
                        Some(best) => {
                            score > best.score + 1e-12
                                || ((score - best.score).abs() <= 1e-12 && misfit < best.misfit)
                        }
                    };
                    if better {
                        gated = Some(cand);
                        continue;
                    }
                } else {
                    let better = match &fallback {
                        None => true,
                        Some(best) => {
                            misfit < best.misfit - 1e-9
                                || ((misfit - best.misfit).abs() <= 1e-9 && score > best.score)
                        }
                    };
                    if better {
                        fallback = Some(cand);
                    }
                }
            }
        }
    }
    gated.or(fallback).map(|c| c.trio)
}

/// Correlates a volume-shaped buffer with per-axis taps (zero-padded).
fn separable_correlate(input: &[f64], dims: [usize; 3], taps: &[Vec<f64>], r: usize) -> Vec<f64> {
    let mut field = input.to_vec();
    let mut scratch = vec![0.0f64; input.len()];
    let stride = [1usize, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let len = dims[axis];
        let st = stride[axis];
        let (a, b, sa, sb) = match axis {
            0 => (dims[1], dims[2], stride[1], stride[2]),
            1 => (dims[0], dims[2], stride[0], stride[2]),
            _ => (dims[0], dims[1], stride[0], stride[1]),
        };
        for ib in 0..b {
            for ia in 0..a {
                let base = ia * sa + ib * sb;
                for pos in 0..len {
                    let lo = pos.saturating_sub(r);
                    let hi = (pos + r).min(len - 1);
                    let mut acc = 0.0;
                    for q in lo..=hi {
                        acc += taps[axis][q + r - pos] * field[base + q * st];
                    }
                    scratch[base + pos * st] = acc;
                }
            }
        }
        std::mem::swap(&mut field, &mut scratch);
    }
    field
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::phantom::{generate_phantom_with, PhantomConfig, Pose};
    use rand::{Rng, SeedableRng};

    fn default_pose_sample(rng: &mut impl Rng) -> Pose {
        Pose {
            rotation_deg: [
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
            ],
            translation_mm: [
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
            ],
            scale: rng.gen_range(0.9..1.1),
        }
    }

    #[test]
    fn heatmap_values_match_closed_form() {
        let vol = Volume::new([32, 32, 32], [0.5; 3], vec![0.0; 32 * 32 * 32]).unwrap();
        let spec = HeatmapSpec::default();
        let center = vol.voxel_center_mm(16, 16, 16);
        let hm = gaussian_heatmap(&vol, &center, &spec).unwrap();
        assert!((hm.voxel(16, 16, 16) as f64 - 1.0).abs() < 1e-6);
        // One σ away along x: 2 mm = 4 voxels.
        let v = hm.voxel(20, 16, 16) as f64;
        assert!((v - (-0.5f64).exp()).abs() < 1e-6, "value {v}");
    }

    #[test]
    fn heatmap_integral_shift_invariant() {
        let vol = Volume::new([48, 48, 48], [0.5; 3], vec![0.0; 48 * 48 * 48]).unwrap();
        let spec = HeatmapSpec::default();
        let sum = |hm: &Volume| hm.voxels().iter().map(|v| *v as f64).sum::<f64>();
        let a = gaussian_heatmap(&vol, &vol.voxel_center_mm(22, 24, 23), &spec).unwrap();
        let b = gaussian_heatmap(&vol, &vol.voxel_center_mm(23, 24, 23), &spec).unwrap();
        assert!((sum(&a) - sum(&b)).abs() < 1e-6 * sum(&a));
    }

    #[test]
    fn heatmap_spec_validation() {
        let vol = Volume::new([8, 8, 8], [0.5; 3], vec![0.0; 512]).unwrap();
        let bad = HeatmapSpec { sigma_mm: 2.0, template_radius: 4 };
        assert!(matches!(
            gaussian_heatmap(&vol, &Vector3::zeros(), &bad),
            Err(DetectError::InvalidSpec(_))
        ));
        let bad = HeatmapSpec { sigma_mm: 0.0, template_radius: 8 };
        assert!(gaussian_heatmap(&vol, &Vector3::zeros(), &bad).is_err());
    }

    #[test]
    fn detects_noise_free_landmarks_within_half_voxel() {
        let cfg = PhantomConfig { speckle_amp: 0.0, ..Default::default() };
        let pose = Pose { rotation_deg: [15.0, -10.0, 25.0], translation_mm: [2.0, -1.5, 1.0], scale: 1.05 };
        let (vol, ann) = generate_phantom_with(&cfg, 11, &pose).unwrap();
        let det = detect_landmarks(&vol, &HeatmapSpec::default()).unwrap();
        for (got, want) in det.points().iter().zip(ann.landmark_points()) {
            assert!((got - want).norm() <= 0.5, "error {}", (got - want).norm());
        }
        assert!(det.confidence.iter().all(|c| *c > 0.8));
    }

    #[test]
    fn detection_under_speckle_and_pose_equivariance() {
        // Speckled phantoms over random poses: detected points land within
        // 2 mm of the pose-transformed canonical landmarks for ≥ 95% of seeds.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(404);
        let total = 100;
        let mut hits = 0;
        for seed in 0..total {
            let pose = default_pose_sample(&mut rng);
            let (vol, ann) = generate_phantom_with(&PhantomConfig::default(), seed, &pose).unwrap();
            match detect_landmarks(&vol, &HeatmapSpec::default()) {
                Ok(det) => {
                    let errs: Vec<f64> = det
                        .points()
                        .iter()
                        .zip(ann.landmark_points())
                        .map(|(got, want)| (got - want).norm())
                        .collect();
                    if errs.iter().all(|e| *e <= 2.0) {
                        hits += 1;
                    } else {
                        println!("seed {seed}: errs {errs:?} conf {:?} pose {pose:?}", det.confidence);
                    }
                }
                Err(e) => println!("seed {seed}: {e}"),
            }
        }
        assert!(hits >= 95, "only {hits}/{total} phantoms within 2 mm");
    }

    #[test]
    fn confidence_declines_with_speckle() {
        let amps = [0.0, 0.1, 0.2, 0.4];
        let mut means = Vec::new();
        for amp in amps {
            let cfg = PhantomConfig { speckle_amp: amp, ..Default::default() };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
            let mut acc = 0.0;
            let mut count = 0;
            for seed in 0..8 {
                let pose = default_pose_sample(&mut rng);
                let (vol, _) = generate_phantom_with(&cfg, seed, &pose).unwrap();
                let det = detect_landmarks(&vol, &HeatmapSpec::default()).unwrap();
                acc += det.confidence.iter().sum::<f64>();
                count += 3;
            }
            means.push(acc / count as f64);
        }
        for pair in means.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "confidence means not non-increasing: {means:?}");
        }
    }

    #[test]
    fn all_zero_volume_is_low_confidence() {
        let vol = Volume::new([96, 96, 96], [0.5; 3], vec![0.0; 96 * 96 * 96]).unwrap();
        let err = detect_landmarks(&vol, &HeatmapSpec::default()).unwrap_err();
        assert!(matches!(err, DetectError::LowConfidence { .. }));
    }

    #[test]
    fn perturbed_oracle_zero_noise_is_exact_and_seeded() {
        let ann = crate::volume::phantom::annotation_for_pose(&Pose::identity()).unwrap();
        let clean = perturbed_oracle(&ann, 0.0, 5);
        assert_eq!(clean.genu, ann.landmarks.genu);
        assert_eq!(clean.splenium, ann.landmarks.splenium);
        assert_eq!(clean.vermis, ann.landmarks.vermis);
        let a = perturbed_oracle(&ann, 2.0, 5);
        let b = perturbed_oracle(&ann, 2.0, 5);
        assert_eq!(a, b);
        let c = perturbed_oracle(&ann, 2.0, 6);
        assert_ne!(a, c);
    }

    #[test]
    fn perturbed_oracle_mean_displacement_matches_chi_distribution() {
        // Mean of ‖N(0, σ²I₃)‖ is σ·√(8/π).
        let ann = crate::volume::phantom::annotation_for_pose(&Pose::identity()).unwrap();
        let noise = 2.0;
        let mut acc = 0.0;
        let draws = 10_000;
        for seed in 0..draws {
            let set = perturbed_oracle(&ann, noise, seed);
            acc += (set.points()[0] - ann.genu()).norm();
        }
        let mean = acc / draws as f64;
        let want = noise * (8.0 / std::f64::consts::PI).sqrt();
        assert!((mean - want).abs() < 0.05 * want, "mean {mean} want {want}");
    }
}
