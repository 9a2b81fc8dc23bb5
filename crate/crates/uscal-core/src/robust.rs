//! RANSAC around the closed-form solvers, orthogonal-distance residuals, and
//! degeneracy diagnostics for the tracked-line configuration.

use crate::calib2d::{
    solve_linear_2d, solve_minimal_2d, solve_minimal_2d_general, Acquisition2D, ScanPlane,
};
use crate::calib3d::{solve_linear_3d, solve_minimal_3d, Acquisition3D, SolutionSet, SolveError};
use crate::geometry::{line_point_distance, Line3, Point3, Similarity};
use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// RMS of the two point-to-line orthogonal distances of the mapped US
/// detections against the tracked needle line (mm).
pub fn residual_3d(a: &Similarity, acq: &Acquisition3D) -> f64 {
    let d1 = line_point_distance(&acq.tracked_line, a.apply(acq.us_points.0));
    let d2 = line_point_distance(&acq.tracked_line, a.apply(acq.us_points.1));
    ((d1 * d1 + d2 * d2) / 2.0).sqrt()
}

/// Orthogonal distance of the mapped image detection (z = 0 embedding)
/// against the tracked needle line (mm).
pub fn residual_2d(a: &Similarity, acq: &Acquisition2D) -> f64 {
    let p = a.apply(Point3::new(acq.us_point.x, acq.us_point.y, 0.0));
    line_point_distance(&acq.tracked_line, p)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("need at least {needed} acquisitions for one minimal sample, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("no model reached the minimum inlier count")]
    NoModelFound,
}

/// RANSAC parameters. `min_inliers == 0` disables the minimum-consensus
/// gate: the best-scoring model is returned even when nothing but its own
/// sample agrees, which keeps low-N trials comparable across methods.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    pub threshold_mm: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
    pub confidence: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            threshold_mm: 5.0,
            max_iterations: 500,
            min_inliers: 0,
            confidence: 0.999,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub model: Similarity,
    pub inlier_mask: Vec<bool>,
    pub iterations_used: usize,
    /// Mean residual over the flagged inliers; NaN when the mask is empty
    /// (possible only with `min_inliers == 0`).
    pub mean_inlier_residual: f64,
}

/// A solver that consumes a fixed-size sample and proposes one or more
/// similarity candidates; every candidate is scored by consensus.
pub trait SampleSolver {
    type Acq: Clone;
    fn sample_size(&self) -> usize;
    fn solve(&self, sample: &[Self::Acq]) -> Result<SolutionSet, SolveError>;
    fn residual(&self, model: &Similarity, acq: &Self::Acq) -> f64;
}

/// Two-correspondence minimal 3D solver handle.
#[derive(Debug, Clone, Copy)]
pub struct Minimal3d {
    pub anchor: Point3,
}

impl SampleSolver for Minimal3d {
    type Acq = Acquisition3D;
    fn sample_size(&self) -> usize {
        2
    }
    fn solve(&self, sample: &[Acquisition3D]) -> Result<SolutionSet, SolveError> {
        solve_minimal_3d(sample, self.anchor)
    }
    fn residual(&self, model: &Similarity, acq: &Acquisition3D) -> f64 {
        residual_3d(model, acq)
    }
}

/// Three-correspondence linear 3D solver handle.
#[derive(Debug, Clone, Copy)]
pub struct Linear3d {
    pub anchor: Point3,
}

impl SampleSolver for Linear3d {
    type Acq = Acquisition3D;
    fn sample_size(&self) -> usize {
        3
    }
    fn solve(&self, sample: &[Acquisition3D]) -> Result<SolutionSet, SolveError> {
        let sim = solve_linear_3d(sample, self.anchor)?;
        let res = sample.iter().map(|a| residual_3d(&sim, a)).sum::<f64>() / sample.len() as f64;
        Ok(SolutionSet {
            candidates: vec![sim],
            residuals: vec![res],
        })
    }
    fn residual(&self, model: &Similarity, acq: &Acquisition3D) -> f64 {
        residual_3d(model, acq)
    }
}

/// Four-point dedicated minimal 2D solver handle.
#[derive(Debug, Clone, Copy)]
pub struct Minimal2d {
    pub anchor: Point3,
}

impl SampleSolver for Minimal2d {
    type Acq = Acquisition2D;
    fn sample_size(&self) -> usize {
        4
    }
    fn solve(&self, sample: &[Acquisition2D]) -> Result<SolutionSet, SolveError> {
        solve_minimal_2d(sample, self.anchor)
    }
    fn residual(&self, model: &Similarity, acq: &Acquisition2D) -> f64 {
        residual_2d(model, acq)
    }
}

/// Four-point minimal 2D solver through the general 3D engine.
#[derive(Debug, Clone, Copy)]
pub struct Minimal2dGeneral {
    pub anchor: Point3,
    pub plane: ScanPlane,
}

impl SampleSolver for Minimal2dGeneral {
    type Acq = Acquisition2D;
    fn sample_size(&self) -> usize {
        4
    }
    fn solve(&self, sample: &[Acquisition2D]) -> Result<SolutionSet, SolveError> {
        solve_minimal_2d_general(sample, self.anchor, &self.plane)
    }
    fn residual(&self, model: &Similarity, acq: &Acquisition2D) -> f64 {
        residual_2d(model, acq)
    }
}

/// Five-point linear 2D solver handle.
#[derive(Debug, Clone, Copy)]
pub struct Linear2d {
    pub anchor: Point3,
}

impl SampleSolver for Linear2d {
    type Acq = Acquisition2D;
    fn sample_size(&self) -> usize {
        5
    }
    fn solve(&self, sample: &[Acquisition2D]) -> Result<SolutionSet, SolveError> {
        let sim = solve_linear_2d(sample, self.anchor)?;
        let res = sample.iter().map(|a| residual_2d(&sim, a)).sum::<f64>() / sample.len() as f64;
        Ok(SolutionSet {
            candidates: vec![sim],
            residuals: vec![res],
        })
    }
    fn residual(&self, model: &Similarity, acq: &Acquisition2D) -> f64 {
        residual_2d(model, acq)
    }
}

/// Hypotheses evaluated before the confidence-based early exit may trigger;
/// keeps candidate selection meaningful on all-inlier data.
const MIN_HYPOTHESES: usize = 8;

fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    if inlier_ratio >= 1.0 {
        return MIN_HYPOTHESES;
    }
    let p_good = inlier_ratio.powi(sample_size as i32);
    if p_good <= f64::EPSILON {
        return usize::MAX;
    }
    let denom = (1.0 - p_good).ln();
    if denom >= 0.0 {
        return MIN_HYPOTHESES;
    }
    (((1.0 - confidence).ln() / denom).ceil() as usize).max(MIN_HYPOTHESES)
}

/// Random sample consensus over minimal samples. Every candidate returned by
/// the solver is scored; the model with the most inliers wins, ties broken by
/// lower mean inlier residual. No refit is performed here - refinement is a
/// separate stage. Deterministic for a fixed seed.
pub fn ransac<S: SampleSolver>(
    acqs: &[S::Acq],
    solver: &S,
    cfg: &RansacConfig,
) -> Result<RansacResult, RobustError> {
    let n = acqs.len();
    let m = solver.sample_size();
    if n < m {
        return Err(RobustError::InsufficientData { needed: m, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    struct Best {
        model: Similarity,
        mask: Vec<bool>,
        count: usize,
        /// Mean inlier residual, or mean residual over everything when the
        /// inlier set is empty (tie-break among zero-consensus models).
        tiebreak: f64,
    }
    let mut best: Option<Best> = None;
    let mut needed = cfg.max_iterations;
    let mut iterations = 0usize;

    while iterations < cfg.max_iterations && iterations < needed {
        iterations += 1;
        let idx = rand::seq::index::sample(&mut rng, n, m);
        let sample: Vec<S::Acq> = idx.iter().map(|i| acqs[i].clone()).collect();
        let Ok(set) = solver.solve(&sample) else {
            continue;
        };
        for model in &set.candidates {
            let mut mask = vec![false; n];
            let mut count = 0usize;
            let mut inlier_sum = 0.0;
            let mut total_sum = 0.0;
            for (i, acq) in acqs.iter().enumerate() {
                let r = solver.residual(model, acq);
                total_sum += r;
                if r <= cfg.threshold_mm {
                    mask[i] = true;
                    count += 1;
                    inlier_sum += r;
                }
            }
            if count < cfg.min_inliers {
                continue;
            }
            let tiebreak = if count > 0 {
                inlier_sum / count as f64
            } else {
                total_sum / n as f64
            };
            let better = match &best {
                None => true,
                Some(b) => count > b.count || (count == b.count && tiebreak < b.tiebreak),
            };
            if better {
                best = Some(Best {
                    model: model.clone(),
                    mask,
                    count,
                    tiebreak,
                });
                let ratio = count as f64 / n as f64;
                needed = required_iterations(ratio, m, cfg.confidence).max(iterations);
            }
        }
    }

    match best {
        Some(b) => Ok(RansacResult {
            model: b.model,
            mean_inlier_residual: if b.count > 0 { b.tiebreak } else { f64::NAN },
            inlier_mask: b.mask,
            iterations_used: iterations,
        }),
        None => Err(RobustError::NoModelFound),
    }
}

/// Direction tolerance for the parallel-lines test (radians).
pub const EPS_DIR: f64 = 1e-3;
/// Distance tolerance for the concurrent-lines test (mm).
pub const EPS_PT: f64 = 1.0;
/// Distance tolerance for the coplanar-lines test (mm).
pub const EPS_PL: f64 = 1.0;

/// Ambiguity classes of a tracked-line set: parallel lines leave translation
/// unobservable, concurrent lines leave scale unobservable, and coplanar
/// lines leave a rotation ambiguity for sets of two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DegeneracyFlags {
    pub parallel: bool,
    pub concurrent: bool,
    pub coplanar: bool,
}

impl DegeneracyFlags {
    pub fn any(&self) -> bool {
        self.parallel || self.concurrent || self.coplanar
    }
}

/// Flags raised when all line directions are pairwise parallel within
/// `EPS_DIR`, when all lines pass within `EPS_PT` of their least-squares
/// common point, or when all endpoints fit a common plane within `EPS_PL`.
pub fn diagnose_degeneracy(lines: &[Line3]) -> DegeneracyFlags {
    assert!(lines.len() >= 2, "need at least two lines");
    let dirs: Vec<Vector3<f64>> = lines.iter().map(|l| l.direction()).collect();

    let mut parallel = true;
    'outer: for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            if dirs[i].cross(&dirs[j]).norm() > EPS_DIR {
                parallel = false;
                break 'outer;
            }
        }
    }

    // Least-squares common point: sum of orthogonal projectors.
    let mut lhs = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for line in lines {
        let d = line.direction();
        let proj = Matrix3::identity() - d * d.transpose();
        lhs += proj;
        rhs += proj * line.p0();
    }
    let svd = lhs.svd(true, true);
    let point = svd.solve(&rhs, 1e-9).unwrap_or_else(|_| Vector3::zeros());
    let concurrent = lines
        .iter()
        .all(|l| line_point_distance(l, point) < EPS_PT);

    // Best-fit plane over all endpoints.
    let pts: Vec<Point3> = lines.iter().flat_map(|l| [l.p0(), l.p1()]).collect();
    let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let mut scatter = Matrix3::<f64>::zeros();
    for p in &pts {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let mut min_idx = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let normal = eig.eigenvectors.column(min_idx).into_owned();
    let coplanar = pts
        .iter()
        .all(|p| (p - centroid).dot(&normal).abs() < EPS_PL);

    DegeneracyFlags {
        parallel,
        concurrent,
        coplanar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib3d::test_support::{random_similarity, synthetic_instance_3d};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_3d_zero_for_perfect_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let (a_gt, acqs, _) = synthetic_instance_3d(&mut rng, 5);
        for acq in &acqs {
            assert!(residual_3d(&a_gt, acq) < 1e-9);
        }
    }

    #[test]
    fn residual_3d_equals_perpendicular_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(301);
        let (a_gt, acqs, _) = synthetic_instance_3d(&mut rng, 3);
        for acq in &acqs {
            let dir = acq.tracked_line.direction();
            // Any vector orthogonal to the line direction.
            let mut delta = dir.cross(&Vector3::new(1.0, 0.0, 0.0));
            if delta.norm() < 1e-6 {
                delta = dir.cross(&Vector3::new(0.0, 1.0, 0.0));
            }
            let delta = delta.normalize() * 3.25;
            let displaced = Similarity::new(a_gt.rotation, a_gt.translation + delta, a_gt.scale);
            assert!((residual_3d(&displaced, acq) - 3.25).abs() < 1e-8);
        }
    }

    #[test]
    fn residual_3d_matches_direct_cost_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(302);
        let (_, acqs, _) = synthetic_instance_3d(&mut rng, 4);
        let model = random_similarity(&mut rng);
        for acq in &acqs {
            let d1 = line_point_distance(&acq.tracked_line, model.apply(acq.us_points.0));
            let d2 = line_point_distance(&acq.tracked_line, model.apply(acq.us_points.1));
            let expected = ((d1 * d1 + d2 * d2) / 2.0).sqrt();
            assert!((residual_3d(&model, acq) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_2d_invariant_along_line() {
        use crate::calib2d::test_support::synthetic_instance_2d;
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let (a_gt, acqs, _) = synthetic_instance_2d(&mut rng, 3);
        for acq in &acqs {
            assert!(residual_2d(&a_gt, acq) < 1e-9);
            // Displace the model along the line direction: still zero.
            let delta = acq.tracked_line.direction() * 7.0;
            let slid = Similarity::new(a_gt.rotation, a_gt.translation + delta, a_gt.scale);
            assert!(residual_2d(&slid, acq) < 1e-7);
        }
    }

    #[test]
    fn ransac_noise_free_marks_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(304);
        let (a_gt, acqs, anchor) = synthetic_instance_3d(&mut rng, 20);
        let cfg = RansacConfig {
            rng_seed: 7,
            ..RansacConfig::default()
        };
        let result = ransac(&acqs, &Minimal3d { anchor }, &cfg).unwrap();
        assert!(result.inlier_mask.iter().all(|&b| b));
        let (rot, trans, scale) =
            crate::calib3d::test_support::recovery_errors(&result.model, &a_gt);
        assert!(rot < 1e-6 && trans < 1e-5 && scale < 1e-8);
    }

    #[test]
    fn ransac_same_seed_same_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(305);
        let (_, mut acqs, anchor) = synthetic_instance_3d(&mut rng, 15);
        // Corrupt a few acquisitions.
        for i in [3usize, 8, 12] {
            let (gt2, junk, _) = synthetic_instance_3d(&mut rng, 1);
            let _ = gt2;
            acqs[i] = junk[0].clone();
        }
        let cfg = RansacConfig {
            rng_seed: 99,
            ..RansacConfig::default()
        };
        let a = ransac(&acqs, &Minimal3d { anchor }, &cfg).unwrap();
        let b = ransac(&acqs, &Minimal3d { anchor }, &cfg).unwrap();
        assert_eq!(a.inlier_mask, b.inlier_mask);
        assert_eq!(a.iterations_used, b.iterations_used);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn ransac_mask_reproducible_from_model_and_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(306);
        let (_, mut acqs, anchor) = synthetic_instance_3d(&mut rng, 12);
        for i in [1usize, 6] {
            let (_, junk, _) = synthetic_instance_3d(&mut rng, 1);
            acqs[i] = junk[0].clone();
        }
        let cfg = RansacConfig {
            rng_seed: 4,
            ..RansacConfig::default()
        };
        let result = ransac(&acqs, &Minimal3d { anchor }, &cfg).unwrap();
        for (i, acq) in acqs.iter().enumerate() {
            let r = residual_3d(&result.model, acq);
            assert_eq!(result.inlier_mask[i], r <= cfg.threshold_mm);
        }
    }

    #[test]
    fn ransac_more_iterations_never_worse() {
        let mut rng = ChaCha8Rng::seed_from_u64(307);
        let (_, mut acqs, anchor) = synthetic_instance_3d(&mut rng, 14);
        for i in [0usize, 5, 9, 13] {
            let (_, junk, _) = synthetic_instance_3d(&mut rng, 1);
            acqs[i] = junk[0].clone();
        }
        let mut last = 0usize;
        for max_iterations in [5usize, 20, 80] {
            let cfg = RansacConfig {
                rng_seed: 11,
                max_iterations,
                confidence: 0.999999999,
                ..RansacConfig::default()
            };
            let count = match ransac(&acqs, &Minimal3d { anchor }, &cfg) {
                Ok(r) => r.inlier_mask.iter().filter(|&&b| b).count(),
                Err(_) => 0,
            };
            assert!(count >= last, "inlier count dropped: {count} < {last}");
            last = count;
        }
    }

    #[test]
    fn ransac_rejects_insufficient_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(308);
        let (_, acqs, anchor) = synthetic_instance_3d(&mut rng, 1);
        assert!(matches!(
            ransac(&acqs, &Minimal3d { anchor }, &RansacConfig::default()).unwrap_err(),
            RobustError::InsufficientData { needed: 2, got: 1 }
        ));
    }

    #[test]
    fn degeneracy_parallel_translates() {
        let dir = Vector3::new(0.2, 0.9, 0.4).normalize();
        let lines: Vec<Line3> = (0..5)
            .map(|i| {
                let base = Vector3::new(10.0 * i as f64, -5.0 * i as f64, 2.0 * i as f64 + 30.0);
                Line3::new(base, base + 100.0 * dir).unwrap()
            })
            .collect();
        let flags = diagnose_degeneracy(&lines);
        assert!(flags.parallel);
        assert!(!flags.concurrent);
    }

    #[test]
    fn degeneracy_pencil_through_point() {
        let hub = Vector3::new(25.0, -10.0, 60.0);
        let lines: Vec<Line3> = (0..5)
            .map(|i| {
                let t = i as f64;
                let dir = Vector3::new((t * 1.1).sin(), (t * 0.6).cos(), 0.4 + 0.2 * t).normalize();
                Line3::new(hub - 80.0 * dir, hub + 80.0 * dir).unwrap()
            })
            .collect();
        let flags = diagnose_degeneracy(&lines);
        assert!(flags.concurrent);
        assert!(!flags.parallel);
    }

    #[test]
    fn degeneracy_coplanar_set() {
        // Lines in the plane z = 40 with varied directions and offsets.
        let lines: Vec<Line3> = (0..4)
            .map(|i| {
                let t = i as f64;
                let p = Vector3::new(10.0 * t, 5.0 - 3.0 * t, 40.0);
                let dir = Vector3::new((t + 0.3).cos(), (1.7 * t).sin(), 0.0).normalize();
                Line3::new(p - 60.0 * dir, p + 60.0 * dir).unwrap()
            })
            .collect();
        let flags = diagnose_degeneracy(&lines);
        assert!(flags.coplanar);
    }

    #[test]
    fn degeneracy_generic_lines_unflagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(309);
        for _ in 0..20 {
            let lines: Vec<Line3> = (0..5)
                .map(|_| {
                    let p = Vector3::new(
                        rng.random::<f64>() * 400.0 - 200.0,
                        rng.random::<f64>() * 400.0 - 200.0,
                        rng.random::<f64>() * 400.0 - 200.0,
                    );
                    let d = Vector3::new(
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                        rng.random::<f64>() * 2.0 - 1.0,
                    );
                    Line3::new(p, p + d * 300.0).unwrap()
                })
                .collect();
            let flags = diagnose_degeneracy(&lines);
            assert_eq!(flags, DegeneracyFlags::default());
        }
    }

    #[test]
    fn degeneracy_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(310);
        let hub = Vector3::new(25.0, -10.0, 60.0);
        let lines: Vec<Line3> = (0..4)
            .map(|i| {
                let t = i as f64;
                let dir = Vector3::new((t * 1.3).sin(), (t * 0.9).cos(), 0.5 + 0.1 * t).normalize();
                Line3::new(hub - 70.0 * dir, hub + 70.0 * dir).unwrap()
            })
            .collect();
        let rot = crate::calib3d::test_support::random_rotation(&mut rng);
        let t = Vector3::new(12.0, 90.0, -40.0);
        let moved: Vec<Line3> = lines
            .iter()
            .map(|l| Line3::new(rot * l.p0() + t, rot * l.p1() + t).unwrap())
            .collect();
        assert_eq!(diagnose_degeneracy(&lines), diagnose_degeneracy(&moved));
    }
}
