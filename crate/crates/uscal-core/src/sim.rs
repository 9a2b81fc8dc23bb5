//! Synthetic-experiment harness: scene generation for a fixed probe scanning
//! a needle at random poses, paper-style noise injection, per-method trial
//! loops with consensus and refinement, and the error statistics they report.

use crate::calib2d::{Acquisition2D, ScanPlane};
use crate::calib3d::Acquisition3D;
use crate::geometry::{rotation_error, Line3, Point3, Similarity};
use crate::refine::{refine_2d, refine_3d, RefineConfig};
use crate::robust::{
    ransac, Linear2d, Linear3d, Minimal2d, Minimal2dGeneral, Minimal3d, RansacConfig, SampleSolver,
};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Experiment configuration; every field has the default used by the
/// reported trends, so partial config files only override what they name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Ground-truth scale factor (mm per US unit).
    pub scale_gt: f64,
    /// Number of needle poses in each pool.
    pub n_lines: usize,
    pub segment_length_mm: f64,
    /// In-slice detection noise, US units (1 US unit = 1 pixel).
    pub noise_us_sigma: f64,
    /// Tracking noise on the segment endpoints (mm).
    pub noise_track_sigma_mm: f64,
    pub trials_per_n: usize,
    /// Inclusive acquisition-count range for the 3D methods.
    pub n_range_3d: [usize; 2],
    /// Inclusive acquisition-count range for the 2D methods.
    pub n_range_2d: [usize; 2],
    pub rng_seed: u64,
    /// Scanning radius of the probe field of view (mm).
    pub fov_radius_mm: f64,
    /// Half-aperture of the field of view around the depth axis (degrees).
    pub fov_half_angle_deg: f64,
    /// Sweep angle of the two sampled slices for 3D detections (degrees).
    pub slice_angle_deg: f64,
    /// Needle poses closer than this to the marker origin are re-drawn; the
    /// plane-pair construction degenerates near the anchor.
    pub min_anchor_clearance_mm: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            scale_gt: 0.24,
            n_lines: 50,
            segment_length_mm: 400.0,
            noise_us_sigma: 1.0,
            noise_track_sigma_mm: 1.0,
            trials_per_n: 100,
            n_range_3d: [3, 10],
            n_range_2d: [5, 10],
            rng_seed: 0,
            fov_radius_mm: 120.0,
            fov_half_angle_deg: 30.0,
            slice_angle_deg: 15.0,
            min_anchor_clearance_mm: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Linear3d,
    Minimal3d,
    Linear2d,
    Minimal2d,
    Minimal2dGeneral,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::Linear3d => "linear3d",
            MethodTag::Minimal3d => "minimal3d",
            MethodTag::Linear2d => "linear2d",
            MethodTag::Minimal2d => "minimal2d",
            MethodTag::Minimal2dGeneral => "minimal2d_general",
        }
    }
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One calibration trial: errors against the scene ground truth, or a failure
/// flag when the sample was unsolvable (error fields are NaN then).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub method: MethodTag,
    pub n_used: usize,
    pub trial: usize,
    pub rot_err_rad: f64,
    pub trans_err_mm: f64,
    pub scale_err: f64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub a_gt: Similarity,
    pub pool3d: Vec<Acquisition3D>,
    pub pool2d: Vec<Acquisition2D>,
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(
        gauss(rng),
        gauss(rng),
        gauss(rng),
        gauss(rng),
    ))
}

/// Splitmix-style mixing for per-trial substreams.
fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// In-plane orthonormal basis of the slice swept to angle `theta` about the
/// depth axis (+y); `theta = 0` is the z = 0 image plane.
fn slice_basis(theta: f64) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(theta.cos(), 0.0, theta.sin()),
        Vector3::new(0.0, 1.0, 0.0),
    )
}

/// Uniform-ish point inside the curvilinear field of view restricted to one
/// slice: depth in [0.25, 0.95] of the scanning radius, bearing within 95%
/// of the half-aperture.
fn sample_fov_point(cfg: &SimConfig, theta: f64, rng: &mut impl Rng) -> Vector3<f64> {
    let radius_us = cfg.fov_radius_mm / cfg.scale_gt;
    let half = cfg.fov_half_angle_deg.to_radians() * 0.95;
    let (e1, e2) = slice_basis(theta);
    let rho = (0.25 + 0.70 * rng.random::<f64>()) * radius_us;
    let phi = (rng.random::<f64>() * 2.0 - 1.0) * half;
    rho * (phi.sin() * e1 + phi.cos() * e2)
}

fn inside_fov(cfg: &SimConfig, p: &Vector3<f64>) -> bool {
    let radius_us = cfg.fov_radius_mm / cfg.scale_gt;
    let rho = p.norm();
    if rho < 0.2 * radius_us || rho > radius_us {
        return false;
    }
    let bearing = (p.y / rho).clamp(-1.0, 1.0).acos();
    bearing <= cfg.fov_half_angle_deg.to_radians()
}

/// Intersection of the line `q + t d` with the slice plane at `theta`.
fn slice_intersection(q: Vector3<f64>, d: Vector3<f64>, theta: f64) -> Option<Vector3<f64>> {
    let normal = Vector3::new(-theta.sin(), 0.0, theta.cos());
    let denom = normal.dot(&d);
    if denom.abs() < 1e-6 {
        return None;
    }
    Some(q - (normal.dot(&q) / denom) * d)
}

/// Builds the ground-truth similarity and the acquisition pools. One shared
/// set of needle poses feeds both probes, as in the simulated setup where the
/// 2D slice is extracted from the 3D volume: each needle crosses the central
/// image plane inside the field of view (the 2D detection) and both sampling
/// slices (the 3D detections). With zero noise every acquisition is exactly
/// consistent with the returned transform; detections are perturbed in-slice
/// and segment endpoints in 3D.
pub fn generate_scene(cfg: &SimConfig, rng: &mut impl Rng) -> Scene {
    let a_gt = Similarity::new(
        random_rotation(rng),
        Vector3::new(
            (rng.random::<f64>() * 2.0 - 1.0) * 200.0,
            (rng.random::<f64>() * 2.0 - 1.0) * 200.0,
            (rng.random::<f64>() * 2.0 - 1.0) * 200.0,
        ),
        cfg.scale_gt,
    );
    let radius_us = cfg.fov_radius_mm / cfg.scale_gt;
    let theta = cfg.slice_angle_deg.to_radians();
    let half_len = cfg.segment_length_mm / 2.0;

    let mut pool3d = Vec::with_capacity(cfg.n_lines);
    let mut pool2d = Vec::with_capacity(cfg.n_lines);
    while pool3d.len() < cfg.n_lines {
        // Needle pose in the scan frame: where it crosses the central image
        // plane, and a direction transverse to the slice fan.
        let crossing = sample_fov_point(cfg, 0.0, rng);
        let dir_us = Vector3::new(gauss(rng), gauss(rng), gauss(rng)).normalize();
        if dir_us.z.abs() < 0.05 {
            continue;
        }
        let Some(x) = slice_intersection(crossing, dir_us, -theta) else {
            continue;
        };
        let Some(x_star) = slice_intersection(crossing, dir_us, theta) else {
            continue;
        };
        if !inside_fov(cfg, &x) || !inside_fov(cfg, &x_star) {
            continue;
        }
        if (x - x_star).norm() < 0.02 * radius_us {
            continue;
        }

        // Tracked segment in the marker frame, midpoint offset along the
        // needle so the crossing is not always centered.
        let p_m = a_gt.apply(crossing);
        let dir_m = (a_gt.apply(crossing + 100.0 * dir_us) - p_m).normalize();
        let offset = (rng.random::<f64>() - 0.5) * 0.5 * cfg.segment_length_mm;
        let mid = p_m + offset * dir_m;
        let line = Line3::new(mid - half_len * dir_m, mid + half_len * dir_m)
            .expect("segment endpoints separated");
        if crate::geometry::line_point_distance(&line, Point3::zeros())
            < cfg.min_anchor_clearance_mm
        {
            continue;
        }

        // 3D probe: in-slice detection noise and endpoint tracking noise.
        let (e1a, e2a) = slice_basis(-theta);
        let (e1b, e2b) = slice_basis(theta);
        let x_noisy = x + cfg.noise_us_sigma * (gauss(rng) * e1a + gauss(rng) * e2a);
        let x_star_noisy = x_star + cfg.noise_us_sigma * (gauss(rng) * e1b + gauss(rng) * e2b);
        let p0 = line.p0()
            + cfg.noise_track_sigma_mm * Vector3::new(gauss(rng), gauss(rng), gauss(rng));
        let p1 = line.p1()
            + cfg.noise_track_sigma_mm * Vector3::new(gauss(rng), gauss(rng), gauss(rng));
        let Ok(line3) = Line3::new(p0, p1) else {
            continue;
        };
        let Ok(acq3) = Acquisition3D::new(line3, x_noisy, x_star_noisy) else {
            continue;
        };

        // 2D probe: same needle, image-point detection on the central plane,
        // independent noise draws.
        let us = Vector2::new(crossing.x, crossing.y)
            + cfg.noise_us_sigma * Vector2::new(gauss(rng), gauss(rng));
        let q0 = line.p0()
            + cfg.noise_track_sigma_mm * Vector3::new(gauss(rng), gauss(rng), gauss(rng));
        let q1 = line.p1()
            + cfg.noise_track_sigma_mm * Vector3::new(gauss(rng), gauss(rng), gauss(rng));
        let Ok(line2) = Line3::new(q0, q1) else {
            continue;
        };
        let Ok(acq2) = Acquisition2D::new(line2, us) else {
            continue;
        };

        pool3d.push(acq3);
        pool2d.push(acq2);
    }

    Scene {
        a_gt,
        pool3d,
        pool2d,
    }
}

fn errors_against(gt: &Similarity, sim: &Similarity) -> (f64, f64, f64) {
    (
        rotation_error(&sim.rotation_matrix(), &gt.rotation_matrix()),
        (gt.translation - sim.translation).norm(),
        (gt.scale - sim.scale).abs(),
    )
}

fn failed_report(method: MethodTag, n: usize, trial: usize) -> TrialReport {
    TrialReport {
        method,
        n_used: n,
        trial,
        rot_err_rad: f64::NAN,
        trans_err_mm: f64::NAN,
        scale_err: f64::NAN,
        failed: true,
    }
}

fn run_method_3d<S>(
    solver: &S,
    method: MethodTag,
    subset: &[Acquisition3D],
    a_gt: &Similarity,
    n: usize,
    trial: usize,
    seed: u64,
) -> TrialReport
where
    S: SampleSolver<Acq = Acquisition3D>,
{
    let cfg = RansacConfig {
        rng_seed: seed,
        ..RansacConfig::default()
    };
    let Ok(consensus) = ransac(subset, solver, &cfg) else {
        return failed_report(method, n, trial);
    };
    let mut inliers: Vec<Acquisition3D> = subset
        .iter()
        .zip(&consensus.inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| a.clone())
        .collect();
    if inliers.len() < 2 {
        // Below the refinement minimum: refine against the whole subset.
        inliers = subset.to_vec();
    }
    let Ok(refined) = refine_3d(&inliers, &consensus.model, &RefineConfig::default()) else {
        return failed_report(method, n, trial);
    };
    let (rot, trans, scale) = errors_against(a_gt, &refined);
    TrialReport {
        method,
        n_used: n,
        trial,
        rot_err_rad: rot,
        trans_err_mm: trans,
        scale_err: scale,
        failed: false,
    }
}

fn run_method_2d<S>(
    solver: &S,
    method: MethodTag,
    subset: &[Acquisition2D],
    a_gt: &Similarity,
    n: usize,
    trial: usize,
    seed: u64,
) -> TrialReport
where
    S: SampleSolver<Acq = Acquisition2D>,
{
    let cfg = RansacConfig {
        rng_seed: seed,
        ..RansacConfig::default()
    };
    let Ok(consensus) = ransac(subset, solver, &cfg) else {
        return failed_report(method, n, trial);
    };
    let mut inliers: Vec<Acquisition2D> = subset
        .iter()
        .zip(&consensus.inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| a.clone())
        .collect();
    if inliers.len() < 4 {
        inliers = subset.to_vec();
    }
    let Ok(refined) = refine_2d(&inliers, &consensus.model, &RefineConfig::default()) else {
        return failed_report(method, n, trial);
    };
    let (rot, trans, scale) = errors_against(a_gt, &refined);
    TrialReport {
        method,
        n_used: n,
        trial,
        rot_err_rad: rot,
        trans_err_mm: trans,
        scale_err: scale,
        failed: false,
    }
}

/// Runs the full trial grid: for every acquisition count in each mode's range
/// and every trial, a random subset of the pool is calibrated by each method
/// (consensus at the 5 mm threshold, then refinement on the inliers), and the
/// three error metrics are recorded against the ground truth. Deterministic
/// for a fixed config; methods at the same (N, trial) see the same subset.
pub fn run_experiment(cfg: &SimConfig) -> Vec<TrialReport> {
    let mut scene_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let scene = generate_scene(cfg, &mut scene_rng);
    let anchor = Point3::zeros();
    let mut reports = Vec::new();

    let n_lo = cfg.n_range_3d[0].min(cfg.n_range_2d[0]);
    let n_hi = cfg.n_range_3d[1].max(cfg.n_range_2d[1]);
    for n in n_lo..=n_hi {
        let in_3d = n >= cfg.n_range_3d[0] && n <= cfg.n_range_3d[1];
        let in_2d = n >= cfg.n_range_2d[0] && n <= cfg.n_range_2d[1];
        for trial in 0..cfg.trials_per_n {
            // One needle subset per (N, trial), shared by every method so
            // the comparisons are paired.
            let tseed = mix_seed(cfg.rng_seed, mix_seed(n as u64, trial as u64));
            let mut trng = ChaCha8Rng::seed_from_u64(tseed);
            let idx = rand::seq::index::sample(&mut trng, cfg.n_lines, n);
            if in_3d {
                let subset: Vec<Acquisition3D> =
                    idx.iter().map(|i| scene.pool3d[i].clone()).collect();
                reports.push(run_method_3d(
                    &Linear3d { anchor },
                    MethodTag::Linear3d,
                    &subset,
                    &scene.a_gt,
                    n,
                    trial,
                    mix_seed(tseed, 1),
                ));
                reports.push(run_method_3d(
                    &Minimal3d { anchor },
                    MethodTag::Minimal3d,
                    &subset,
                    &scene.a_gt,
                    n,
                    trial,
                    mix_seed(tseed, 2),
                ));
            }
            if in_2d {
                let subset: Vec<Acquisition2D> =
                    idx.iter().map(|i| scene.pool2d[i].clone()).collect();
                reports.push(run_method_2d(
                    &Linear2d { anchor },
                    MethodTag::Linear2d,
                    &subset,
                    &scene.a_gt,
                    n,
                    trial,
                    mix_seed(tseed, 3),
                ));
                reports.push(run_method_2d(
                    &Minimal2d { anchor },
                    MethodTag::Minimal2d,
                    &subset,
                    &scene.a_gt,
                    n,
                    trial,
                    mix_seed(tseed, 4),
                ));
                reports.push(run_method_2d(
                    &Minimal2dGeneral {
                        anchor,
                        plane: ScanPlane::default(),
                    },
                    MethodTag::Minimal2dGeneral,
                    &subset,
                    &scene.a_gt,
                    n,
                    trial,
                    mix_seed(tseed, 5),
                ));
            }
        }
    }
    reports
}

/// Point reconstruction accuracy: distance between the calibrated mapping of
/// a scan-frame measurement and the same physical point in the marker frame.
pub fn pra(a: &Similarity, us_point: Point3, tracked_point: Point3) -> f64 {
    (a.apply(us_point) - tracked_point).norm()
}

/// Median of the finite values; NaN when none are finite.
pub fn median(values: &[f64]) -> f64 {
    let mut finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return f64::NAN;
    }
    finite.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = finite.len();
    if n % 2 == 1 {
        finite[n / 2]
    } else {
        (finite[n / 2 - 1] + finite[n / 2]) / 2.0
    }
}

/// Per-metric medians (rotation, translation, scale) for one method at one N,
/// excluding failed trials. None when no trial succeeded.
pub fn median_errors(
    reports: &[TrialReport],
    method: MethodTag,
    n: usize,
) -> Option<(f64, f64, f64)> {
    let picked: Vec<&TrialReport> = reports
        .iter()
        .filter(|r| r.method == method && r.n_used == n && !r.failed)
        .collect();
    if picked.is_empty() {
        return None;
    }
    let rot: Vec<f64> = picked.iter().map(|r| r.rot_err_rad).collect();
    let trans: Vec<f64> = picked.iter().map(|r| r.trans_err_mm).collect();
    let scale: Vec<f64> = picked.iter().map(|r| r.scale_err).collect();
    Some((median(&rot), median(&trans), median(&scale)))
}

/// Synthetic cross-wire validation: calibrates from `n_calib` 3D
/// acquisitions, then measures PRA on `n_phantom` noisy phantom points both
/// under the estimate and under the ground truth (the pure measurement-noise
/// floor).
pub struct PraOutcome {
    pub estimated: Vec<f64>,
    pub floor: Vec<f64>,
}

pub fn synthetic_pra_experiment(cfg: &SimConfig, n_calib: usize, n_phantom: usize) -> PraOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let scene = generate_scene(cfg, &mut rng);
    let anchor = Point3::zeros();
    let n_calib = n_calib.min(scene.pool3d.len());
    let subset = &scene.pool3d[..n_calib];
    let ransac_cfg = RansacConfig {
        rng_seed: mix_seed(cfg.rng_seed, 0xCAFE),
        ..RansacConfig::default()
    };
    let consensus = ransac(subset, &Minimal3d { anchor }, &ransac_cfg)
        .expect("calibration sample is solvable");
    let inliers: Vec<Acquisition3D> = subset
        .iter()
        .zip(&consensus.inlier_mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| a.clone())
        .collect();
    let a_est = refine_3d(&inliers, &consensus.model, &RefineConfig::default())
        .expect("refinement from a consensus model");

    let mut estimated = Vec::with_capacity(n_phantom);
    let mut floor = Vec::with_capacity(n_phantom);
    for _ in 0..n_phantom {
        let x = sample_fov_point(cfg, 0.0, &mut rng);
        let p = scene.a_gt.apply(x);
        let x_noisy = x + cfg.noise_us_sigma * Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng));
        let p_noisy =
            p + cfg.noise_track_sigma_mm * Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng));
        estimated.push(pra(&a_est, x_noisy, p_noisy));
        floor.push(pra(&scene.a_gt, x_noisy, p_noisy));
    }
    PraOutcome { estimated, floor }
}
