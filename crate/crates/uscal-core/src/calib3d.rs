//! 3D ultrasound calibration from line-line correspondences: constraint
//! assembly through the point-plane reduction, the linear least-squares
//! solver (3+ correspondences) and the minimal solver (exactly 2).

use crate::geometry::{
    planes_from_line, project_to_similarity_3d, GeometryError, Line3, Mat4, Plane, Point3,
    Similarity, LINE_EPS,
};
use crate::polyengine::{self, PolyError, HOM_EPS};
use crate::robust::residual_3d;
use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector4};
use thiserror::Error;

/// Number of linear parameters of the homogeneous similarity matrix.
pub const A_PARAMS: usize = 13;

pub type ConstraintRows3 = SMatrix<f64, 4, 13>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("need {expected} acquisitions, got {got}")]
    InsufficientData { expected: usize, got: usize },
    /// The stacked linear system does not have the expected rank; raised by
    /// degenerate configurations (parallel, concurrent or coplanar lines).
    #[error("constraint system is rank deficient")]
    RankDeficient,
    /// The homogeneous component of the least-squares solution vanished.
    #[error("homogeneous component of the solution vanished")]
    HomogeneousCollapse,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

fn map_rank(e: PolyError) -> SolveError {
    match e {
        PolyError::RankDeficient => SolveError::RankDeficient,
        other => SolveError::Poly(other),
    }
}

/// One needle scan with a 3D probe: the tracked needle line in the marker
/// frame (mm) paired with two points sampled from the scanned line (US units).
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition3D {
    pub tracked_line: Line3,
    pub us_points: (Point3, Point3),
}

impl Acquisition3D {
    pub fn new(tracked_line: Line3, x: Point3, x_star: Point3) -> Result<Self, GeometryError> {
        if !(x - x_star).norm().is_finite() || (x - x_star).norm() <= LINE_EPS {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self {
            tracked_line,
            us_points: (x, x_star),
        })
    }
}

/// Discrete candidates emitted by a minimal solver, ordered by residual, with
/// the per-candidate mean orthogonal distance over the sample (mm).
#[derive(Debug, Clone)]
pub struct SolutionSet {
    pub candidates: Vec<Similarity>,
    pub residuals: Vec<f64>,
}

impl SolutionSet {
    pub fn best(&self) -> &Similarity {
        &self.candidates[0]
    }
}

/// Flattens the 13 linear parameters: top 3x4 block in row-major order, then
/// the homogeneous entry `A[3][3]`.
pub fn vec13(a: &Mat4) -> SVector<f64, 13> {
    let mut v = SVector::zeros();
    for r in 0..3 {
        for c in 0..4 {
            v[4 * r + c] = a[(r, c)];
        }
    }
    v[12] = a[(3, 3)];
    v
}

pub fn unvec13(v: &[f64]) -> Mat4 {
    assert_eq!(v.len(), A_PARAMS);
    let mut a = Mat4::zeros();
    for r in 0..3 {
        for c in 0..4 {
            a[(r, c)] = v[4 * r + c];
        }
    }
    a[(3, 3)] = v[12];
    a
}

/// One incidence constraint `pi^T A x = 0` as a row over the 13 parameters;
/// linear in the (not necessarily normalized) plane 4-vector.
pub(crate) fn incidence_row(plane_hom: &Vector4<f64>, x: Point3) -> SVector<f64, 13> {
    let mut row = SVector::zeros();
    let xh = [x.x, x.y, x.z, 1.0];
    for r in 0..3 {
        for c in 0..4 {
            row[4 * r + c] = plane_hom[r] * xh[c];
        }
    }
    row[12] = plane_hom[3];
    row
}

/// The four linear constraints contributed by one line-line correspondence,
/// ordered (pi, x), (pi*, x), (pi, x*), (pi*, x*).
pub fn constraint_rows_3d(acq: &Acquisition3D, anchor: Point3) -> Result<ConstraintRows3, GeometryError> {
    let (pi, pi_star) = planes_from_line(&acq.tracked_line, anchor)?;
    Ok(constraint_rows_from_planes(&pi, &pi_star, acq.us_points.0, acq.us_points.1))
}

fn constraint_rows_from_planes(pi: &Plane, pi_star: &Plane, x: Point3, x_star: Point3) -> ConstraintRows3 {
    let mut rows = ConstraintRows3::zeros();
    rows.set_row(0, &incidence_row(&pi.hom(), x).transpose());
    rows.set_row(1, &incidence_row(&pi_star.hom(), x).transpose());
    rows.set_row(2, &incidence_row(&pi.hom(), x_star).transpose());
    rows.set_row(3, &incidence_row(&pi_star.hom(), x_star).transpose());
    rows
}

/// Conditioning transform shared by the solvers: tracked coordinates are
/// shifted so the anchor becomes the origin and US coordinates are divided by
/// their RMS magnitude; the recovered similarity is mapped back afterwards.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Normalizer {
    pub anchor: Point3,
    pub us_scale: f64,
}

impl Normalizer {
    pub fn new(anchor: Point3, us_norms: impl Iterator<Item = f64>) -> Self {
        let mut sum = 0.0;
        let mut count = 0usize;
        for n in us_norms {
            sum += n * n;
            count += 1;
        }
        let rms = if count > 0 { (sum / count as f64).sqrt() } else { 0.0 };
        Normalizer {
            anchor,
            us_scale: if rms > 1e-12 { rms } else { 1.0 },
        }
    }

    pub fn shift_line(&self, line: &Line3) -> Line3 {
        Line3::new(line.p0() - self.anchor, line.p1() - self.anchor)
            .expect("translation preserves endpoint separation")
    }

    pub fn denormalize(&self, sim: Similarity) -> Similarity {
        Similarity::new(
            sim.rotation,
            sim.translation + self.anchor,
            sim.scale / self.us_scale,
        )
    }
}

fn scale_rows_to_unit_norm(m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        let norm = m.row(r).norm();
        if norm > 0.0 {
            for c in 0..m.ncols() {
                m[(r, c)] /= norm;
            }
        }
    }
}

fn stacked_rows_3d(
    acqs: &[Acquisition3D],
    norm: &Normalizer,
) -> Result<DMatrix<f64>, GeometryError> {
    let mut rows = DMatrix::zeros(4 * acqs.len(), A_PARAMS);
    for (i, acq) in acqs.iter().enumerate() {
        let line = norm.shift_line(&acq.tracked_line);
        let (pi, pi_star) = planes_from_line(&line, Point3::zeros())?;
        let x = acq.us_points.0 / norm.us_scale;
        let x_star = acq.us_points.1 / norm.us_scale;
        let block = constraint_rows_from_planes(&pi, &pi_star, x, x_star);
        rows.view_mut((4 * i, 0), (4, A_PARAMS))
            .copy_from(&block.cast::<f64>());
    }
    scale_rows_to_unit_norm(&mut rows);
    Ok(rows)
}

/// Least-squares solution over 3 or more correspondences: SVD of the stacked
/// 4N x 13 system, homogeneous entry normalized to 1, then projection to the
/// closest similarity.
pub fn solve_linear_3d(acqs: &[Acquisition3D], anchor: Point3) -> Result<Similarity, SolveError> {
    if acqs.len() < 3 {
        return Err(SolveError::InsufficientData {
            expected: 3,
            got: acqs.len(),
        });
    }
    let norm = Normalizer::new(
        anchor,
        acqs.iter()
            .flat_map(|a| [a.us_points.0.norm(), a.us_points.1.norm()]),
    );
    let rows = stacked_rows_3d(acqs, &norm)?;
    let ns = polyengine::nullspace(&rows, 1).map_err(map_rank)?;
    let v = &ns.vectors[0];
    if v[12].abs() < HOM_EPS {
        return Err(SolveError::HomogeneousCollapse);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / v[12]).collect();
    let a = unvec13(&scaled);
    let sim = project_to_similarity_3d(&a)?;
    Ok(norm.denormalize(sim))
}

/// Runs the action-matrix pipeline on a 7 x 13 minimal system and returns the
/// reconstituted candidate matrices, homogeneous entry normalized to 1.
/// Candidates failing the quadratic residual certificate, with a vanishing
/// homogeneous entry, or with an improper (reflected) scaled-rotation block
/// are dropped.
pub(crate) fn minimal_candidates_13(rows7: &DMatrix<f64>) -> Result<Vec<Mat4>, SolveError> {
    let ns = polyengine::nullspace(rows7, 6).map_err(map_rank)?;
    let basis: Vec<Mat4> = ns.vectors.iter().map(|v| unvec13(v.as_slice())).collect();
    let s_blocks: Vec<Matrix3<f64>> = basis
        .iter()
        .map(|m| m.fixed_view::<3, 3>(0, 0).into_owned())
        .collect();
    let sys = polyengine::quadratic_constraints_3d(&s_blocks);

    let run = |dehom_var: usize| -> Result<Vec<Mat4>, PolyError> {
        let d = sys.dehomogenize(dehom_var);
        let tmpl = polyengine::expand_and_reduce_3d(&d)?;
        let am = polyengine::action_matrix(&tmpl, 1)?;
        let sols = polyengine::extract_solutions(&am)?;
        let mut out = Vec::new();
        for s in sols {
            let mut u = [0.0f64; 6];
            let mut si = 0;
            for (i, slot) in u.iter_mut().enumerate() {
                if i == dehom_var {
                    *slot = 1.0;
                } else {
                    *slot = s[si];
                    si += 1;
                }
            }
            if sys.relative_residual(&u) >= polyengine::CERT_TOL {
                continue;
            }
            let mut a = Mat4::zeros();
            for (w, base) in u.iter().zip(&basis) {
                a += *w * base;
            }
            let h = a[(3, 3)];
            if h.abs() < HOM_EPS * vec13(&a).norm() {
                continue;
            }
            let a = a / h;
            if a.fixed_view::<3, 3>(0, 0).determinant() <= 0.0 {
                continue;
            }
            out.push(a);
        }
        if out.is_empty() {
            return Err(PolyError::NoRealSolutions);
        }
        Ok(out)
    };

    // Dehomogenize on the last coefficient first; retry once on the
    // next-to-last when that annihilates the solution set.
    match run(5) {
        Ok(mats) => Ok(mats),
        Err(first @ (PolyError::EliminationFailure | PolyError::NoRealSolutions)) => {
            run(4).map_err(|_| SolveError::Poly(first))
        }
        Err(other) => Err(SolveError::Poly(other)),
    }
}

/// Minimal solver from exactly two line-line correspondences: drops the
/// (pi*, x*) row of the second acquisition, parameterizes the 6D nullspace,
/// and solves the ten scaled-orthogonality constraints with the action
/// matrix, yielding up to eight candidates.
pub fn solve_minimal_3d(acqs: &[Acquisition3D], anchor: Point3) -> Result<SolutionSet, SolveError> {
    if acqs.len() != 2 {
        return Err(SolveError::InsufficientData {
            expected: 2,
            got: acqs.len(),
        });
    }
    let norm = Normalizer::new(
        anchor,
        acqs.iter()
            .flat_map(|a| [a.us_points.0.norm(), a.us_points.1.norm()]),
    );
    let rows8 = stacked_rows_3d(acqs, &norm)?;
    let rows7 = rows8.rows(0, 7).into_owned();
    let mats = minimal_candidates_13(&rows7)?;

    let mut scored: Vec<(Similarity, f64)> = Vec::new();
    for a in mats {
        let Ok(sim_n) = project_to_similarity_3d(&a) else {
            continue;
        };
        let sim = norm.denormalize(sim_n);
        let res = acqs.iter().map(|q| residual_3d(&sim, q)).sum::<f64>() / acqs.len() as f64;
        scored.push((sim, res));
    }
    if scored.is_empty() {
        return Err(SolveError::Poly(PolyError::NoRealSolutions));
    }
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite residuals"));
    debug_assert!(scored.len() <= 8);
    let (candidates, residuals) = scored.into_iter().unzip();
    Ok(SolutionSet {
        candidates,
        residuals,
    })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use nalgebra::{Quaternion, UnitQuaternion, Vector3};
    use rand::Rng;

    pub fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(Quaternion::new(
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
            rng.random::<f64>() * 2.0 - 1.0,
        ))
    }

    /// Random calibration in the freehand-US regime (scale well below 1 mm
    /// per scan unit).
    pub fn random_similarity(rng: &mut impl Rng) -> Similarity {
        Similarity::new(
            random_rotation(rng),
            Vector3::new(
                (rng.random::<f64>() * 2.0 - 1.0) * 200.0,
                (rng.random::<f64>() * 2.0 - 1.0) * 200.0,
                (rng.random::<f64>() * 2.0 - 1.0) * 200.0,
            ),
            0.1 + rng.random::<f64>() * 0.4,
        )
    }

    fn random_us_point(rng: &mut impl Rng) -> Point3 {
        Vector3::new(
            (rng.random::<f64>() * 2.0 - 1.0) * 300.0,
            (rng.random::<f64>() * 2.0 - 1.0) * 300.0,
            100.0 + rng.random::<f64>() * 300.0,
        )
    }

    /// Noise-free acquisition consistent with `a_gt`; the tracked segment is
    /// re-sampled around the mapped points so its endpoints are not the
    /// mapped detections themselves.
    pub fn synthetic_acq3(a_gt: &Similarity, rng: &mut impl Rng, anchor: Point3) -> Acquisition3D {
        loop {
            let x = random_us_point(rng);
            let x_star = random_us_point(rng);
            if (x - x_star).norm() < 100.0 {
                continue;
            }
            let q0 = a_gt.apply(x);
            let q1 = a_gt.apply(x_star);
            let dir = (q1 - q0).normalize();
            let mid = (q0 + q1) / 2.0;
            let Ok(line) = Line3::new(mid - 200.0 * dir, mid + 200.0 * dir) else {
                continue;
            };
            if crate::geometry::line_point_distance(&line, anchor) < 10.0 {
                continue;
            }
            return Acquisition3D::new(line, x, x_star).expect("separated us points");
        }
    }

    pub fn synthetic_instance_3d(
        rng: &mut impl Rng,
        n: usize,
    ) -> (Similarity, Vec<Acquisition3D>, Point3) {
        let anchor = Point3::zeros();
        let a_gt = random_similarity(rng);
        let acqs = (0..n).map(|_| synthetic_acq3(&a_gt, rng, anchor)).collect();
        (a_gt, acqs, anchor)
    }

    /// Rotation error through the relative quaternion with atan2, which stays
    /// accurate for angles near zero where the arccos-of-trace form bottoms
    /// out around 1e-8.
    pub fn quat_angle(a: &Similarity, b: &Similarity) -> f64 {
        let d = (a.rotation.inverse() * b.rotation).into_inner();
        2.0 * d.imag().norm().atan2(d.w.abs())
    }

    pub fn recovery_errors(sim: &Similarity, gt: &Similarity) -> (f64, f64, f64) {
        (
            quat_angle(sim, gt),
            (sim.translation - gt.translation).norm(),
            (sim.scale - gt.scale).abs(),
        )
    }
}
