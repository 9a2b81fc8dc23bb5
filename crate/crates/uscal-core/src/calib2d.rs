//! 2D ultrasound calibration from point-line correspondences: the reduced
//! 10-parameter linear solver (5+ points), the 4-point minimal solver through
//! the general 3D engine, and the dedicated 4-point two-conic solver.

use crate::calib3d::{incidence_row, minimal_candidates_13, Normalizer, SolveError, SolutionSet};
use crate::geometry::{
    planes_from_line, project_to_similarity_3d, GeometryError, Line3, Point3, Similarity,
};
use crate::polyengine::{self, PolyError, HOM_EPS};
use crate::robust::residual_2d;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, Rotation3, SMatrix, SVector, UnitQuaternion, Vector2, Vector3, Vector4};

/// Number of linear parameters of the reduced matrix (z = 0 scan plane).
pub const ABAR_PARAMS: usize = 10;

pub type ConstraintRows2 = SMatrix<f64, 2, 10>;

/// One needle scan with a 2D probe: the tracked needle line in the marker
/// frame (mm) paired with the image-point detection (US units).
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition2D {
    pub tracked_line: Line3,
    pub us_point: Vector2<f64>,
}

impl Acquisition2D {
    pub fn new(tracked_line: Line3, us_point: Vector2<f64>) -> Result<Self, GeometryError> {
        if !us_point.x.is_finite() || !us_point.y.is_finite() {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self {
            tracked_line,
            us_point,
        })
    }
}

/// Scan-plane embedding for the general minimal route: image points are
/// lifted onto z = k after their RMS normalization, so `k` is expressed in
/// units of the RMS image-coordinate magnitude and the default of 1 keeps
/// the lifted coordinates balanced. The recovered similarity is re-expressed
/// on the canonical z = 0 embedding and does not depend on the choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPlane {
    pub k: f64,
}

impl Default for ScanPlane {
    fn default() -> Self {
        ScanPlane { k: 1.0 }
    }
}

/// The reduced affine estimate `[c1 c2 t; 0 0 h]` with 10 free parameters,
/// flattened as `[c1, c2, t, h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedAffine {
    pub c1: Vector3<f64>,
    pub c2: Vector3<f64>,
    pub t: Vector3<f64>,
    pub h: f64,
}

impl ReducedAffine {
    pub fn from_vec10(v: &[f64]) -> Self {
        assert_eq!(v.len(), ABAR_PARAMS);
        ReducedAffine {
            c1: Vector3::new(v[0], v[1], v[2]),
            c2: Vector3::new(v[3], v[4], v[5]),
            t: Vector3::new(v[6], v[7], v[8]),
            h: v[9],
        }
    }

    pub fn to_vec10(&self) -> SVector<f64, 10> {
        SVector::from_column_slice(&[
            self.c1.x, self.c1.y, self.c1.z, self.c2.x, self.c2.y, self.c2.z, self.t.x, self.t.y,
            self.t.z, self.h,
        ])
    }

    /// Deviation of `[c1 c2]` from two orthogonal equal-norm columns,
    /// relative to the squared scale.
    pub fn similarity_defect(&self) -> f64 {
        let n1 = self.c1.norm_squared();
        let n2 = self.c2.norm_squared();
        let s2 = (n1 + n2) / 2.0;
        if !(s2 > 0.0) {
            return f64::INFINITY;
        }
        ((n1 - n2).abs().max(self.c1.dot(&self.c2).abs() * 2.0)) / (2.0 * s2)
    }
}

/// One incidence constraint `pi^T Abar (x, y, 1)^T = 0` over the 10 reduced
/// parameters; linear in the plane 4-vector.
fn incidence_row_10(plane_hom: &Vector4<f64>, us: Vector2<f64>) -> SVector<f64, 10> {
    let mut row = SVector::zeros();
    for i in 0..3 {
        row[i] = plane_hom[i] * us.x;
        row[3 + i] = plane_hom[i] * us.y;
        row[6 + i] = plane_hom[i];
    }
    row[9] = plane_hom[3];
    row
}

/// The two linear constraints contributed by one point-line correspondence,
/// ordered (pi, x), (pi*, x).
pub fn constraint_rows_2d(acq: &Acquisition2D, anchor: Point3) -> Result<ConstraintRows2, GeometryError> {
    let (pi, pi_star) = planes_from_line(&acq.tracked_line, anchor)?;
    let mut rows = ConstraintRows2::zeros();
    rows.set_row(0, &incidence_row_10(&pi.hom(), acq.us_point).transpose());
    rows.set_row(1, &incidence_row_10(&pi_star.hom(), acq.us_point).transpose());
    Ok(rows)
}

/// Forces `[c1 c2]` to two orthogonal equal-norm columns through its thin QR
/// factorization, completes the rotation with `r3 = r1 x r2`, and copies the
/// translation divided by the homogeneous entry.
pub fn project_to_similarity_2d(ra: &ReducedAffine) -> Result<Similarity, GeometryError> {
    let s_bar = Matrix3x2::from_columns(&[ra.c1, ra.c2]);
    let qr = s_bar.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..2 {
        if r[(i, i)] < 0.0 {
            for j in 0..2 {
                r[(i, j)] = -r[(i, j)];
            }
            for j in 0..3 {
                q[(j, i)] = -q[(j, i)];
            }
        }
    }
    let dmax = r[(0, 0)].max(r[(1, 1)]);
    let dmin = r[(0, 0)].min(r[(1, 1)]);
    if !(dmax > 0.0) || dmin < 1e-12 * dmax {
        return Err(GeometryError::SingularBlock);
    }
    let scale = (r[(0, 0)] + r[(1, 1)]) / 2.0;
    let r1 = q.column(0).into_owned();
    let r2 = q.column(1).into_owned();
    let r3 = r1.cross(&r2);
    let rot_mat = Matrix3::from_columns(&[r1, r2, r3]);
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot_mat));
    Ok(Similarity::new(rotation, ra.t / ra.h, scale))
}

fn stacked_rows_2d(
    acqs: &[Acquisition2D],
    norm: &Normalizer,
) -> Result<DMatrix<f64>, GeometryError> {
    let mut rows = DMatrix::zeros(2 * acqs.len(), ABAR_PARAMS);
    for (i, acq) in acqs.iter().enumerate() {
        let line = norm.shift_line(&acq.tracked_line);
        let (pi, pi_star) = planes_from_line(&line, Point3::zeros())?;
        let us = acq.us_point / norm.us_scale;
        rows.view_mut((2 * i, 0), (1, ABAR_PARAMS))
            .copy_from(&incidence_row_10(&pi.hom(), us).transpose());
        rows.view_mut((2 * i + 1, 0), (1, ABAR_PARAMS))
            .copy_from(&incidence_row_10(&pi_star.hom(), us).transpose());
    }
    for r in 0..rows.nrows() {
        let n = rows.row(r).norm();
        if n > 0.0 {
            for c in 0..rows.ncols() {
                rows[(r, c)] /= n;
            }
        }
    }
    Ok(rows)
}

fn map_rank(e: PolyError) -> SolveError {
    match e {
        PolyError::RankDeficient => SolveError::RankDeficient,
        other => SolveError::Poly(other),
    }
}

/// Least-squares solution over 5 or more point-line correspondences on the
/// reduced 10-parameter system, projected back to a full similarity.
pub fn solve_linear_2d(acqs: &[Acquisition2D], anchor: Point3) -> Result<Similarity, SolveError> {
    if acqs.len() < 5 {
        return Err(SolveError::InsufficientData {
            expected: 5,
            got: acqs.len(),
        });
    }
    let norm = Normalizer::new(anchor, acqs.iter().map(|a| a.us_point.norm()));
    let rows = stacked_rows_2d(acqs, &norm)?;
    let ns = polyengine::nullspace(&rows, 1).map_err(map_rank)?;
    let v = &ns.vectors[0];
    if v[9].abs() < HOM_EPS {
        return Err(SolveError::HomogeneousCollapse);
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / v[9]).collect();
    let sim = project_to_similarity_2d(&ReducedAffine::from_vec10(&scaled))?;
    Ok(norm.denormalize(sim))
}

/// Minimal solver from exactly four point-line correspondences through the
/// general 3D engine: image points are lifted onto the plane z = k, the
/// 8-row system is reduced to 7 by dropping the pi* row of the fourth
/// acquisition, and up to eight candidates come back. The returned
/// similarities are re-expressed on the canonical z = 0 embedding, so the
/// choice of k does not change the result on consistent data.
pub fn solve_minimal_2d_general(
    acqs: &[Acquisition2D],
    anchor: Point3,
    plane: &ScanPlane,
) -> Result<SolutionSet, SolveError> {
    if acqs.len() != 4 {
        return Err(SolveError::InsufficientData {
            expected: 4,
            got: acqs.len(),
        });
    }
    // z = 0 (and any non-positive plane) is the documented degenerate choice.
    if !(plane.k > 0.0) || !plane.k.is_finite() {
        return Err(SolveError::Poly(PolyError::SingularC));
    }
    let k = plane.k;
    let norm = Normalizer::new(anchor, acqs.iter().map(|a| a.us_point.norm()));
    let mut rows = DMatrix::zeros(8, 13);
    for (i, acq) in acqs.iter().enumerate() {
        let line = norm.shift_line(&acq.tracked_line);
        let (pi, pi_star) = planes_from_line(&line, Point3::zeros())?;
        // Lift the normalized image point onto z = k.
        let us = acq.us_point / norm.us_scale;
        let x = Point3::new(us.x, us.y, k);
        rows.view_mut((2 * i, 0), (1, 13))
            .copy_from(&incidence_row(&pi.hom(), x).transpose());
        rows.view_mut((2 * i + 1, 0), (1, 13))
            .copy_from(&incidence_row(&pi_star.hom(), x).transpose());
    }
    for r in 0..rows.nrows() {
        let n = rows.row(r).norm();
        if n > 0.0 {
            for c in 0..rows.ncols() {
                rows[(r, c)] /= n;
            }
        }
    }
    let rows7 = rows.rows(0, 7).into_owned();
    let mats = minimal_candidates_13(&rows7)?;

    let mut scored: Vec<(Similarity, f64)> = Vec::new();
    for a in mats {
        let Ok(sim_n) = project_to_similarity_3d(&a) else {
            continue;
        };
        // Re-express on the canonical z = 0 embedding, then undo the
        // conditioning transform.
        let shift = sim_n.scale * (sim_n.rotation * Vector3::new(0.0, 0.0, k));
        let canonical_n = Similarity::new(sim_n.rotation, sim_n.translation + shift, sim_n.scale);
        let canonical = norm.denormalize(canonical_n);
        let res = acqs
            .iter()
            .map(|q| residual_2d(&canonical, q))
            .sum::<f64>()
            / acqs.len() as f64;
        scored.push((canonical, res));
    }
    if scored.is_empty() {
        return Err(SolveError::Poly(PolyError::NoRealSolutions));
    }
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite residuals"));
    let (candidates, residuals) = scored.into_iter().unzip();
    Ok(SolutionSet {
        candidates,
        residuals,
    })
}

/// Dedicated minimal solver from exactly four point-line correspondences:
/// 3D nullspace of the reduced 10-parameter system, two quadratic
/// constraints, and the two-conic solver, yielding up to four candidates.
/// Candidates are ordered by their residual against all eight linear
/// constraints (including the dropped row).
pub fn solve_minimal_2d(acqs: &[Acquisition2D], anchor: Point3) -> Result<SolutionSet, SolveError> {
    if acqs.len() != 4 {
        return Err(SolveError::InsufficientData {
            expected: 4,
            got: acqs.len(),
        });
    }
    let norm = Normalizer::new(anchor, acqs.iter().map(|a| a.us_point.norm()));
    let rows8 = stacked_rows_2d(acqs, &norm)?;
    let rows7 = rows8.rows(0, 7).into_owned();
    let ns = polyengine::nullspace(&rows7, 3).map_err(map_rank)?;
    let basis: Vec<ReducedAffine> = ns
        .vectors
        .iter()
        .map(|v| ReducedAffine::from_vec10(v.as_slice()))
        .collect();
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> =
        basis.iter().map(|b| (b.c1, b.c2)).collect();
    let sys = polyengine::quadratic_constraints_2d(&pairs);
    let sols = polyengine::solve_two_conics(&sys).map_err(SolveError::Poly)?;

    let mut scored: Vec<(Similarity, f64, f64)> = Vec::new();
    for u in sols {
        let mut v = DVector::zeros(ABAR_PARAMS);
        for (w, b) in u.iter().zip(&basis) {
            v += *w * b.to_vec10();
        }
        let vnorm = v.norm();
        if v[9].abs() < HOM_EPS * vnorm {
            continue;
        }
        // Residual against all 8 linear constraints, including the dropped row.
        let algebraic = (&rows8 * &v).amax() / vnorm;
        let scaled: Vec<f64> = v.iter().map(|x| x / v[9]).collect();
        let Ok(sim_n) = project_to_similarity_2d(&ReducedAffine::from_vec10(&scaled)) else {
            continue;
        };
        let sim = norm.denormalize(sim_n);
        let geometric = acqs.iter().map(|q| residual_2d(&sim, q)).sum::<f64>() / acqs.len() as f64;
        scored.push((sim, algebraic, geometric));
    }
    if scored.is_empty() {
        return Err(SolveError::Poly(PolyError::NoRealSolutions));
    }
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite residuals"));
    debug_assert!(scored.len() <= 4);
    let mut candidates = Vec::with_capacity(scored.len());
    let mut residuals = Vec::with_capacity(scored.len());
    for (sim, _, geo) in scored {
        candidates.push(sim);
        residuals.push(geo);
    }
    Ok(SolutionSet {
        candidates,
        residuals,
    })
}
