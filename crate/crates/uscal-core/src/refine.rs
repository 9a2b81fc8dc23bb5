//! Levenberg-Marquardt refinement of a similarity over the orthogonal-
//! distance cost, parameterized by a raw quaternion (renormalized every
//! step), the translation, and the scale in log-space.

use crate::calib2d::Acquisition2D;
use crate::calib3d::Acquisition3D;
use crate::geometry::{Line3, Point3, Similarity};
use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RefineError {
    /// The cost at the starting point is not finite.
    #[error("cost is not finite at the starting similarity")]
    NonFiniteCost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub max_iterations: usize,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub initial_damping: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            max_iterations: 100,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            initial_damping: 1e-3,
        }
    }
}

/// One residual block: the perpendicular displacement of one mapped US point
/// from one tracked line. Three signed components per block, so cost equals
/// the sum of squared orthogonal distances.
#[derive(Debug, Clone)]
struct PointLinePair {
    origin: Point3,
    /// Orthogonal projector `I - d d^T` of the line.
    projector: Matrix3<f64>,
    us: Point3,
}

fn pair(line: &Line3, us: Point3) -> PointLinePair {
    let d = line.direction();
    PointLinePair {
        origin: line.p0(),
        projector: Matrix3::identity() - d * d.transpose(),
        us,
    }
}

fn pairs_3d(acqs: &[Acquisition3D]) -> Vec<PointLinePair> {
    acqs.iter()
        .flat_map(|a| {
            [
                pair(&a.tracked_line, a.us_points.0),
                pair(&a.tracked_line, a.us_points.1),
            ]
        })
        .collect()
}

fn pairs_2d(acqs: &[Acquisition2D]) -> Vec<PointLinePair> {
    acqs.iter()
        .map(|a| {
            pair(
                &a.tracked_line,
                Point3::new(a.us_point.x, a.us_point.y, 0.0),
            )
        })
        .collect()
}

/// Raw parameter vector: quaternion (w, x, y, z), translation, ln(scale).
type Params = [f64; 8];

fn params_from(sim: &Similarity) -> Params {
    let q = sim.rotation.into_inner();
    [
        q.w,
        q.i,
        q.j,
        q.k,
        sim.translation.x,
        sim.translation.y,
        sim.translation.z,
        sim.scale.ln(),
    ]
}

fn similarity_from(p: &Params) -> Similarity {
    let q = Quaternion::new(p[0], p[1], p[2], p[3]);
    Similarity::new(
        UnitQuaternion::from_quaternion(q),
        Vector3::new(p[4], p[5], p[6]),
        p[7].exp(),
    )
}

fn residuals(pairs: &[PointLinePair], p: &Params) -> DVector<f64> {
    // Evaluated at trial points too, where exp(ln s) may overflow; the
    // resulting non-finite cost rejects the step.
    let q = UnitQuaternion::from_quaternion(Quaternion::new(p[0], p[1], p[2], p[3]));
    let t = Vector3::new(p[4], p[5], p[6]);
    let scale = p[7].exp();
    let mut r = DVector::zeros(3 * pairs.len());
    for (i, pl) in pairs.iter().enumerate() {
        let mapped = scale * (q * pl.us) + t;
        let e = pl.projector * (mapped - pl.origin);
        r.fixed_rows_mut::<3>(3 * i).copy_from(&e);
    }
    r
}

/// Analytic Jacobian of the residual vector with respect to the raw
/// parameters, with the quaternion normalization folded in through its
/// projection Jacobian.
fn jacobian(pairs: &[PointLinePair], p: &Params) -> DMatrix<f64> {
    let qraw = Quaternion::new(p[0], p[1], p[2], p[3]);
    let qnorm = qraw.norm();
    let q = qraw / qnorm;
    let unit_q = UnitQuaternion::from_quaternion(qraw);
    let (w, u) = (q.w, q.imag());
    let scale = p[7].exp();

    // d(q/|q|)/dq = (I - q q^T) / |q| over (w, x, y, z).
    let qv = nalgebra::Vector4::new(q.w, q.i, q.j, q.k);
    let proj_q = (nalgebra::Matrix4::identity() - qv * qv.transpose()) / qnorm;

    let mut jac = DMatrix::zeros(3 * pairs.len(), 8);
    for (i, pl) in pairs.iter().enumerate() {
        let v = pl.us;
        let rotated = unit_q * v;
        // d(R(q)v)/dq at unit q, columns ordered (w, x, y, z).
        let cross_uv = u.cross(&v);
        let dw = 2.0 * (w * v + cross_uv);
        let skew_v = Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
        let du = 2.0 * (u * v.transpose() - v * u.transpose() + Matrix3::from_diagonal_element(u.dot(&v)) - w * skew_v);
        let mut dq = nalgebra::Matrix3x4::zeros();
        dq.set_column(0, &dw);
        for c in 0..3 {
            dq.set_column(c + 1, &du.column(c).into_owned());
        }
        let dq_raw = dq * proj_q;

        let block_q = pl.projector * dq_raw * scale;
        let block_t = pl.projector;
        let block_s = pl.projector * (rotated * scale);
        for r in 0..3 {
            for c in 0..4 {
                jac[(3 * i + r, c)] = block_q[(r, c)];
            }
            for c in 0..3 {
                jac[(3 * i + r, 4 + c)] = block_t[(r, c)];
            }
            jac[(3 * i + r, 7)] = block_s[r];
        }
    }
    jac
}

fn lm_minimize(
    pairs: &[PointLinePair],
    a0: &Similarity,
    cfg: &RefineConfig,
) -> Result<(Similarity, Vec<f64>), RefineError> {
    let mut p = params_from(a0);
    let mut r = residuals(pairs, &p);
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return Err(RefineError::NonFiniteCost);
    }
    let mut trace = vec![cost];
    if cost == 0.0 {
        return Ok((similarity_from(&p), trace));
    }

    let mut mu: Option<f64> = None;
    let nu = 3.0;
    for _ in 0..cfg.max_iterations {
        let jac = jacobian(pairs, &p);
        let grad = jac.transpose() * &r;
        if grad.amax() < cfg.gradient_tol {
            break;
        }
        let hess = jac.transpose() * &jac;
        let mu_val = *mu.get_or_insert_with(|| {
            let dmax = (0..8).map(|i| hess[(i, i)]).fold(0.0f64, f64::max);
            cfg.initial_damping * dmax.max(1e-12)
        });

        let mut damped = hess.clone();
        for i in 0..8 {
            damped[(i, i)] += mu_val * hess[(i, i)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            mu = Some(mu_val * nu);
            continue;
        };
        let step = chol.solve(&(-&grad));
        let step_norm = step.norm();
        let p_norm = (0..8).map(|i| p[i] * p[i]).sum::<f64>().sqrt();
        if step_norm < cfg.step_tol * (p_norm + cfg.step_tol) {
            break;
        }
        let mut p_new = p;
        for i in 0..8 {
            p_new[i] += step[i];
        }
        // Keep exp(ln s) inside the double range; hopeless starts otherwise
        // drive the scale to an exact 0 or infinity.
        p_new[7] = p_new[7].clamp(-300.0, 300.0);
        // Renormalize the quaternion block after every step.
        let qn = (p_new[0] * p_new[0] + p_new[1] * p_new[1] + p_new[2] * p_new[2]
            + p_new[3] * p_new[3])
            .sqrt();
        if qn > 0.0 {
            for i in 0..4 {
                p_new[i] /= qn;
            }
        }
        let r_new = residuals(pairs, &p_new);
        let cost_new = r_new.norm_squared();
        if cost_new.is_finite() && cost_new < cost {
            p = p_new;
            r = r_new;
            cost = cost_new;
            trace.push(cost);
            mu = Some(mu_val / nu);
            if cost == 0.0 {
                break;
            }
        } else {
            mu = Some(mu_val * nu);
            if mu_val > 1e16 {
                break;
            }
        }
    }
    Ok((similarity_from(&p), trace))
}

/// Sum of squared orthogonal distances of both mapped slice points per
/// acquisition.
pub fn cost_3d(acqs: &[Acquisition3D], a: &Similarity) -> f64 {
    residuals(&pairs_3d(acqs), &params_from(a)).norm_squared()
}

/// Sum of squared orthogonal distances of the mapped image point per
/// acquisition.
pub fn cost_2d(acqs: &[Acquisition2D], a: &Similarity) -> f64 {
    residuals(&pairs_2d(acqs), &params_from(a)).norm_squared()
}

/// Refines over the 3D cost; the result never has higher cost than `a0`.
pub fn refine_3d(
    acqs: &[Acquisition3D],
    a0: &Similarity,
    cfg: &RefineConfig,
) -> Result<Similarity, RefineError> {
    lm_minimize(&pairs_3d(acqs), a0, cfg).map(|(sim, _)| sim)
}

/// Refines over the 2D cost; the result never has higher cost than `a0`.
pub fn refine_2d(
    acqs: &[Acquisition2D],
    a0: &Similarity,
    cfg: &RefineConfig,
) -> Result<Similarity, RefineError> {
    lm_minimize(&pairs_2d(acqs), a0, cfg).map(|(sim, _)| sim)
}

/// Like `refine_3d` but also returns the accepted-cost sequence (starting
/// cost first), for monotonicity checks.
pub fn refine_3d_traced(
    acqs: &[Acquisition3D],
    a0: &Similarity,
    cfg: &RefineConfig,
) -> Result<(Similarity, Vec<f64>), RefineError> {
    lm_minimize(&pairs_3d(acqs), a0, cfg)
}

/// Like `refine_2d` but also returns the accepted-cost sequence.
pub fn refine_2d_traced(
    acqs: &[Acquisition2D],
    a0: &Similarity,
    cfg: &RefineConfig,
) -> Result<(Similarity, Vec<f64>), RefineError> {
    lm_minimize(&pairs_2d(acqs), a0, cfg)
}

/// Largest relative mismatch between the analytic Jacobian and central
/// finite differences at `sim` (step 1e-6 relative per parameter).
pub fn jacobian_fd_mismatch_3d(acqs: &[Acquisition3D], sim: &Similarity) -> f64 {
    jacobian_fd_mismatch(&pairs_3d(acqs), sim)
}

pub fn jacobian_fd_mismatch_2d(acqs: &[Acquisition2D], sim: &Similarity) -> f64 {
    jacobian_fd_mismatch(&pairs_2d(acqs), sim)
}

fn jacobian_fd_mismatch(pairs: &[PointLinePair], sim: &Similarity) -> f64 {
    let p = params_from(sim);
    let analytic = jacobian(pairs, &p);
    let mut scale = analytic.amax();
    let mut worst: f64 = 0.0;
    let mut fd = DMatrix::zeros(analytic.nrows(), 8);
    for c in 0..8 {
        let h = 1e-6 * (1.0 + p[c].abs());
        let mut plus = p;
        plus[c] += h;
        let mut minus = p;
        minus[c] -= h;
        let column = (residuals(pairs, &plus) - residuals(pairs, &minus)) / (2.0 * h);
        fd.set_column(c, &column);
    }
    scale = scale.max(fd.amax()).max(1e-12);
    for r in 0..analytic.nrows() {
        for c in 0..8 {
            worst = worst.max((analytic[(r, c)] - fd[(r, c)]).abs() / scale);
        }
    }
    worst
}
