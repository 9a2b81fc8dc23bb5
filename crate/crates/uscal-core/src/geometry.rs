//! Core geometric primitives: points, lines, planes, and the similarity
//! transform (rotation, translation, isotropic scale) that the calibration
//! solvers estimate.
//!
//! Conventions: tracked-frame coordinates are millimetres, scan-frame
//! coordinates are ultrasound units, and the similarity maps scan units into
//! the marker frame as `s * R * x + t`.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector4};
use thiserror::Error;

pub type Point3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;
/// A 4x4 homogeneous transform; only similarity-shaped instances (scaled
/// rotation block, bottom row `(0,0,0,h)`) are meaningful to the solvers.
pub type HomMatrix4 = Matrix4<f64>;

/// Minimum endpoint separation for a valid line (mm).
pub const LINE_EPS: f64 = 1e-6;
/// Minimum orthogonal clearance between the plane-pair anchor and the line (mm).
pub const ANCHOR_EPS: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    /// Line endpoints are too close to define a direction.
    #[error("line endpoints are separated by less than {LINE_EPS} mm")]
    DegenerateLine,
    /// The anchor point lies on (or too close to) the line, so the
    /// intersecting-plane construction is undefined.
    #[error("anchor lies within {ANCHOR_EPS} mm of the line")]
    DegenerateAnchor,
    /// The 3x3 block handed to the similarity projection is rank deficient.
    #[error("3x3 block is rank deficient")]
    SingularBlock,
}

/// A similarity transform: `x -> s * R * x + t` with `s > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    /// Panics if `scale` is not a positive finite number; solver outputs are
    /// positive by construction and file inputs are validated before this.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>, scale: f64) -> Self {
        assert!(
            scale.is_finite() && scale > 0.0,
            "similarity scale must be positive and finite, got {scale}"
        );
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros(), 1.0)
    }

    /// Maps a scan-frame point into the marker frame.
    pub fn apply(&self, x: Point3) -> Point3 {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// The scaled rotation block `S = s * R`.
    pub fn scaled_rotation(&self) -> Mat3 {
        self.rotation_matrix() * self.scale
    }

    pub fn to_homogeneous(&self) -> HomMatrix4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.scaled_rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// A 3D line carried as two distinct points.
#[derive(Debug, Clone, PartialEq)]
pub struct Line3 {
    p0: Point3,
    p1: Point3,
}

impl Line3 {
    pub fn new(p0: Point3, p1: Point3) -> Result<Self, GeometryError> {
        if !(p0 - p1).norm().is_finite() || (p1 - p0).norm() <= LINE_EPS {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(Self { p0, p1 })
    }

    pub fn p0(&self) -> Point3 {
        self.p0
    }

    pub fn p1(&self) -> Point3 {
        self.p1
    }

    /// Unit direction from `p0` towards `p1`.
    pub fn direction(&self) -> Vector3<f64> {
        (self.p1 - self.p0).normalize()
    }
}

/// A plane stored as a homogeneous 4-vector `(n, d)` with unit normal;
/// a point `p` lies on the plane iff `n . p + d = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    hom: Vector4<f64>,
}

impl Plane {
    /// Normalizes the normal part; `normal` must be nonzero.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        let n = normal.norm();
        assert!(n > 0.0, "plane normal must be nonzero");
        Self {
            hom: Vector4::new(normal.x / n, normal.y / n, normal.z / n, offset / n),
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.hom.fixed_rows::<3>(0).into_owned()
    }

    pub fn offset(&self) -> f64 {
        self.hom.w
    }

    pub fn hom(&self) -> Vector4<f64> {
        self.hom
    }

    pub fn signed_distance(&self, p: Point3) -> f64 {
        self.normal().dot(&p) + self.hom.w
    }
}

/// Converts a line into a pair of intersecting planes: the first contains the
/// line and the anchor point, the second contains the line and is orthogonal
/// to the first. Fails when the anchor is (nearly) on the line, which is the
/// configuration where this construction degenerates.
pub fn planes_from_line(line: &Line3, anchor: Point3) -> Result<(Plane, Plane), GeometryError> {
    let d = line.direction();
    let v = anchor - line.p0();
    let perp = v - v.dot(&d) * d;
    if perp.norm() <= ANCHOR_EPS {
        return Err(GeometryError::DegenerateAnchor);
    }
    let n1 = d.cross(&v).normalize();
    let n2 = d.cross(&n1).normalize();
    let p0 = line.p0();
    Ok((Plane::new(n1, -n1.dot(&p0)), Plane::new(n2, -n2.dot(&p0))))
}

/// Orthogonal distance from a point to the infinite line.
pub fn line_point_distance(line: &Line3, p: Point3) -> f64 {
    (p - line.p0()).cross(&line.direction()).norm()
}

/// Projects an estimated homogeneous matrix onto a similarity: QR of the
/// upper-left 3x3 block with the triangular factor forced to a positive
/// diagonal, scale taken as the mean of that diagonal, and the rotation kept
/// in SO(3) by flipping its third column if needed. The translation is the
/// fourth column divided by the homogeneous entry.
pub fn project_to_similarity_3d(a: &HomMatrix4) -> Result<Similarity, GeometryError> {
    let s_block: Mat3 = a.fixed_view::<3, 3>(0, 0).into_owned();
    let qr = s_block.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for i in 0..3 {
        if r[(i, i)] < 0.0 {
            for j in 0..3 {
                r[(i, j)] = -r[(i, j)];
                q[(j, i)] = -q[(j, i)];
            }
        }
    }
    let dmax = r[(0, 0)].max(r[(1, 1)]).max(r[(2, 2)]);
    let dmin = r[(0, 0)].min(r[(1, 1)]).min(r[(2, 2)]);
    if !(dmax > 0.0) || dmin < 1e-12 * dmax {
        return Err(GeometryError::SingularBlock);
    }
    if q.determinant() < 0.0 {
        for j in 0..3 {
            q[(j, 2)] = -q[(j, 2)];
        }
    }
    let scale = (r[(0, 0)] + r[(1, 1)] + r[(2, 2)]) / 3.0;
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(q));
    let translation = a.fixed_view::<3, 1>(0, 3).into_owned() / a[(3, 3)];
    Ok(Similarity::new(rotation, translation, scale))
}

/// Angle of the residual rotation `R^T * R_gt`, in radians, clamped to [0, pi].
pub fn rotation_error(r: &Mat3, r_gt: &Mat3) -> f64 {
    let residual = r.transpose() * r_gt;
    let c = ((residual.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// Relative deviation of the 3x3 block of `a` from a scaled orthogonal matrix:
/// max entry of `S^T S - s^2 I` over `s^2`, with `s^2` the mean diagonal of
/// `S^T S`. Zero (up to rounding) iff the block is a scaled rotation or
/// reflection.
pub fn similarity_defect(a: &HomMatrix4) -> f64 {
    let s_block: Mat3 = a.fixed_view::<3, 3>(0, 0).into_owned();
    let g = s_block.transpose() * s_block;
    let s2 = g.trace() / 3.0;
    if !(s2 > 0.0) {
        return f64::INFINITY;
    }
    let mut defect: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { s2 } else { 0.0 };
            defect = defect.max((g[(i, j)] - target).abs());
        }
    }
    defect / s2
}
