//! Similarity-registration solvers for freehand 2D/3D ultrasound probe
//! calibration with a tracked needle: closed-form linear and minimal solvers,
//! RANSAC, iterative refinement, a synthetic experiment harness, and the
//! acquisition/result file formats.

pub mod calib2d;
pub mod calib3d;
pub mod geometry;
pub mod io;
pub mod polyengine;
pub mod refine;
pub mod robust;
pub mod sim;

pub use calib2d::{Acquisition2D, ReducedAffine, ScanPlane};
pub use calib3d::{Acquisition3D, SolutionSet, SolveError};
pub use geometry::{
    line_point_distance, planes_from_line, project_to_similarity_3d, rotation_error,
    similarity_defect, GeometryError, HomMatrix4, Line3, Mat3, Mat4, Plane, Point3, Similarity,
};
pub use robust::{ransac, residual_2d, residual_3d, DegeneracyFlags, RansacConfig, RansacResult};
