//! Geometric and statistical kernels shared by every other module.

pub mod kabsch;
pub mod pca;
pub mod rigid;
pub mod rotation;

pub use kabsch::{alignment_residual, kabsch, Alignment};
pub use pca::{centroid, covariance3, pca3, Pca3};
pub use rigid::{blend_dual_quaternions, dq_blend, so3_blend, DualQuaternion, RigidTransform};
pub use rotation::{
    hat, right_jacobian, right_jacobian_inv, rot_minus, so3_exp, so3_log, Rotation, TangentVector3, BRANCH_EPS,
};
