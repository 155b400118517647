//! Stochastic ground-plane constraint tying each frame's base pose to a
//! globally estimated plane.

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{so3, Pose3};

/// Ground-plane parameters: a world-to-ground rotation constrained to two
/// degrees of freedom (the yaw tangent direction is never updated) and the
/// signed distance of the plane to the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneParams {
    /// Rotation taking world coordinates into the ground frame.
    pub q: UnitQuaternion<f64>,
    pub d: f64,
}

impl PlaneParams {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
            d: 0.0,
        }
    }

    /// 2-DoF chart on the rotation plus the distance: `delta` is
    /// (roll-tangent, pitch-tangent, d). The rotation update is a left
    /// increment with zero yaw component, which keeps the plane normal's
    /// yaw gauge untouched.
    pub fn retract(&self, delta: &Vector3<f64>) -> PlaneParams {
        let dq = so3::exp(&Vector3::new(delta.x, delta.y, 0.0));
        PlaneParams {
            q: dq * self.q,
            d: self.d + delta.z,
        }
    }

    /// Chart coordinates of `other` around `self`. Well-defined for states
    /// produced by `retract`, whose relative rotation has no yaw part.
    pub fn local(&self, other: &PlaneParams) -> Vector3<f64> {
        let dq = so3::log(&(other.q * self.q.inverse()));
        Vector3::new(dq.x, dq.y, other.d - self.d)
    }

    /// Plane normal expressed in world coordinates.
    pub fn normal_world(&self) -> Vector3<f64> {
        self.q.inverse() * Vector3::z()
    }

    /// Plane through a base pose: normal from the base z-axis, distance
    /// from the base origin. Used for initialization.
    pub fn from_base_pose(base: &Pose3) -> Self {
        let r_b = base.rotation_matrix();
        let z_world = Vector3::new(r_b[(0, 2)], r_b[(1, 2)], r_b[(2, 2)]);
        // Minimal rotation taking the base z-axis to e3 (zero yaw).
        let q = UnitQuaternion::rotation_between(&z_world, &Vector3::z())
            .unwrap_or_else(UnitQuaternion::identity);
        let d = -(q * base.trans).z;
        Self { q, d }
    }
}

/// Plane residual of a frame. Rows 0..1: the first two components of the
/// base z-axis in ground coordinates; row 2: signed height violation.
/// Zero iff the base z-axis aligns with the plane normal and the base
/// origin lies on the plane.
pub fn plane_residual(
    plane: &PlaneParams,
    pose: &Pose3,  // sensor pose T_i^w
    extr: &Pose3,  // sensor-to-base extrinsic T_i^b
) -> Vector3<f64> {
    let r_q = plane.q.to_rotation_matrix().into_inner();
    let r_i = pose.rotation_matrix();
    let r_e_t = extr.rotation_matrix().transpose();
    let m = r_q * r_i * r_e_t * Vector3::z();
    let t_base = pose.trans - r_i * (r_e_t * extr.trans);
    let height = plane.d + (r_q * t_base).z;
    Vector3::new(m.x, m.y, height)
}

/// Jacobian blocks of the plane residual.
pub struct PlaneJacobians {
    /// w.r.t. the plane chart (roll-tangent, pitch-tangent, d).
    pub d_plane: Matrix3<f64>,
    /// w.r.t. the frame pose (split retraction).
    pub d_pose: SMatrix<f64, 3, 6>,
    /// w.r.t. the extrinsic (split retraction).
    pub d_extr: SMatrix<f64, 3, 6>,
}

pub fn plane_jacobians(plane: &PlaneParams, pose: &Pose3, extr: &Pose3) -> PlaneJacobians {
    let r_q = plane.q.to_rotation_matrix().into_inner();
    let r_i = pose.rotation_matrix();
    let r_e = extr.rotation_matrix();
    let r_e_t = r_e.transpose();
    let ez = Vector3::z();
    let u = r_e_t * ez;
    let m = r_q * r_i * u;
    let t_base = pose.trans - r_i * (r_e_t * extr.trans);
    let w = r_q * t_base;

    // Plane chart: left perturbation Exp((d1, d2, 0)) of R_q.
    let mut d_plane = Matrix3::zeros();
    let dm = -so3::hat(&m);
    let dw = -so3::hat(&w);
    d_plane
        .fixed_view_mut::<2, 2>(0, 0)
        .copy_from(&dm.fixed_view::<2, 2>(0, 0));
    d_plane[(2, 0)] = dw[(2, 0)];
    d_plane[(2, 1)] = dw[(2, 1)];
    d_plane[(2, 2)] = 1.0;

    // Frame pose.
    let mut d_pose = SMatrix::<f64, 3, 6>::zeros();
    let dm_dthi = -r_q * r_i * so3::hat(&u);
    d_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&dm_dthi.fixed_view::<2, 3>(0, 0));
    let row3_t = (r_q.transpose() * ez).transpose();
    d_pose.fixed_view_mut::<1, 3>(2, 0).copy_from(&row3_t);
    let dh_dthi = ez.transpose() * r_q * r_i * so3::hat(&(r_e_t * extr.trans));
    d_pose.fixed_view_mut::<1, 3>(2, 3).copy_from(&dh_dthi);

    // Extrinsic.
    let mut d_extr = SMatrix::<f64, 3, 6>::zeros();
    let dm_dthe = r_q * r_i * so3::hat(&u);
    d_extr
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&dm_dthe.fixed_view::<2, 3>(0, 0));
    let dh_dte = -(ez.transpose() * r_q * r_i * r_e_t);
    d_extr.fixed_view_mut::<1, 3>(2, 0).copy_from(&dh_dte);
    let dh_dthe = -(ez.transpose() * r_q * r_i * so3::hat(&(r_e_t * extr.trans)));
    d_extr.fixed_view_mut::<1, 3>(2, 3).copy_from(&dh_dthe);

    PlaneJacobians {
        d_plane,
        d_pose,
        d_extr,
    }
}
