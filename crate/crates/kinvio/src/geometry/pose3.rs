//! Rigid transforms in 3D with the exponential/logarithm maps and the
//! split retraction used by the estimator states.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::so3;

/// Rigid transform: `x_out = rot * x_in + trans`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub rot: UnitQuaternion<f64>,
    pub trans: Vector3<f64>,
}

impl Pose3 {
    pub fn new(rot: UnitQuaternion<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    pub fn from_rotation_vector(phi: &Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self::new(so3::exp(phi), trans)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rot.to_rotation_matrix().into_inner()
    }

    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let rinv = self.rot.inverse();
        Pose3 {
            rot: rinv,
            trans: -(rinv * self.trans),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }

    /// Split retraction: translation shifts additively, rotation takes a
    /// right increment. The estimator and all of its analytic Jacobians use
    /// this chart; `delta` is (dt, dtheta).
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose3 {
        let dt = Vector3::new(delta[0], delta[1], delta[2]);
        let dth = Vector3::new(delta[3], delta[4], delta[5]);
        Pose3 {
            rot: self.rot * so3::exp(&dth),
            trans: self.trans + dt,
        }
    }

    /// Inverse of [`Pose3::retract`]: coordinates of `other` in the chart
    /// centered at `self`.
    pub fn local(&self, other: &Pose3) -> Vector6<f64> {
        let dth = so3::log(&(self.rot.inverse() * other.rot));
        let dt = other.trans - self.trans;
        Vector6::new(dt.x, dt.y, dt.z, dth.x, dth.y, dth.z)
    }
}

/// SE(3) exponential map: `xi` is (rho, phi).
pub fn exp(xi: &Vector6<f64>) -> Pose3 {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let v = so3::left_jacobian(&phi);
    Pose3 {
        rot: so3::exp(&phi),
        trans: v * rho,
    }
}

/// SE(3) logarithm map returning (rho, phi).
pub fn log(p: &Pose3) -> Vector6<f64> {
    let phi = so3::log(&p.rot);
    let rho = so3::left_jacobian_inv(&phi) * p.trans;
    Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose3 {
        let phi = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
        );
        let t = Vector3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        );
        Pose3::from_rotation_vector(&phi, t)
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let id = p.compose(&p.inverse());
            assert!(id.trans.norm() < 1e-9);
            assert!(so3::log(&id.rot).norm() < 1e-9);
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10_000 {
            let mut xi = Vector6::zeros();
            for k in 0..6 {
                xi[k] = rng.gen_range(-1.0..1.0);
            }
            // keep the rotation angle principal
            let phi = Vector3::new(xi[3], xi[4], xi[5]);
            if phi.norm() > std::f64::consts::PI - 0.01 {
                continue;
            }
            let back = log(&exp(&xi));
            assert!((back - xi).norm() < 1e-8);
        }
    }

    #[test]
    fn retract_local_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let mut d = Vector6::zeros();
            for k in 0..6 {
                d[k] = rng.gen_range(-0.5..0.5);
            }
            let q = p.retract(&d);
            let back = p.local(&q);
            assert!((back - d).norm() < 1e-10);
        }
    }

    #[test]
    fn pure_translation_log_is_translation() {
        let p = Pose3::new(UnitQuaternion::identity(), Vector3::new(0.0, 0.0, 1e-3));
        let xi = log(&p);
        assert_eq!(xi[2], 1e-3);
        assert!(Vector3::new(xi[3], xi[4], xi[5]).norm() == 0.0);
    }

    #[test]
    fn rotation_determinant_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let r = p.rotation_matrix();
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-9);
        }
    }
}
