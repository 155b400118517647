//! SO(3) exponential/logarithm maps and tangent-space Jacobians.
//!
//! Rotations are stored as unit quaternions. All maps switch to truncated
//! series below [`SMALL_ANGLE`] so that nothing divides by the rotation
//! angle near zero.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

/// Threshold below which series expansions replace the closed forms.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Skew-symmetric (hat) matrix of a 3-vector.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    let (w, k) = if theta < SMALL_ANGLE {
        // cos(t/2) ~ 1 - t^2/8, sin(t/2)/t ~ 1/2 - t^2/48
        let t2 = theta * theta;
        (1.0 - t2 / 8.0, 0.5 - t2 / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    let v = phi * k;
    UnitQuaternion::from_quaternion(Quaternion::new(w, v.x, v.y, v.z))
}

/// Logarithm map returning the principal rotation vector (angle in [0, pi]).
pub fn log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    // Flip to the hemisphere with nonnegative scalar part so the angle is
    // principal.
    let (w, v) = {
        let q = q.quaternion();
        if q.w >= 0.0 {
            (q.w, Vector3::new(q.i, q.j, q.k))
        } else {
            (-q.w, Vector3::new(-q.i, -q.j, -q.k))
        }
    };
    let s = v.norm();
    if s < SMALL_ANGLE {
        // theta/sin(theta/2)/2 ~ 2/w * (1 - s^2/(3 w^2))
        let k = 2.0 / w * (1.0 - s * s / (3.0 * w * w));
        v * k
    } else {
        let theta = 2.0 * s.atan2(w);
        v * (theta / s)
    }
}

fn jacobian_coeffs(theta: f64) -> (f64, f64) {
    // a = (1 - cos t)/t^2, b = (t - sin t)/t^3
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b) = jacobian_coeffs(theta);
    let h = hat(phi);
    Matrix3::identity() - a * h + b * (h * h)
}

/// Left Jacobian of SO(3): Exp(phi + d) ~= Exp(Jl(phi) d) Exp(phi).
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian(&(-phi))
}

fn inv_jacobian_coeff(theta: f64) -> f64 {
    // c = 1/t^2 - (1 + cos t)/(2 t sin t)
    if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    }
}

/// Inverse of the right Jacobian.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let c = inv_jacobian_coeff(theta);
    let h = hat(phi);
    Matrix3::identity() + 0.5 * h + c * (h * h)
}

/// Inverse of the left Jacobian.
pub fn left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv(&(-phi))
}

/// Derivative of `left_jacobian_inv(phi) * t` with respect to `phi`.
///
/// Needed by the analytic Jacobians of residuals built on the SE(3) log.
pub fn d_left_jacobian_inv_times(phi: &Vector3<f64>, t: &Vector3<f64>) -> Matrix3<f64> {
    // Jl_inv(phi) = I - 1/2 hat(phi) + c(theta) hat(phi)^2 with c as above.
    let theta = phi.norm();
    let c = inv_jacobian_coeff(theta);
    // dc/dtheta
    let dc = if theta < 1e-4 {
        theta / 360.0
    } else {
        let (s, co) = (theta.sin(), theta.cos());
        -2.0 / theta.powi(3)
            + (theta * s * s + (1.0 + co) * (s + theta * co)) / (2.0 * theta * theta * s * s)
    };
    let h = hat(phi);
    let hh_t = h * (h * t);
    // d(hat(phi)^2 t)/dphi = (phi . t) I + phi t^T - 2 t phi^T
    let d_hh = Matrix3::identity() * phi.dot(t) + phi * t.transpose() - 2.0 * t * phi.transpose();
    let d_theta_term = if theta < 1e-12 {
        Matrix3::zeros()
    } else {
        hh_t * (phi.transpose() * (dc / theta))
    };
    0.5 * hat(t) + d_theta_term + c * d_hh
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(log(&UnitQuaternion::identity()), Vector3::zeros());
    }

    #[test]
    fn exp_of_yaw_matches_planar_rotation() {
        // 90 degree yaw compared against the 2D rotation embedded in 3D.
        let q = exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let r = q.to_rotation_matrix();
        let r2 = Matrix2::new(0.0, -1.0, 1.0, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(r[(i, j)], r2[(i, j)], epsilon = 1e-12);
            }
        }
        assert_relative_eq!(r[(2, 2)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_over_angle_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI - 0.01);
            let phi = axis * angle;
            let back = log(&exp(&phi));
            assert!((back - phi).norm() < 1e-8, "phi={phi:?} back={back:?}");
        }
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for sign in [-1.0, 1.0] {
            let phi = Vector3::new(0.0, sign * SMALL_ANGLE, 0.0);
            // Series value just below the threshold vs closed form just above.
            let below = exp(&(phi * 0.999_999));
            let above = exp(&(phi * 1.000_001));
            let diff = (below.inverse() * above).angle();
            assert!(diff < 1e-10);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let phi = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let jr = right_jacobian(&phi);
            let h = 1e-7;
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                // Exp(phi + d) = Exp(phi) Exp(Jr d)  =>  column k of Jr
                let col = log(&(exp(&phi).inverse() * exp(&(phi + d)))) / h;
                assert!((col - jr.column(k)).norm() < 1e-5);
            }
            let jr_inv = right_jacobian_inv(&phi);
            assert!((jr * jr_inv - Matrix3::identity()).norm() < 1e-6);
        }
    }

    #[test]
    fn d_jl_inv_times_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let phi = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let t = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let g = d_left_jacobian_inv_times(&phi, &t);
            let h = 1e-7;
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let fd = (left_jacobian_inv(&(phi + d)) * t - left_jacobian_inv(&(phi - d)) * t)
                    / (2.0 * h);
                assert!(
                    (fd - g.column(k)).norm() < 1e-4 * (1.0 + fd.norm()),
                    "col {k}: fd={fd:?} an={:?}",
                    g.column(k)
                );
            }
        }
    }
}
