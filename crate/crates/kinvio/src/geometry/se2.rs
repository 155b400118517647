//! SE(2) poses and the exponential/logarithm pair used by the unicycle
//! motion model.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::so3::SMALL_ANGLE;

/// Wrap an angle to the principal range (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        r
    }
}

/// Planar rigid transform. The angle is kept wrapped to (-pi, pi] at
/// construction and composition time so poses compare predictably.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub angle: f64,
    pub trans: Vector2<f64>,
}

impl Pose2 {
    pub fn new(angle: f64, x: f64, y: f64) -> Self {
        Self {
            angle: wrap_angle(angle),
            trans: Vector2::new(x, y),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn compose(&self, other: &Pose2) -> Pose2 {
        Pose2 {
            angle: wrap_angle(self.angle + other.angle),
            trans: self.trans + self.rotation() * other.trans,
        }
    }

    pub fn inverse(&self) -> Pose2 {
        let rt = self.rotation().transpose();
        Pose2 {
            angle: wrap_angle(-self.angle),
            trans: -(rt * self.trans),
        }
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation() * p + self.trans
    }
}

/// Commanded twist of a differential-drive base: forward velocity and yaw
/// rate. The lateral velocity is structurally zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Twist2 {
    pub v: f64,
    pub omega: f64,
}

impl Twist2 {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0)
    }

    /// Full se(2) coordinates (vx, vy, omega) with the lateral slot zero.
    pub fn full(&self) -> Vector3<f64> {
        Vector3::new(self.v, 0.0, self.omega)
    }
}

/// V-matrix coefficients a = sin(t)/t and b = (1 - cos(t))/t with two-term
/// series below the small-angle threshold.
fn v_coeffs(theta: f64) -> (f64, f64) {
    if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, theta * (0.5 - t2 / 24.0))
    } else {
        ((theta.sin()) / theta, (1.0 - theta.cos()) / theta)
    }
}

/// Exponential map of se(2) for a general twist (vx, vy, omega) over `dt`.
pub fn exp_full(xi: &Vector3<f64>, dt: f64) -> Pose2 {
    let theta = xi.z * dt;
    let rho = Vector2::new(xi.x * dt, xi.y * dt);
    let (a, b) = v_coeffs(theta);
    let t = Vector2::new(a * rho.x - b * rho.y, b * rho.x + a * rho.y);
    Pose2 {
        angle: wrap_angle(theta),
        trans: t,
    }
}

/// Exponential map for a control twist (lateral component zero).
pub fn exp(xi: &Twist2, dt: f64) -> Pose2 {
    exp_full(&xi.full(), dt)
}

/// Logarithm map of SE(2) returning (vx, vy, omega) such that
/// `exp_full(log(p), 1.0) == p`.
///
/// The translation part inverts the V matrix
/// `V = [[sin t / t, -(1 - cos t)/t], [(1 - cos t)/t, sin t / t]]`
/// through `V^-1 = [[a, b], [-b, a]] / (a^2 + b^2)`, which stays regular on
/// the whole principal range including t = pi.
pub fn log(p: &Pose2) -> Vector3<f64> {
    let theta = p.angle;
    let (a, b) = v_coeffs(theta);
    let det = a * a + b * b;
    let rho = Vector2::new(
        (a * p.trans.x + b * p.trans.y) / det,
        (-b * p.trans.x + a * p.trans.y) / det,
    );
    Vector3::new(rho.x, rho.y, theta)
}

/// Derivative of `log(p)` with respect to (dx, dy, dtheta) perturbations of
/// the pose entries themselves (not a group tangent; the motion residuals
/// chain through the raw entries).
pub fn log_jacobian_wrt_entries(p: &Pose2) -> nalgebra::Matrix3<f64> {
    let theta = p.angle;
    let (a, b) = v_coeffs(theta);
    let det = a * a + b * b;
    let vinv = Matrix2::new(a / det, b / det, -b / det, a / det);
    // d(a, b)/dtheta
    let (da, db) = if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        (-theta / 3.0 + t2 * theta / 30.0, 0.5 - t2 / 8.0)
    } else {
        let (s, c) = theta.sin_cos();
        (
            c / theta - s / (theta * theta),
            s / theta - (1.0 - c) / (theta * theta),
        )
    };
    let ddet = 2.0 * (a * da + b * db);
    // d(Vinv)/dtheta = (dN * det - N * ddet)/det^2 with N = [[a, b], [-b, a]]
    let n = Matrix2::new(a, b, -b, a);
    let dn = Matrix2::new(da, db, -db, da);
    let dvinv = (dn * det - n * ddet) / (det * det);
    let dtheta_col = dvinv * p.trans;

    let mut j = nalgebra::Matrix3::zeros();
    j.fixed_view_mut::<2, 2>(0, 0).copy_from(&vinv);
    j[(0, 2)] = dtheta_col.x;
    j[(1, 2)] = dtheta_col.y;
    j[(2, 2)] = 1.0;
    j
}

/// Derivative of the translation of `exp(xi, dt)` with respect to (v, omega).
pub fn exp_translation_jacobian(xi: &Twist2, dt: f64) -> Matrix2<f64> {
    let theta = xi.omega * dt;
    let (a, b) = v_coeffs(theta);
    let (da, db) = if theta.abs() < SMALL_ANGLE {
        let t2 = theta * theta;
        (-theta / 3.0 + t2 * theta / 30.0, 0.5 - t2 / 8.0)
    } else {
        let (s, c) = theta.sin_cos();
        (
            c / theta - s / (theta * theta),
            s / theta - (1.0 - c) / (theta * theta),
        )
    };
    // x = v dt a(theta), y = v dt b(theta), theta = omega dt
    Matrix2::new(
        dt * a,
        xi.v * dt * da * dt,
        dt * b,
        xi.v * dt * db * dt,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// RK4 integration of the unicycle ODE, used as an independent oracle
    /// for the closed-form exponential.
    fn rk4_unicycle(v: f64, omega: f64, dt: f64, step: f64) -> Pose2 {
        let f = |state: &Vector3<f64>| {
            Vector3::new(v * state.z.cos(), v * state.z.sin(), omega)
                .map(|x| x)
        };
        // state = (x, y, theta) with theta unwrapped during integration
        let mut s = Vector3::zeros();
        let n = (dt / step).round() as usize;
        let h = dt / n as f64;
        for _ in 0..n {
            let k1 = f(&s);
            let k2 = f(&(s + k1 * (h / 2.0)));
            let k3 = f(&(s + k2 * (h / 2.0)));
            let k4 = f(&(s + k3 * h));
            s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        Pose2::new(s.z, s.x, s.y)
    }

    #[test]
    fn zero_twist_is_identity() {
        let p = exp(&Twist2::zero(), 1.0);
        assert_eq!(p, Pose2::identity());
    }

    #[test]
    fn quarter_turn_closed_form() {
        // v=1, omega=pi/2 over 1 s: angle pi/2, translation (2/pi, 2/pi).
        let p = exp(&Twist2::new(1.0, std::f64::consts::FRAC_PI_2), 1.0);
        let expect = 2.0 / std::f64::consts::PI;
        assert_relative_eq!(p.angle, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(p.trans.x, expect, epsilon = 1e-12);
        assert_relative_eq!(p.trans.y, expect, epsilon = 1e-12);
        // Cross-check against the RK4 oracle.
        let oracle = rk4_unicycle(1.0, std::f64::consts::FRAC_PI_2, 1.0, 1e-5);
        assert_relative_eq!(p.trans.x, oracle.trans.x, epsilon = 1e-9);
        assert_relative_eq!(p.trans.y, oracle.trans.y, epsilon = 1e-9);
    }

    #[test]
    fn small_angle_branch_matches_rk4() {
        let p = exp(&Twist2::new(0.5, 1e-9), 2.0);
        let oracle = rk4_unicycle(0.5, 1e-9, 2.0, 1e-4);
        assert!((p.trans - oracle.trans).norm() < 1e-9);
        assert_relative_eq!(p.trans.x, 1.0, epsilon = 1e-9);
        assert_relative_eq!(p.trans.y, 1e-9, epsilon = 1e-12);
        assert_relative_eq!(p.angle, 2e-9, epsilon = 1e-15);
    }

    #[test]
    fn branch_continuity_at_threshold() {
        // Values straddling the series/closed-form switch must agree.
        for sign in [-1.0, 1.0] {
            let lo = exp(&Twist2::new(0.4, sign * (SMALL_ANGLE * 0.999_999)), 1.0);
            let hi = exp(&Twist2::new(0.4, sign * (SMALL_ANGLE * 1.000_001)), 1.0);
            assert!((lo.trans - hi.trans).norm() < 1e-10);
            assert!((lo.angle - hi.angle).abs() < 1e-10);
        }
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_eq!(log(&Pose2::identity()), Vector3::zeros());
    }

    #[test]
    fn log_inverts_exp() {
        let p = exp(&Twist2::new(1.0, std::f64::consts::FRAC_PI_2), 1.0);
        let xi = log(&p);
        assert_relative_eq!(xi.x, 1.0, epsilon = 1e-12);
        assert_relative_eq!(xi.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(xi.z, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn log_small_angle() {
        let xi = log(&Pose2::new(1e-9, 1.0, 0.0));
        assert_relative_eq!(xi.x, 1.0, epsilon = 1e-12);
        assert!(xi.y.abs() < 1e-9);
        assert_relative_eq!(xi.z, 1e-9, epsilon = 1e-15);
    }

    #[test]
    fn log_at_pi_round_trips() {
        let p = Pose2::new(std::f64::consts::PI, 0.3, -0.2);
        let back = exp_full(&log(&p), 1.0);
        assert!((back.trans - p.trans).norm() < 1e-12);
        assert_relative_eq!(back.angle, p.angle, epsilon = 1e-12);
    }

    #[test]
    fn compose_inverse_is_identity() {
        let p = Pose2::new(1.2, 0.5, -0.7);
        let id = p.compose(&p.inverse());
        assert!(id.angle.abs() < 1e-12);
        assert!(id.trans.norm() < 1e-12);
    }

    #[test]
    fn round_trip_bulk() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let dt: f64 = rng.gen_range(0.01..2.0);
            let max_omega = (std::f64::consts::PI - 0.1) / dt;
            let v: f64 = rng.gen_range(-1.0..1.0);
            let omega: f64 = rng.gen_range(-max_omega..max_omega);
            let xi = Twist2::new(v, omega);
            let back = log(&exp(&xi, dt)) / dt;
            assert!((back - xi.full()).norm() < 1e-8, "xi=({v},{omega}) dt={dt}");
        }
    }

    #[test]
    fn log_entry_jacobian_matches_fd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = Pose2::new(
                rng.gen_range(-2.5..2.5),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let j = log_jacobian_wrt_entries(&p);
            let h = 1e-7;
            for k in 0..3 {
                let mut lo = p;
                let mut hi = p;
                match k {
                    0 => {
                        lo.trans.x -= h;
                        hi.trans.x += h;
                    }
                    1 => {
                        lo.trans.y -= h;
                        hi.trans.y += h;
                    }
                    _ => {
                        lo.angle -= h;
                        hi.angle += h;
                    }
                }
                let fd = (log(&hi) - log(&lo)) / (2.0 * h);
                assert!(
                    (fd - j.column(k)).norm() < 1e-5 * (1.0 + fd.norm()),
                    "p={p:?} col={k}"
                );
            }
        }
    }

    #[test]
    fn exp_translation_jacobian_matches_fd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let xi = Twist2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0));
            let dt = rng.gen_range(0.01..0.5);
            let j = exp_translation_jacobian(&xi, dt);
            let h = 1e-7;
            let fd_v = (exp(&Twist2::new(xi.v + h, xi.omega), dt).trans
                - exp(&Twist2::new(xi.v - h, xi.omega), dt).trans)
                / (2.0 * h);
            let fd_w = (exp(&Twist2::new(xi.v, xi.omega + h), dt).trans
                - exp(&Twist2::new(xi.v, xi.omega - h), dt).trans)
                / (2.0 * h);
            assert!((fd_v - j.column(0)).norm() < 1e-6);
            assert!((fd_w - j.column(1)).norm() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn full_twist_round_trip(
            vx in -1.0f64..1.0,
            vy in -1.0f64..1.0,
            omega in -3.0f64..3.0,
        ) {
            let xi = Vector3::new(vx, vy, omega);
            let back = log(&exp_full(&xi, 1.0));
            prop_assert!((back - xi).norm() < 1e-8);
        }

        #[test]
        fn wrap_stays_principal(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        }
    }
}
