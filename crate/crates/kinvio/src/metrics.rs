//! Trajectory metrics: rigid alignment, absolute trajectory error,
//! relative pose error over path-length fractions, and velocity RMSE.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::geometry::{Pose3, Twist2};

/// Timestamped pose pair lists are aligned by index; callers associate
/// estimate and ground truth beforehand.
#[derive(Debug, Clone)]
pub struct TrajectoryPair {
    pub est: Vec<Pose3>,
    pub gt: Vec<Pose3>,
}

/// Closed-form rigid (no scale) least-squares alignment of the estimate
/// positions onto the ground truth: returns `T` minimizing
/// `sum || gt_i - T est_i ||^2`. Single-pose inputs get a translation-only
/// alignment with identity rotation.
pub fn align(est: &[Pose3], gt: &[Pose3]) -> Pose3 {
    assert_eq!(est.len(), gt.len());
    assert!(!est.is_empty());
    let n = est.len() as f64;
    let mut c_est = Vector3::zeros();
    let mut c_gt = Vector3::zeros();
    for (e, g) in est.iter().zip(gt) {
        c_est += e.trans;
        c_gt += g.trans;
    }
    c_est /= n;
    c_gt /= n;

    if est.len() == 1 {
        return Pose3::new(UnitQuaternion::identity(), c_gt - c_est);
    }

    let mut w = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        w += (g.trans - c_gt) * (e.trans - c_est).transpose();
    }
    let svd = nalgebra::SVD::new(w, true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let rot = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let t = c_gt - rot * c_est;
    Pose3::new(rot, t)
}

/// Geodesic angle of the relative rotation, in radians.
fn rotation_angle(a: &Pose3, b: &Pose3) -> f64 {
    (a.rot.inverse() * b.rot).angle()
}

/// Absolute trajectory error after rigid alignment:
/// (translation RMSE in meters, rotation RMSE in degrees).
pub fn ate(est: &[Pose3], gt: &[Pose3]) -> (f64, f64) {
    let t = align(est, gt);
    let n = est.len() as f64;
    let mut se_t = 0.0;
    let mut se_r = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let aligned = t.compose(e);
        se_t += (aligned.trans - g.trans).norm_squared();
        se_r += rotation_angle(&aligned, g).powi(2);
    }
    ((se_t / n).sqrt(), (se_r / n).sqrt().to_degrees())
}

/// Relative pose error over segments of fixed ground-truth path length,
/// for fractions 10%..50% of the total arc length, averaged over the five
/// fractions: (translation RMSE m, rotation RMSE deg).
pub fn rpe(est: &[Pose3], gt: &[Pose3]) -> (f64, f64) {
    let per = rpe_per_fraction(est, gt);
    let n = per.len() as f64;
    let (mut t, mut r) = (0.0, 0.0);
    for (_, rt, rr) in &per {
        t += rt;
        r += rr;
    }
    (t / n, r / n)
}

/// Per-fraction RPE values: (fraction, translation RMSE, rotation RMSE deg).
pub fn rpe_per_fraction(est: &[Pose3], gt: &[Pose3]) -> Vec<(f64, f64, f64)> {
    assert_eq!(est.len(), gt.len());
    let n = gt.len();
    // Cumulative ground-truth arc length.
    let mut arc = Vec::with_capacity(n);
    let mut acc = 0.0;
    arc.push(0.0);
    for k in 1..n {
        acc += (gt[k].trans - gt[k - 1].trans).norm();
        arc.push(acc);
    }
    let total = acc;

    let mut out = Vec::new();
    for frac_idx in 1..=5 {
        let frac = 0.1 * frac_idx as f64;
        let seg_len = frac * total;
        let mut se_t = 0.0;
        let mut se_r = 0.0;
        let mut count = 0usize;
        let mut j = 0usize;
        for i in 0..n {
            if j < i {
                j = i;
            }
            while j < n && arc[j] - arc[i] < seg_len {
                j += 1;
            }
            if j >= n {
                break;
            }
            let gt_rel = gt[i].inverse().compose(&gt[j]);
            let est_rel = est[i].inverse().compose(&est[j]);
            let err = gt_rel.inverse().compose(&est_rel);
            se_t += err.trans.norm_squared();
            se_r += crate::geometry::so3::log(&err.rot).norm().powi(2);
            count += 1;
        }
        if count == 0 {
            out.push((frac, 0.0, 0.0));
        } else {
            let nf = count as f64;
            out.push((
                frac,
                (se_t / nf).sqrt(),
                (se_r / nf).sqrt().to_degrees(),
            ));
        }
    }
    out
}

/// RMSE between per-frame effective twists and ground-truth executed
/// twists: (linear m/s, angular deg/s).
pub fn velocity_rmse(est: &[Twist2], gt: &[Twist2]) -> (f64, f64) {
    assert_eq!(est.len(), gt.len());
    assert!(!est.is_empty());
    let n = est.len() as f64;
    let mut se_v = 0.0;
    let mut se_w = 0.0;
    for (e, g) in est.iter().zip(gt) {
        se_v += (e.v - g.v).powi(2);
        se_w += (e.omega - g.omega).powi(2);
    }
    ((se_v / n).sqrt(), (se_w / n).sqrt().to_degrees())
}
