use kinvio::config::WeightingMode;
use kinvio::motion::RbfParams;
use kinvio::predict::{median, prediction_error_study};
use kinvio::pipeline::parse_calibration;
use kinvio::sim::read_dataset;

#[test]
#[ignore]
fn median_ratios() {
    let ds = read_dataset(std::path::Path::new("/tmp/ds5")).unwrap();
    let raw_calib = std::fs::read_to_string("/tmp/est5/calibration").unwrap();
    let (rbf, _, _) = parse_calibration(&raw_calib).unwrap();
    eprintln!("calibrated: {rbf:?}");
    let modes = [
        WeightingMode::Rbf,
        WeightingMode::Avg,
        WeightingMode::Raw,
    ];
    let rows = prediction_error_study(&ds, &rbf, &[1.0], &modes).unwrap();
    for r in &rows {
        eprintln!(
            "mode={:10} rmse={:.4} median={:.4}",
            r.mode.name(),
            r.translation_rmse,
            median(&r.translation_errors)
        );
    }
    // Oracle grid fit of (mu, sigma, s) on endpoint error at 1 s.
    let mut best = (f64::MAX, RbfParams::default());
    for mu in [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4] {
        for sigma in [0.02, 0.05, 0.1, 0.2, 0.4] {
            for s in [0.9, 0.95, 1.0] {
                let p = RbfParams {
                    mu_lin: mu,
                    sigma_lin: sigma,
                    s_lin: s,
                    mu_ang: mu,
                    sigma_ang: sigma,
                    s_ang: s,
                };
                let rows = prediction_error_study(&ds, &p, &[1.0], &[WeightingMode::Rbf]).unwrap();
                let m = median(&rows[0].translation_errors);
                if m < best.0 {
                    best = (m, p);
                }
            }
        }
    }
    eprintln!("oracle grid best median={:.4} at {:?}", best.0, best.1);
}

#[test]
#[ignore]
fn interval_residual_landscape() {
    use kinvio::geometry::se2;
    use kinvio::motion::{effective_control, CommandWindow};
    let ds = read_dataset(std::path::Path::new("/tmp/ds5")).unwrap();
    let plane = ds.meta.plane.pose();
    let extr = ds.meta.extr_true.pose();
    let base_at = |t: f64| {
        let g = ds.gt_at(t).unwrap();
        let b = plane.inverse().compose(&g.pose).compose(&extr.inverse());
        let yaw = kinvio::geometry::so3::log(&b.rot).z;
        kinvio::geometry::Pose2::new(yaw, b.trans.x, b.trans.y)
    };
    let cost = |p: &RbfParams| -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for pair in ds.frames.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let Some(w) = CommandWindow::build(&ds.commands, b.t, 3) else { continue };
            let dt = b.t - a.t;
            let rel = base_at(a.t).inverse().compose(&base_at(b.t));
            let zeta = se2::log(&rel) / dt;
            let xi = effective_control(&w, p);
            sum += (zeta.x - xi.v).powi(2) + (zeta.z - xi.omega).powi(2);
            n += 1;
        }
        sum / n as f64
    };
    let mk = |mu: f64, sigma: f64, s: f64| RbfParams {
        mu_lin: mu, sigma_lin: sigma, s_lin: s,
        mu_ang: mu, sigma_ang: sigma, s_ang: s,
    };
    for (name, p) in [
        ("init (0, 0.5, 1)", mk(0.0, 0.5, 1.0)),
        ("avg-like (1.0, 3.4, 0.90)", mk(1.0, 3.4, 0.90)),
        ("oracle-sharp (0.3, 0.02, 0.95)", mk(0.3, 0.02, 0.95)),
        ("mid (0.15, 0.1, 0.95)", mk(0.15, 0.1, 0.95)),
        ("mid2 (0.2, 0.05, 0.95)", mk(0.2, 0.05, 0.95)),
    ] {
        eprintln!("{name}: mean sq interval residual = {:.6e}", cost(&p));
    }
}
