use kinvio::config::EstimatorConfig;
use kinvio::estimator::{run_sequence, RunOptions};
use kinvio::sim::{simulate_dataset, ScriptPreset, SimConfig};

#[test]
fn zero_noise_short_sequence_tracks_ground_truth() {
    let mut cfg = SimConfig::zero_noise();
    cfg.duration = 4.0;
    cfg.script_preset = ScriptPreset::Smooth;
    let ds = simulate_dataset(&cfg, 1).unwrap();

    let est_cfg = EstimatorConfig::default();
    let result = run_sequence(&ds, &est_cfg, RunOptions::default()).unwrap();
    assert_eq!(result.trajectory.len(), ds.frames.len());

    // Gauge-invariant check: relative sensor pose between first and last
    // frame must match ground truth.
    let first = &result.trajectory[0];
    let last = result.trajectory.last().unwrap();
    let est_rel = first.pose.inverse().compose(&last.pose);
    let gt_first = ds.gt_at(first.t).unwrap().pose;
    let gt_last = ds.gt_at(last.t).unwrap().pose;
    let gt_rel = gt_first.inverse().compose(&gt_last);
    let dt_err = (est_rel.trans - gt_rel.trans).norm();
    let dr_err = (est_rel.rot.inverse() * gt_rel.rot).angle();
    eprintln!("relative translation error {dt_err:.2e}, rotation error {dr_err:.2e}");
    eprintln!("rbf: {:?}", result.rbf);
    assert!(dt_err < 1e-3, "translation drift {dt_err}");
    assert!(dr_err < 1e-3, "rotation drift {dr_err}");
}
