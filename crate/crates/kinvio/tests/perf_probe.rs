use kinvio::config::EstimatorConfig;
use kinvio::estimator::{RunOptions, SlidingWindow};
use kinvio::sim::{simulate_dataset, ScriptPreset, SimConfig};

#[test]
#[ignore]
fn iteration_profile() {
    let mut cfg = SimConfig::zero_noise();
    cfg.duration = 4.0;
    cfg.script_preset = ScriptPreset::Smooth;
    let ds = simulate_dataset(&cfg, 1).unwrap();
    let mut window = SlidingWindow::new(&ds, EstimatorConfig::default(), RunOptions::default());
    let mut total_iters = 0usize;
    let mut total_accepted = 0usize;
    let t0 = std::time::Instant::now();
    for frame in &ds.frames {
        let stats = window.add_frame(&ds, frame).unwrap();
        total_iters += stats.iterations;
        total_accepted += stats.accepted_steps;
    }
    eprintln!(
        "frames={} iters={} accepted={} wall={:?} per-frame={:?}",
        ds.frames.len(),
        total_iters,
        total_accepted,
        t0.elapsed(),
        t0.elapsed() / ds.frames.len() as u32
    );
}

#[test]
#[ignore]
fn cost_breakdown() {
    use kinvio::estimator::run_sequence;
    let mut cfg = SimConfig::zero_noise();
    cfg.duration = 2.0;
    cfg.script_preset = ScriptPreset::Smooth;

    for lmks in [150usize, 300, 450] {
        let mut c = cfg.clone();
        c.landmark_count = lmks;
        let ds = simulate_dataset(&c, 1).unwrap();
        let nobs = ds.obs.len();
        let t0 = std::time::Instant::now();
        run_sequence(&ds, &EstimatorConfig::default(), RunOptions::default()).unwrap();
        eprintln!("landmarks={lmks} obs={nobs} wall={:?}", t0.elapsed());
    }
}
