//! Shared fixtures for the criterion benchmarks.

use graphdet::detector::HrParams;
use graphdet::geometry::Box;
use graphdet::runcfg::RunConfig;
use graphdet::synth::{generate_scene, sample_proposals, SyntheticScene};

/// Default-dimension config with a fixed seed for benching.
pub fn bench_config() -> RunConfig {
    RunConfig {
        seed: 1234,
        ..RunConfig::default()
    }
}

pub fn bench_fixture() -> (RunConfig, HrParams, SyntheticScene, Vec<Box>) {
    let cfg = bench_config();
    let params = HrParams::init(&cfg, cfg.seed).expect("init");
    let scene = generate_scene(&cfg.scene_spec(), 0).expect("scene");
    let proposals =
        sample_proposals(&scene, cfg.n_per_gt, cfg.n_bg, cfg.jitter, 7).expect("proposals");
    (cfg, params, scene, proposals)
}
