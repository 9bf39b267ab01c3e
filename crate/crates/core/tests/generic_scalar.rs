//! The whole pipeline is generic over the scalar type; exercise it end to
//! end with `f32` at tolerances matched to single precision.

use fg3dmot::metrics::{evaluate, MatchMode};
use fg3dmot::simulate::{generate, ScenarioConfig};
use fg3dmot::solver::SolverOptions;
use fg3dmot::tracker::run_offline;
use fg3dmot::types::default_params;

#[test]
fn f32_pipeline_tracks_a_small_scene() {
    let mut cfg = ScenarioConfig::<f32>::s1(5);
    cfg.n_objects = 3;
    cfg.n_frames = 40;
    let (gt, frames) = generate(&cfg).unwrap();

    let params = default_params::<f32>();
    let opts = SolverOptions::<f32> {
        gradient_tol: 1e-3,
        step_tol: 1e-5,
        cost_tol: 1e-5,
        ..SolverOptions::default()
    };
    let (set, _) = run_offline(&frames, &params, &opts).unwrap();
    assert!(set.tracks.len() >= 3, "found {} tracks", set.tracks.len());

    let report = evaluate(&gt, &set, MatchMode::Center3D(1.0f32)).unwrap();
    assert!(report.mota > 0.9, "f32 MOTA {}", report.mota);
    assert!(report.motp < 0.3, "f32 MOTP {}", report.motp);
}
