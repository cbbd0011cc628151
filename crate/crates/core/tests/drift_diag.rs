use semap_core::dataset::{FrameSource, SceneFrameSource};
use semap_core::pipeline::{evaluate_log, run_pipeline, PipelineConfig};
use semap_core::pose_fusion::SyntheticOracle;
use semap_core::scene_sim::{RenderNoise, SceneSpec};

#[test]
fn drift_diag_full_pipeline() {
    let mut scene = SceneSpec::default_scene().build().unwrap();
    scene.trajectory.truncate(40);
    let src = SceneFrameSource::new(scene, RenderNoise::default(), 7);
    let config = PipelineConfig { seed: 7, ..Default::default() };
    let mut oracle = SyntheticOracle::new(
        src.gt_object_poses_world(),
        src.gt_trajectory().to_vec(),
        config.oracle.clone(),
        7,
    );
    let t0 = std::time::Instant::now();
    let out = run_pipeline(&src, &mut oracle, &config).unwrap();
    eprintln!("runtime: {:.1}s for 40 frames", t0.elapsed().as_secs_f64());
    let errs: Vec<f64> = out
        .camera_trajectory_est
        .iter()
        .zip(src.gt_trajectory())
        .map(|(est, gt)| est.minus(gt).dt.norm())
        .collect();
    eprintln!("camera err: max {:.2e} last {:.2e}", errs.iter().cloned().fold(0.0, f64::max), errs.last().unwrap());
    let report = evaluate_log(&out.fused_log, &src, Some(&out.map), 0.10, false).unwrap();
    for row in &report.per_object {
        eprintln!("{}: adds {:.2e} auc {:.3} mu_d {:.2e}", row.name, row.adds_mean, row.auc, row.recon_mu_d.unwrap_or(-1.0));
    }
    panic!("diag");
}
