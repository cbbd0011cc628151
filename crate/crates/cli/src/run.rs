use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use semap_core::dataset::{DiskFrameSource, FrameSource};
use semap_core::pipeline::{run_pipeline, evaluate_log, PipelineConfig};
use semap_core::pose_fusion::{MeasurementProvider, SubprocessProvider, SyntheticOracle};
use serde::{Deserialize, Serialize};

#[derive(Args)]
pub struct RunArgs {
    /// Run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
}

/// On-disk run configuration. Unknown keys are rejected.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFileConfig {
    pub scene_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Spawn an external measurement provider instead of the synthetic
    /// oracle: command plus arguments.
    #[serde(default)]
    pub provider_command: Option<Vec<String>>,
}

pub fn main(args: RunArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config)?;
    let text = std::fs::read_to_string(&args.config)?;

    // Validate all inputs before creating any output.
    let source = DiskFrameSource::open(&config.scene_dir)
        .with_context(|| format!("opening scene {}", config.scene_dir.display()))?;

    let mut provider: Box<dyn MeasurementProvider> = match &config.provider_command {
        Some(cmd) if !cmd.is_empty() => Box::new(
            SubprocessProvider::spawn(&cmd[0], &cmd[1..])
                .with_context(|| format!("spawning provider {:?}", cmd))?,
        ),
        _ => Box::new(SyntheticOracle::new(
            source.gt_object_poses_world(),
            source.gt_trajectory().to_vec(),
            config.pipeline.oracle.clone(),
            config.pipeline.seed,
        )),
    };

    let started = std::time::Instant::now();
    let output = run_pipeline(&source, provider.as_mut(), &config.pipeline)
        .map_err(|e| anyhow::anyhow!("pipeline: {e}"))?;
    let elapsed = started.elapsed();

    let report = evaluate_log(
        output.report_log(config.pipeline.ablate_single_view),
        &source,
        Some(&output.map),
        config.pipeline.auc_cap_m,
        false,
    )
    .map_err(|e| anyhow::anyhow!("evaluation: {e}"))?;

    let out = &config.out_dir;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    output
        .map
        .save(&out.join("map.ply"), &out.join("map_instances.json"))
        .map_err(|e| anyhow::anyhow!("saving map: {e}"))?;

    let log = output.report_log(config.pipeline.ablate_single_view);
    let mut tracks_text = String::new();
    for line in log {
        tracks_text.push_str(&serde_json::to_string(line)?);
        tracks_text.push('\n');
    }
    std::fs::write(out.join("tracks.jsonl"), tracks_text)?;

    std::fs::write(out.join("report.csv"), report.to_csv())?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report_json(&report, config.pipeline.ablate_single_view))?,
    )?;
    // Timestamp and runtime live only here; the reports stay byte-stable.
    std::fs::write(
        out.join("run_meta.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "generated_at_unix_ms": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            "runtime_s": elapsed.as_secs_f64(),
            "skipped_frames": output.skipped_frames,
            "keyframes": output.keyframes.len(),
            "surfels": output.map.surfels().len(),
            "config": serde_json::from_str::<serde_json::Value>(&text)?,
        }))?,
    )?;

    eprintln!(
        "{}",
        serde_json::json!({
            "event": "run_done",
            "frames": source.n_frames(),
            "skipped": output.skipped_frames.len(),
            "surfels": output.map.surfels().len(),
            "runtime_s": elapsed.as_secs_f64(),
        })
    );
    Ok(())
}

fn report_json(report: &semap_core::metrics::EvalReport, single_view: bool) -> serde_json::Value {
    serde_json::json!({
        "variant": if single_view { "single_view" } else { "fused" },
        "report": report,
    })
}

/// Shared by `run` and tests: load a config, tolerating a missing file with
/// a clear error.
pub fn load_config(path: &Path) -> anyhow::Result<RunFileConfig> {
    if !path.exists() {
        bail!("config file {} does not exist", path.display());
    }
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
