use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use semap_core::dataset::write_dataset;
use semap_core::scene_sim::{RenderNoise, SceneSpec};

#[derive(Args)]
pub struct SynthArgs {
    /// Scene description JSON; omit to use the built-in default scene.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed for sensor noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-pixel Gaussian depth noise, meters.
    #[arg(long, default_value_t = 0.0)]
    pub depth_sigma: f64,
    /// Probability of zeroing a depth pixel.
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
}

pub fn main(args: SynthArgs) -> anyhow::Result<()> {
    let spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading scene spec {}", path.display()))?;
            serde_json::from_str::<SceneSpec>(&text)
                .with_context(|| format!("parsing scene spec {}", path.display()))?
        }
        None => SceneSpec::default_scene(),
    };
    // Validate before touching the output directory.
    let scene = spec.build().context("building scene")?;
    let noise = RenderNoise {
        depth_sigma_m: args.depth_sigma,
        dropout_prob: args.dropout,
    };
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_dataset(&scene, &noise, args.seed, &args.out).context("writing dataset")?;
    // Keep the effective spec next to the data for provenance.
    std::fs::write(
        args.out.join("scene.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    eprintln!(
        "{}",
        serde_json::json!({
            "event": "synth_done",
            "frames": scene.n_frames(),
            "objects": scene.objects.len(),
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}
