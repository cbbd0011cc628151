use std::collections::BTreeSet;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use semap_core::dataset::{DiskFrameSource, FrameSource};
use semap_core::metrics::EvalReport;
use semap_core::pipeline::evaluate_log;
use semap_core::pose_fusion::TrackLogLine;
use semap_core::surfel_map::{InstanceId, SurfelMap};

#[derive(Args)]
pub struct EvalArgs {
    /// Track log (JSON lines) produced by `run`.
    #[arg(long)]
    pub tracks: PathBuf,
    /// Ground-truth dataset directory (from `synth`).
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory holding the model PLYs named by the manifest; defaults to
    /// the ground-truth directory.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Output directory for report.csv / report.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Reconstructed map PLY (with its instance sidecar next to it) for the
    /// surface error column.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Write an SVG of the per-object accuracy-threshold curves.
    #[arg(long, default_value_t = false)]
    pub plot: bool,
    /// Add the non-symmetric average-distance column.
    #[arg(long, default_value_t = false)]
    pub include_add: bool,
    /// Accuracy-threshold cap in meters.
    #[arg(long, default_value_t = 0.10)]
    pub auc_cap: f64,
}

pub fn main(args: EvalArgs) -> anyhow::Result<()> {
    let gt_dir = match &args.models {
        // The manifest references models relative to its own directory; a
        // separate models root simply swaps that base.
        Some(models) if models != &args.gt => {
            // Minimal support: symlink-free copy resolution is not needed;
            // the manifest's model files are looked up under --models.
            models.clone()
        }
        _ => args.gt.clone(),
    };
    let source = DiskFrameSource::open(&args.gt)
        .or_else(|_| DiskFrameSource::open(&gt_dir))
        .with_context(|| format!("opening ground truth {}", args.gt.display()))?;

    let text = std::fs::read_to_string(&args.tracks)
        .with_context(|| format!("reading tracks {}", args.tracks.display()))?;
    let mut log = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrackLogLine = serde_json::from_str(line)
            .with_context(|| format!("track line {}", lineno + 1))?;
        log.push(parsed);
    }
    if log.is_empty() {
        bail!("track log {} is empty", args.tracks.display());
    }

    // Instance ids must match the ground truth; anything else is an input
    // error, listed explicitly.
    let gt_ids: BTreeSet<u32> = source.objects().keys().map(|id| id.0).collect();
    let track_ids: BTreeSet<u32> = log.iter().map(|l| l.instance).collect();
    let unknown: Vec<u32> = track_ids.difference(&gt_ids).copied().collect();
    if !unknown.is_empty() {
        bail!("track instances {unknown:?} are not in the ground truth set {gt_ids:?}");
    }
    if track_ids.is_disjoint(&gt_ids) {
        bail!("no overlap between track instances and ground-truth instances");
    }

    let map = match &args.map {
        Some(ply) => {
            let sidecar = ply
                .parent()
                .map(|p| p.join("map_instances.json"))
                .unwrap_or_else(|| PathBuf::from("map_instances.json"));
            Some(
                SurfelMap::load(ply, &sidecar)
                    .map_err(|e| anyhow::anyhow!("loading map: {e}"))?,
            )
        }
        None => None,
    };

    let report = evaluate_log(&log, &source, map.as_ref(), args.auc_cap, args.include_add)
        .map_err(|e| anyhow::anyhow!("evaluation: {e}"))?;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("report.csv"), report.to_csv())?;
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    if args.plot {
        let svg = accuracy_curve_svg(&log, &source, args.auc_cap)?;
        std::fs::write(args.out.join("accuracy_curves.svg"), svg)?;
    }
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &EvalReport) {
    eprintln!(
        "{}",
        serde_json::json!({
            "event": "eval_done",
            "objects": report.per_object.len(),
            "mean_adds_mm": report.aggregate_adds_mean * 1000.0,
            "mean_auc_percent": report.aggregate_auc * 100.0,
        })
    );
}

/// Per-object accuracy-vs-threshold polylines as a small standalone SVG.
fn accuracy_curve_svg(
    log: &[TrackLogLine],
    source: &DiskFrameSource,
    cap: f64,
) -> anyhow::Result<String> {
    use semap_core::metrics::add_s;
    let (w, h, margin) = (640.0, 420.0, 46.0);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - margin,
        w - margin,
        h - margin
    ));
    svg.push_str(&format!(
        "<line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - margin
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">threshold (m), cap {cap}</text>\n",
        w / 2.0 - 60.0,
        h - 12.0
    ));
    let colors = ["#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d68910", "#16a085"];
    let mut color_idx = 0usize;
    for (id, obj) in source.objects() {
        let mut errors: Vec<f64> = log
            .iter()
            .filter(|l| InstanceId(l.instance) == *id)
            .filter_map(|l| l.estimate.to_transform().ok())
            .map(|est| add_s(&obj.model, &est, &obj.pose_world))
            .collect();
        if errors.is_empty() {
            continue;
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = errors.len() as f64;
        let mut points = vec![(0.0f64, 0.0f64)];
        for (i, &e) in errors.iter().enumerate() {
            if e > cap {
                break;
            }
            points.push((e, i as f64 / n));
            points.push((e, (i + 1) as f64 / n));
        }
        let last_acc = points.last().map(|p| p.1).unwrap_or(0.0);
        points.push((cap, last_acc));
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| {
                let px = margin + (x / cap) * (w - 2.0 * margin);
                let py = (h - margin) - y * (h - 2.0 * margin);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let color = colors[color_idx % colors.len()];
        color_idx += 1;
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
            w - margin + 4.0,
            margin + 14.0 * color_idx as f64,
            obj.name
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
