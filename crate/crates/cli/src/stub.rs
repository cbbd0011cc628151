use std::io::{BufRead, Write};

use clap::Args;
use semap_core::pose::PoseJson;

#[derive(Args)]
pub struct StubArgs {
    /// Pose to answer every request with, as JSON
    /// (`{"t":[x,y,z],"euler_xyz":[rx,ry,rz]}`). Defaults to identity.
    #[arg(long)]
    pub pose: Option<String>,
    /// Decline every request instead of answering.
    #[arg(long, default_value_t = false)]
    pub decline: bool,
}

/// Reference implementation of the provider wire protocol: one JSON request
/// per line on stdin, one JSON response per line on stdout.
pub fn main(args: StubArgs) -> anyhow::Result<()> {
    let pose: PoseJson = match &args.pose {
        Some(text) => serde_json::from_str(text)?,
        None => PoseJson::Euler {
            t: [0.0; 3],
            euler_xyz: [0.0; 3],
        },
    };
    // Validate eagerly so a bad --pose fails before the first request.
    pose.to_transform().map_err(|e| anyhow::anyhow!("{e}"))?;

    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // Any well-formed JSON object is accepted as a request.
        let _request: serde_json::Value = serde_json::from_str(&line)?;
        let response = if args.decline {
            serde_json::json!({ "no_measurement": true })
        } else {
            serde_json::json!({ "pose": pose })
        };
        writeln!(out, "{response}")?;
        out.flush()?;
    }
    Ok(())
}
