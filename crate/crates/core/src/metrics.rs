//! Pose-estimation and reconstruction evaluation: ADD-S, its area under the
//! accuracy-threshold curve, and the surface reconstruction error mu_d.
//!
//! All distances are meters internally; report writers convert to
//! millimeters (and AUC to percent) for the table formats.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::RigidTransform;
use crate::spatial::NearestNeighborGrid;

/// Default accuracy-threshold cap for AUC: 10 cm.
pub const AUC_CAP_M: f64 = 0.10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("model {0:?} has {1} points, need at least 4")]
    TooFewPoints(String, usize),
    #[error("degenerate model {0:?}: zero diameter")]
    ZeroDiameter(String),
    #[error("normals length {0} does not match point count {1}")]
    NormalsMismatch(usize, usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("negative or non-finite error value {0}")]
    BadErrorValue(f64),
    #[error("threshold cap must be positive, got {0}")]
    BadCap(f64),
}

/// A surface-sampled object model in its own coordinate frame.
#[derive(Debug, Clone)]
pub struct ObjectModel {
    pub name: String,
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub diameter: f64,
}

impl ObjectModel {
    pub fn new(
        name: impl Into<String>,
        points: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
    ) -> Result<Self, MetricsError> {
        let diameter = max_pairwise_distance(&points);
        Self::with_diameter(name, points, normals, diameter)
    }

    /// Constructor for callers that know the surface diameter analytically
    /// (primitive generators), skipping the quadratic scan.
    pub fn with_diameter(
        name: impl Into<String>,
        points: Vec<Vector3<f64>>,
        normals: Vec<Vector3<f64>>,
        diameter: f64,
    ) -> Result<Self, MetricsError> {
        let name = name.into();
        if points.len() < 4 {
            return Err(MetricsError::TooFewPoints(name, points.len()));
        }
        if normals.len() != points.len() {
            return Err(MetricsError::NormalsMismatch(normals.len(), points.len()));
        }
        if diameter <= 0.0 {
            return Err(MetricsError::ZeroDiameter(name));
        }
        Ok(Self {
            name,
            points,
            normals,
            diameter,
        })
    }
}

fn max_pairwise_distance(points: &[Vector3<f64>]) -> f64 {
    let mut max_d2 = 0.0f64;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            max_d2 = max_d2.max((points[i] - points[j]).norm_squared());
        }
    }
    max_d2.sqrt()
}

/// Average closest-point distance: mean over model points `p` of
/// `min_q |est(p) - gt(q)|`. Symmetry-tolerant by construction.
pub fn add_s(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let targets: Vec<_> = model.points.iter().map(|p| gt.apply(p)).collect();
    let grid = NearestNeighborGrid::build(targets);
    let mut sum = 0.0;
    for p in &model.points {
        sum += grid.nearest(&est.apply(p)).1;
    }
    sum / model.points.len() as f64
}

/// Non-symmetric average distance: mean over points of
/// `|est(p) - gt(p)|`. Provided alongside ADD-S for completeness.
pub fn add(model: &ObjectModel, est: &RigidTransform, gt: &RigidTransform) -> f64 {
    let mut sum = 0.0;
    for p in &model.points {
        sum += (est.apply(p) - gt.apply(p)).norm();
    }
    sum / model.points.len() as f64
}

/// Area under the accuracy-vs-threshold curve for thresholds in
/// `[0, max_threshold]`, normalized to `[0, 1]`. Computed in closed form
/// from the error list: `mean(max(0, 1 - e / cap))`.
pub fn auc_adds(errors: &[f64], max_threshold: f64) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput("error list"));
    }
    if max_threshold <= 0.0 || max_threshold.is_nan() {
        return Err(MetricsError::BadCap(max_threshold));
    }
    let mut sum = 0.0;
    for &e in errors {
        if !e.is_finite() || e < 0.0 {
            return Err(MetricsError::BadErrorValue(e));
        }
        sum += (1.0 - e / max_threshold).max(0.0);
    }
    Ok(sum / errors.len() as f64)
}

/// Mean distance mu_d from every reconstructed vertex to the nearest ground
/// truth vertex after applying `align` to the ground truth model.
pub fn reconstruction_error(
    reconstructed: &[Vector3<f64>],
    gt: &ObjectModel,
    align: &RigidTransform,
) -> Result<f64, MetricsError> {
    if reconstructed.is_empty() {
        return Err(MetricsError::EmptyInput("reconstructed vertices"));
    }
    let targets: Vec<_> = gt.points.iter().map(|p| align.apply(p)).collect();
    let grid = NearestNeighborGrid::build(targets);
    let mut sum = 0.0;
    for v in reconstructed {
        sum += grid.nearest(v).1;
    }
    Ok(sum / reconstructed.len() as f64)
}

/// Per-object evaluation row. Distances in meters, AUC in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectEval {
    pub name: String,
    pub adds_mean: f64,
    pub auc: f64,
    /// `None` when no reconstruction was available to evaluate.
    pub recon_mu_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub add_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_object: Vec<ObjectEval>,
    pub aggregate_adds_mean: f64,
    pub aggregate_auc: f64,
    pub aggregate_recon_mu_d: Option<f64>,
}

impl EvalReport {
    pub fn from_rows(mut per_object: Vec<ObjectEval>) -> Result<Self, MetricsError> {
        if per_object.is_empty() {
            return Err(MetricsError::EmptyInput("per-object rows"));
        }
        per_object.sort_by(|a, b| a.name.cmp(&b.name));
        let n = per_object.len() as f64;
        let aggregate_adds_mean = per_object.iter().map(|o| o.adds_mean).sum::<f64>() / n;
        let aggregate_auc = per_object.iter().map(|o| o.auc).sum::<f64>() / n;
        let recon: Vec<f64> = per_object.iter().filter_map(|o| o.recon_mu_d).collect();
        let aggregate_recon_mu_d = if recon.is_empty() {
            None
        } else {
            Some(recon.iter().sum::<f64>() / recon.len() as f64)
        };
        Ok(Self {
            per_object,
            aggregate_adds_mean,
            aggregate_auc,
            aggregate_recon_mu_d,
        })
    }

    /// CSV table: millimeters and percent, mirroring the report layout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("object,adds_mean_mm,auc_percent,recon_mu_d_mm\n");
        let fmt_mu = |v: Option<f64>| v.map(|x| format!("{:.3}", x * 1000.0)).unwrap_or_default();
        for row in &self.per_object {
            out.push_str(&format!(
                "{},{:.3},{:.2},{}\n",
                row.name,
                row.adds_mean * 1000.0,
                row.auc * 100.0,
                fmt_mu(row.recon_mu_d),
            ));
        }
        out.push_str(&format!(
            "MEAN,{:.3},{:.2},{}\n",
            self.aggregate_adds_mean * 1000.0,
            self.aggregate_auc * 100.0,
            fmt_mu(self.aggregate_recon_mu_d),
        ));
        out
    }
}
