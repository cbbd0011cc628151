//! Per-object extended Kalman filtering of 6D pose measurements in the
//! global frame, plus the measurement providers that stand in for a learned
//! single-view pose network.
//!
//! The filter state is a pose with a 6x6 covariance over the tangent
//! parameterization (translation + rotation vector). The scene is static, so
//! prediction is the identity with zero process noise; the measurement
//! Jacobian is the identity in the tangent space, giving the gain
//! `K = P (R + P)^-1` with `R = mu * I` scaled by the measured point
//! residual.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use nalgebra::{Matrix6, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Grid;
use crate::metrics::ObjectModel;
use crate::pose::{PoseJson, RigidTransform, TangentVector6};
use crate::scene_sim::derive_seed;
use crate::spatial::NearestNeighborGrid;
use crate::surfel_map::{InstanceId, RenderedView};

#[derive(Debug, Error)]
pub enum PoseFusionError {
    #[error("negative measurement noise scale {0}")]
    NegativeMu(f64),
    #[error("non-finite measurement")]
    NonFiniteMeasurement,
    #[error("empty point set for {0}")]
    EmptyPoints(&'static str),
    #[error("provider i/o: {0}")]
    Provider(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfParams {
    /// Noise floor for `mu`, preventing a singular update when the
    /// measurement is exact.
    pub mu_min_m: f64,
    /// Initial translation std (meters) for the seeded covariance.
    pub sigma_t0_m: f64,
    /// Initial rotation std (radians).
    pub sigma_r0_rad: f64,
    /// Scale rotation noise by the model diameter instead of using `mu`
    /// on all six axes. Off by default.
    pub anisotropic_rotation_noise: bool,
}

impl Default for EkfParams {
    fn default() -> Self {
        Self {
            mu_min_m: 1e-4,
            sigma_t0_m: 0.05,
            sigma_r0_rad: 0.1,
            anisotropic_rotation_noise: false,
        }
    }
}

/// A single-view pose measurement already transferred to the global frame.
#[derive(Debug, Clone)]
pub struct PoseMeasurement {
    /// Object-to-global pose.
    pub pose: RigidTransform,
    /// Mean distance of segmented object points to the posed model, meters.
    pub mu: f64,
    pub frame_index: u64,
}

/// Measurement noise covariance `mu * I6`, floored at `mu_min`. With the
/// anisotropic option the rotation block becomes `mu / diameter`.
pub fn measurement_noise(
    residual_mu: f64,
    params: &EkfParams,
    model_diameter: Option<f64>,
) -> Result<Matrix6<f64>, PoseFusionError> {
    if residual_mu < 0.0 || !residual_mu.is_finite() {
        return Err(PoseFusionError::NegativeMu(residual_mu));
    }
    let mu = residual_mu.max(params.mu_min_m);
    let mut r = Matrix6::identity() * mu;
    if params.anisotropic_rotation_noise {
        if let Some(d) = model_diameter {
            if d > 0.0 {
                for i in 3..6 {
                    r[(i, i)] = mu / d;
                }
            }
        }
    }
    Ok(r)
}

/// Mean distance from each segmented object point to the nearest model
/// point transformed by `pose`.
pub fn compute_mu(
    object_points: &[Vector3<f64>],
    model_points: &[Vector3<f64>],
    pose: &RigidTransform,
) -> Result<f64, PoseFusionError> {
    if object_points.is_empty() {
        return Err(PoseFusionError::EmptyPoints("object points"));
    }
    if model_points.is_empty() {
        return Err(PoseFusionError::EmptyPoints("model points"));
    }
    let transformed: Vec<_> = model_points.iter().map(|p| pose.apply(p)).collect();
    let grid = NearestNeighborGrid::build(transformed);
    let sum: f64 = object_points.iter().map(|p| grid.nearest(p).1).sum();
    Ok(sum / object_points.len() as f64)
}

/// Per-object filter track.
#[derive(Debug, Clone)]
pub struct EkfTrack {
    /// Object-to-global estimate.
    pub estimate: RigidTransform,
    pub covariance: Matrix6<f64>,
    pub instance: InstanceId,
    pub updates: u64,
}

impl EkfTrack {
    /// Seed a track from the first measurement: the estimate is adopted
    /// directly and the covariance is the configured prior.
    pub fn from_first_measurement(
        instance: InstanceId,
        m: &PoseMeasurement,
        params: &EkfParams,
    ) -> Result<Self, PoseFusionError> {
        if !m.pose.is_finite() || !m.mu.is_finite() {
            return Err(PoseFusionError::NonFiniteMeasurement);
        }
        let mut p = Matrix6::zeros();
        for i in 0..3 {
            p[(i, i)] = params.sigma_t0_m * params.sigma_t0_m;
            p[(i + 3, i + 3)] = params.sigma_r0_rad * params.sigma_r0_rad;
        }
        Ok(Self {
            estimate: m.pose,
            covariance: p,
            instance,
            updates: 1,
        })
    }

    /// Static-scene prediction: identity process model, zero process noise.
    pub fn predict(&self) -> EkfTrack {
        self.clone()
    }

    /// Measurement update. The innovation is the tangent-space error of the
    /// measurement against the prediction; the corrected estimate applies
    /// the gain-scaled innovation through the pose composition operator, and
    /// the covariance contracts by `(I - K) P` (then symmetrized).
    pub fn update(
        &self,
        m: &PoseMeasurement,
        params: &EkfParams,
        model_diameter: Option<f64>,
    ) -> Result<EkfTrack, PoseFusionError> {
        if !m.pose.is_finite() || !m.mu.is_finite() {
            return Err(PoseFusionError::NonFiniteMeasurement);
        }
        let r = measurement_noise(m.mu, params, model_diameter)?;
        let p = self.covariance;
        let innovation = m.pose.minus(&self.estimate).to_vector6();
        let gain = p * (r + p).try_inverse().ok_or(PoseFusionError::NegativeMu(m.mu))?;
        let correction = gain * innovation;
        let estimate = self
            .estimate
            .plus(&TangentVector6::from_vector6(&correction));
        let cov = (Matrix6::identity() - gain) * p;
        let cov = (cov + cov.transpose()) / 2.0;
        Ok(EkfTrack {
            estimate,
            covariance: cov,
            instance: self.instance,
            updates: self.updates + 1,
        })
    }

    pub fn trace_covariance(&self) -> f64 {
        self.covariance.trace()
    }
}

/// One line of the JSONL track dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackLogLine {
    pub frame: u64,
    pub instance: u32,
    pub estimate: PoseJson,
    pub trace_p: f64,
    pub mu: f64,
}

// --- Measurement providers ---------------------------------------------------

/// What a single-view provider sees: crops of the predicted (or raw) depth
/// and color inside the instance mask's bounding box, the mask itself, the
/// camera pose the crops were taken from, and the instance class.
pub struct MeasurementRequest<'a> {
    pub frame_index: u64,
    pub instance: InstanceId,
    pub class_label: &'a str,
    pub camera_pose: RigidTransform,
    pub bbox: (usize, usize, usize, usize),
    pub depth_crop: Grid<f64>,
    pub color_crop: Grid<[f64; 3]>,
    pub mask_crop: Grid<bool>,
}

/// A provider's answer: the object pose in the camera frame of the request.
#[derive(Debug, Clone)]
pub struct ProviderPose {
    pub pose_camera: RigidTransform,
}

/// The single-view pose backend. Implementations may be exact oracles,
/// noisy oracles, or external processes speaking the line-JSON protocol.
pub trait MeasurementProvider {
    fn measure(&mut self, request: &MeasurementRequest<'_>) -> Option<ProviderPose>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleNoise {
    pub sigma_t_m: f64,
    pub sigma_r_rad: f64,
    /// Outlier probability; outliers are uniform in a gross-error ball.
    pub p_out: f64,
    pub gross_t_m: f64,
    pub gross_r_rad: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            sigma_t_m: 0.0,
            sigma_r_rad: 0.0,
            p_out: 0.0,
            gross_t_m: 0.5,
            gross_r_rad: std::f64::consts::FRAC_PI_2,
        }
    }
}

/// Ground-truth-backed provider: returns the true object pose in the true
/// camera frame, perturbed by configurable Gaussian noise plus occasional
/// gross outliers. Deterministic per (seed, frame, instance); the draw does
/// not depend on call order.
pub struct SyntheticOracle {
    gt_object_poses_world: BTreeMap<InstanceId, RigidTransform>,
    gt_camera_poses: Vec<RigidTransform>,
    noise: OracleNoise,
    seed: u64,
}

impl SyntheticOracle {
    pub fn new(
        gt_object_poses_world: BTreeMap<InstanceId, RigidTransform>,
        gt_camera_poses: Vec<RigidTransform>,
        noise: OracleNoise,
        seed: u64,
    ) -> Self {
        Self {
            gt_object_poses_world,
            gt_camera_poses,
            noise,
            seed,
        }
    }

    fn perturbation(&self, frame: u64, instance: InstanceId) -> TangentVector6 {
        let stream = derive_seed(self.seed ^ ((instance.0 as u64) << 32), "oracle", frame);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        let outlier = self.noise.p_out > 0.0 && rng.random::<f64>() < self.noise.p_out;
        if outlier {
            let dir = random_unit(&mut rng);
            let radius = self.noise.gross_t_m * rng.random::<f64>().cbrt();
            let axis = random_unit(&mut rng);
            let angle = self.noise.gross_r_rad * rng.random::<f64>();
            TangentVector6::new(dir * radius, axis * angle)
        } else {
            let gauss_t = Normal::new(0.0, self.noise.sigma_t_m.max(1e-300)).expect("sigma");
            let gauss_r = Normal::new(0.0, self.noise.sigma_r_rad.max(1e-300)).expect("sigma");
            let dt = if self.noise.sigma_t_m > 0.0 {
                Vector3::new(
                    gauss_t.sample(&mut rng),
                    gauss_t.sample(&mut rng),
                    gauss_t.sample(&mut rng),
                )
            } else {
                Vector3::zeros()
            };
            let dr = if self.noise.sigma_r_rad > 0.0 {
                Vector3::new(
                    gauss_r.sample(&mut rng),
                    gauss_r.sample(&mut rng),
                    gauss_r.sample(&mut rng),
                )
            } else {
                Vector3::zeros()
            };
            TangentVector6::new(dt, dr)
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vector3::new(
            gauss.sample(rng),
            gauss.sample(rng),
            gauss.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

impl MeasurementProvider for SyntheticOracle {
    fn measure(&mut self, request: &MeasurementRequest<'_>) -> Option<ProviderPose> {
        let object_world = self.gt_object_poses_world.get(&request.instance)?;
        let cam_true = self.gt_camera_poses.get(request.frame_index as usize)?;
        let t_co = cam_true.inverse().compose(object_world);
        let pose_camera = t_co.plus(&self.perturbation(request.frame_index, request.instance));
        Some(ProviderPose { pose_camera })
    }
}

// --- Subprocess provider (line-JSON protocol) --------------------------------

#[derive(Serialize)]
struct WireRequest<'a> {
    frame: u64,
    instance: u32,
    class: &'a str,
    camera_pose: PoseJson,
    bbox: [usize; 4],
    width: usize,
    height: usize,
    depth: Vec<f64>,
    color: Vec<[f64; 3]>,
    mask: Vec<u8>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireResponse {
    #[serde(default)]
    pose: Option<PoseJson>,
    #[serde(default)]
    no_measurement: bool,
}

/// Spawns an external single-view pose backend and exchanges one JSON
/// object per line: a request per measurement, a response with either a
/// camera-frame `pose` or `no_measurement`.
pub struct SubprocessProvider {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessProvider {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, PoseFusionError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| PoseFusionError::Provider(format!("spawn {program}: {e}")))?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| PoseFusionError::Provider("no stdin".into()))?;
        let stdout = BufReader::new(
            child
                .stdout
                .take()
                .ok_or_else(|| PoseFusionError::Provider("no stdout".into()))?,
        );
        Ok(Self {
            child,
            stdin,
            stdout,
        })
    }
}

impl Drop for SubprocessProvider {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl MeasurementProvider for SubprocessProvider {
    fn measure(&mut self, request: &MeasurementRequest<'_>) -> Option<ProviderPose> {
        let wire = WireRequest {
            frame: request.frame_index,
            instance: request.instance.0,
            class: request.class_label,
            camera_pose: PoseJson::from_transform(&request.camera_pose),
            bbox: [
                request.bbox.0,
                request.bbox.1,
                request.bbox.2,
                request.bbox.3,
            ],
            width: request.depth_crop.width(),
            height: request.depth_crop.height(),
            depth: request.depth_crop.data().to_vec(),
            color: request.color_crop.data().to_vec(),
            mask: request
                .mask_crop
                .data()
                .iter()
                .map(|&b| b as u8)
                .collect(),
        };
        let line = serde_json::to_string(&wire).ok()?;
        writeln!(self.stdin, "{line}").ok()?;
        self.stdin.flush().ok()?;
        let mut response = String::new();
        self.stdout.read_line(&mut response).ok()?;
        let parsed: WireResponse = serde_json::from_str(response.trim()).ok()?;
        if parsed.no_measurement {
            return None;
        }
        let pose = parsed.pose?.to_transform().ok()?;
        Some(ProviderPose { pose_camera: pose })
    }
}

// --- Single-view measurement over a rendered view ----------------------------

#[derive(Debug)]
pub enum MeasurementOutcome {
    Measured(PoseMeasurement),
    /// Instance not (sufficiently) visible; the filter runs predict only.
    NotVisible { pixels: usize },
    /// The provider declined.
    ProviderDeclined,
}

pub const MIN_VISIBLE_PIXELS: usize = 50;

/// Crop the per-instance region from a view and ask the provider for a
/// camera-frame pose; the result is transferred to the global frame through
/// the view's camera pose, and `mu` is computed from the masked view points
/// against the posed model.
pub fn single_view_measure(
    view: &RenderedView,
    frame_index: u64,
    instance: InstanceId,
    class_label: &str,
    model: &ObjectModel,
    provider: &mut dyn MeasurementProvider,
    min_pixels: usize,
) -> Result<MeasurementOutcome, PoseFusionError> {
    let mask = view.instance_mask(instance);
    let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut pixels = 0usize;
    for (x, y, &m) in mask.iter_pixels() {
        if m {
            pixels += 1;
            bbox.0 = bbox.0.min(x);
            bbox.1 = bbox.1.min(y);
            bbox.2 = bbox.2.max(x + 1);
            bbox.3 = bbox.3.max(y + 1);
        }
    }
    if pixels < min_pixels {
        return Ok(MeasurementOutcome::NotVisible { pixels });
    }
    let (x0, y0, x1, y1) = bbox;
    let (cw, ch) = (x1 - x0, y1 - y0);
    let mut depth_crop = Grid::new(cw, ch, 0.0);
    let mut color_crop = Grid::new(cw, ch, [0.0; 3]);
    let mut mask_crop = Grid::new(cw, ch, false);
    for y in 0..ch {
        for x in 0..cw {
            depth_crop.set(x, y, *view.depth.get(x0 + x, y0 + y));
            color_crop.set(x, y, *view.color.get(x0 + x, y0 + y));
            mask_crop.set(x, y, *mask.get(x0 + x, y0 + y));
        }
    }
    let request = MeasurementRequest {
        frame_index,
        instance,
        class_label,
        camera_pose: view.camera_pose,
        bbox,
        depth_crop,
        color_crop,
        mask_crop,
    };
    let Some(answer) = provider.measure(&request) else {
        return Ok(MeasurementOutcome::ProviderDeclined);
    };
    if !answer.pose_camera.is_finite() {
        return Err(PoseFusionError::NonFiniteMeasurement);
    }

    // Transfer to the global frame through the tracked camera pose.
    let pose_world = view.camera_pose.compose(&answer.pose_camera);

    // Segmented object points in the global frame, from the view's own
    // depth inside the mask.
    let mut object_points = Vec::with_capacity(pixels);
    for (x, y, &m) in mask.iter_pixels() {
        if !m {
            continue;
        }
        let d = *view.depth.get(x, y);
        if d <= 0.0 {
            continue;
        }
        object_points.push(view.camera_pose.apply(&view.intr.backproject(x as f64, y as f64, d)));
    }
    let mu = compute_mu(&object_points, &model.points, &pose_world)?;

    Ok(MeasurementOutcome::Measured(PoseMeasurement {
        pose: pose_world,
        mu,
        frame_index,
    }))
}
