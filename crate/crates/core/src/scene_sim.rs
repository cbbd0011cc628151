//! Synthetic world: surface-sampled primitive models, camera trajectories,
//! and rendering of ground-truth RGB-D frames, instance masks, and poses.
//!
//! The renderer is the same point splatter the surfel map uses, so the
//! synthetic sensor and the map prediction share one code path.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{CameraIntrinsics, Grid, RgbdFrame};
use crate::metrics::{MetricsError, ObjectModel};
use crate::pose::{PoseJson, RigidTransform};
use crate::surfel_map::{splat_render_points, InstanceId, RenderedView, SplatPoint};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("degenerate dimension {0}; all dims and spacing must be positive")]
    DegenerateDims(f64),
    #[error("orbit radius must be positive")]
    ZeroRadiusOrbit,
    #[error("trajectory must contain at least one frame")]
    EmptyTrajectory,
    #[error("duplicate instance id {0}")]
    DuplicateInstance(InstanceId),
    #[error("frame index {0} outside trajectory of length {1}")]
    FrameOutOfRange(u64, usize),
    #[error("camera would look along the up axis; cannot build orientation")]
    DegenerateLookAt,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("bad pose in scene spec: {0}")]
    BadPose(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PrimitiveKind {
    Box { dims: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
    Sphere { radius: f64 },
}

/// Surface-sample a primitive at roughly `sample_spacing` between points,
/// with outward normals. Point count lands within about ten percent of
/// `surface_area / spacing^2`.
pub fn make_primitive(
    kind: PrimitiveKind,
    sample_spacing: f64,
    name: &str,
) -> Result<ObjectModel, SceneError> {
    if sample_spacing <= 0.0 {
        return Err(SceneError::DegenerateDims(sample_spacing));
    }
    let analytic_diameter = match kind {
        PrimitiveKind::Box { dims } => (dims[0] * dims[0] + dims[1] * dims[1] + dims[2] * dims[2]).sqrt(),
        PrimitiveKind::Sphere { radius } => 2.0 * radius,
        PrimitiveKind::Cylinder { radius, height } => (4.0 * radius * radius + height * height).sqrt(),
    };
    let mut points = Vec::new();
    let mut normals = Vec::new();
    match kind {
        PrimitiveKind::Box { dims } => {
            let [dx, dy, dz] = dims;
            for d in [dx, dy, dz] {
                if d <= 0.0 {
                    return Err(SceneError::DegenerateDims(d));
                }
            }
            let h = [dx / 2.0, dy / 2.0, dz / 2.0];
            // Six faces; axis = fixed coordinate, (a, b) = in-face axes.
            for axis in 0..3 {
                let a = (axis + 1) % 3;
                let b = (axis + 2) % 3;
                let na = steps(2.0 * h[a], sample_spacing);
                let nb = steps(2.0 * h[b], sample_spacing);
                for sign in [-1.0, 1.0] {
                    let mut normal = Vector3::zeros();
                    normal[axis] = sign;
                    for i in 0..na {
                        for j in 0..nb {
                            let mut p = Vector3::zeros();
                            p[axis] = sign * h[axis];
                            p[a] = lerp_inclusive(-h[a], h[a], i, na);
                            p[b] = lerp_inclusive(-h[b], h[b], j, nb);
                            points.push(p);
                            normals.push(normal);
                        }
                    }
                }
            }
        }
        PrimitiveKind::Sphere { radius } => {
            if radius <= 0.0 {
                return Err(SceneError::DegenerateDims(radius));
            }
            let n = ((4.0 * std::f64::consts::PI * radius * radius)
                / (sample_spacing * sample_spacing))
                .round()
                .max(4.0) as usize;
            // Fibonacci sphere.
            let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            for i in 0..n {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r_xy = (1.0 - z * z).sqrt();
                let theta = golden * i as f64;
                let dir = Vector3::new(r_xy * theta.cos(), r_xy * theta.sin(), z);
                points.push(dir * radius);
                normals.push(dir);
            }
        }
        PrimitiveKind::Cylinder { radius, height } => {
            if radius <= 0.0 || height <= 0.0 {
                return Err(SceneError::DegenerateDims(radius.min(height)));
            }
            let around = steps(2.0 * std::f64::consts::PI * radius, sample_spacing).max(3);
            let rings = steps(height, sample_spacing);
            for i in 0..rings {
                let z = lerp_inclusive(-height / 2.0, height / 2.0, i, rings);
                for j in 0..around {
                    let theta = 2.0 * std::f64::consts::PI * j as f64 / around as f64;
                    let dir = Vector3::new(theta.cos(), theta.sin(), 0.0);
                    points.push(dir * radius + Vector3::new(0.0, 0.0, z));
                    normals.push(dir);
                }
            }
            // Caps as concentric rings, cell-centered in radius.
            let cap_rings = (radius / sample_spacing).round().max(1.0) as usize;
            for sign in [-1.0, 1.0] {
                let normal = Vector3::new(0.0, 0.0, sign);
                for ring in 0..cap_rings {
                    let r = (ring as f64 + 0.5) * radius / cap_rings as f64;
                    let m = steps(2.0 * std::f64::consts::PI * r, sample_spacing).max(1);
                    for j in 0..m {
                        let theta = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
                        points.push(Vector3::new(
                            r * theta.cos(),
                            r * theta.sin(),
                            sign * height / 2.0,
                        ));
                        normals.push(normal);
                    }
                }
            }
        }
    }
    Ok(ObjectModel::with_diameter(
        name,
        points,
        normals,
        analytic_diameter,
    )?)
}

fn steps(extent: f64, spacing: f64) -> usize {
    ((extent / spacing).round() as usize).max(2)
}

fn lerp_inclusive(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    lo + (hi - lo) * i as f64 / (n - 1) as f64
}

/// Camera orientation looking from `position` toward `target`: x right,
/// y down, z forward, with the world up axis fixing the roll.
pub fn look_at(
    position: Vector3<f64>,
    target: Vector3<f64>,
    up: Vector3<f64>,
) -> Result<RigidTransform, SceneError> {
    let forward = target - position;
    if forward.norm() < 1e-12 {
        return Err(SceneError::DegenerateLookAt);
    }
    let z_c = forward.normalize();
    let x_c = z_c.cross(&up);
    if x_c.norm() < 1e-9 {
        return Err(SceneError::DegenerateLookAt);
    }
    let x_c = x_c.normalize();
    let y_c = z_c.cross(&x_c);
    let rotation = nalgebra::Matrix3::from_columns(&[x_c, y_c, z_c]);
    Ok(RigidTransform::from_parts(rotation, position))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Circle of `radius` in the plane `height` above the target, every
    /// frame looking at the target point.
    Orbit {
        radius: f64,
        height: f64,
        target: [f64; 3],
        n_frames: usize,
    },
    /// Linear interpolation between two poses (translation lerp, rotation
    /// slerp).
    Line {
        start: PoseJson,
        end: PoseJson,
        n_frames: usize,
    },
}

pub fn make_trajectory(spec: &TrajectorySpec) -> Result<Vec<RigidTransform>, SceneError> {
    match spec {
        TrajectorySpec::Orbit {
            radius,
            height,
            target,
            n_frames,
        } => {
            if *n_frames == 0 {
                return Err(SceneError::EmptyTrajectory);
            }
            if *radius <= 0.0 {
                return Err(SceneError::ZeroRadiusOrbit);
            }
            let target = Vector3::new(target[0], target[1], target[2]);
            let mut poses = Vec::with_capacity(*n_frames);
            for k in 0..*n_frames {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / *n_frames as f64;
                let pos = target + Vector3::new(radius * theta.cos(), radius * theta.sin(), *height);
                poses.push(look_at(pos, target, Vector3::z())?);
            }
            Ok(poses)
        }
        TrajectorySpec::Line {
            start,
            end,
            n_frames,
        } => {
            if *n_frames == 0 {
                return Err(SceneError::EmptyTrajectory);
            }
            let a = start.to_transform().map_err(|e| SceneError::BadPose(e.to_string()))?;
            let b = end.to_transform().map_err(|e| SceneError::BadPose(e.to_string()))?;
            let qa = nalgebra::UnitQuaternion::from_rotation_matrix(
                &nalgebra::Rotation3::from_matrix_unchecked(a.rotation),
            );
            let qb = nalgebra::UnitQuaternion::from_rotation_matrix(
                &nalgebra::Rotation3::from_matrix_unchecked(b.rotation),
            );
            let mut poses = Vec::with_capacity(*n_frames);
            for k in 0..*n_frames {
                let t = if *n_frames == 1 {
                    0.0
                } else {
                    k as f64 / (*n_frames - 1) as f64
                };
                let q = qa.try_slerp(&qb, t, 1e-9).unwrap_or(qa);
                poses.push(RigidTransform::from_parts(
                    q.to_rotation_matrix().into_inner(),
                    a.translation * (1.0 - t) + b.translation * t,
                ));
            }
            Ok(poses)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lighting {
    pub lambert: bool,
    pub light_dir: [f64; 3],
    pub ambient: f64,
    /// Amplitude of the smooth procedural albedo modulation in [0, 1).
    /// Flat shading over flat faces leaves the photometric term with only
    /// aliased silhouette edges to grip; the texture gives every surface
    /// pixel a real intensity gradient.
    #[serde(default = "default_texture_amplitude")]
    pub texture_amplitude: f64,
    /// Spatial wavelength of the albedo modulation, meters.
    #[serde(default = "default_texture_wavelength")]
    pub texture_wavelength: f64,
}

fn default_texture_amplitude() -> f64 {
    0.35
}

fn default_texture_wavelength() -> f64 {
    0.11
}

impl Default for Lighting {
    fn default() -> Self {
        Self {
            lambert: true,
            light_dir: [0.3, -0.4, -0.85],
            ambient: 0.35,
            texture_amplitude: default_texture_amplitude(),
            texture_wavelength: default_texture_wavelength(),
        }
    }
}

/// Smooth world-position-keyed albedo factor. Two incommensurate plane
/// waves keep the pattern aperiodic so the photometric term has no false
/// minima at texture-period shifts.
fn albedo(p: &Vector3<f64>, amplitude: f64, wavelength: f64) -> f64 {
    if amplitude <= 0.0 {
        return 1.0;
    }
    let k = 2.0 * std::f64::consts::PI / wavelength;
    let s = 0.5 * (k * (p.x + 1.31 * p.y + 0.23 * p.z)).sin()
        + 0.5 * (k * 0.73 * (p.y + 0.57 * p.z - 0.41 * p.x) + 1.1).sin();
    1.0 - amplitude * 0.5 * (1.0 + 0.5 * s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObjectSpec {
    pub name: String,
    pub class: String,
    pub instance: u32,
    pub primitive: PrimitiveKind,
    pub sample_spacing: f64,
    pub pose: PoseJson,
    pub color: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub name: String,
    pub primitive: PrimitiveKind,
    pub sample_spacing: f64,
    pub pose: PoseJson,
    pub color: [f64; 3],
}

/// On-disk scene description; `build` instantiates the models.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub labels: Vec<String>,
    pub intr: CameraIntrinsics,
    #[serde(default)]
    pub lighting: Lighting,
    pub trajectory: TrajectorySpec,
    pub objects: Vec<SceneObjectSpec>,
    #[serde(default)]
    pub background: Vec<BackgroundSpec>,
}

pub struct SceneObject {
    pub name: String,
    pub class: String,
    pub instance: InstanceId,
    /// Model sampled at the render spacing (drives the splats).
    pub model: ObjectModel,
    pub primitive: PrimitiveKind,
    pub sample_spacing: f64,
    pub pose: RigidTransform,
    pub color: [f64; 3],
    pub splat_radius: f64,
}

impl SceneObject {
    /// The same surface resampled at no coarser than `max_spacing`, for
    /// evaluation against ground truth (nearest-vertex distances carry a
    /// floor proportional to the sampling pitch).
    pub fn eval_model(&self, max_spacing: f64) -> ObjectModel {
        make_primitive(self.primitive, self.sample_spacing.min(max_spacing), &self.name)
            .expect("resampling a valid primitive cannot fail")
    }
}

pub struct Scene {
    pub labels: Vec<String>,
    pub intr: CameraIntrinsics,
    pub lighting: Lighting,
    pub trajectory: Vec<RigidTransform>,
    pub objects: Vec<SceneObject>,
    /// Shaded world-frame splats for every model point, cached because the
    /// scene is static.
    splats: Vec<(u32, SplatPoint)>,
}

impl SceneSpec {
    pub fn build(&self) -> Result<Scene, SceneError> {
        let trajectory = make_trajectory(&self.trajectory)?;
        if trajectory.is_empty() {
            return Err(SceneError::EmptyTrajectory);
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut objects = Vec::new();
        for spec in &self.objects {
            let id = InstanceId(spec.instance);
            if !seen.insert(id) {
                return Err(SceneError::DuplicateInstance(id));
            }
            objects.push(SceneObject {
                name: spec.name.clone(),
                class: spec.class.clone(),
                instance: id,
                model: make_primitive(spec.primitive, spec.sample_spacing, &spec.name)?,
                pose: spec
                    .pose
                    .to_transform()
                    .map_err(|e| SceneError::BadPose(e.to_string()))?,
                color: spec.color,
                splat_radius: spec.sample_spacing * 0.75,
            });
        }

        let light = Vector3::new(
            self.lighting.light_dir[0],
            self.lighting.light_dir[1],
            self.lighting.light_dir[2],
        )
        .normalize();
        let shade = |position: &Vector3<f64>, normal: &Vector3<f64>, base: &[f64; 3]| -> [f64; 3] {
            let tex = albedo(
                position,
                self.lighting.texture_amplitude,
                self.lighting.texture_wavelength,
            );
            let k = if self.lighting.lambert {
                let diffuse = normal.dot(&-light).max(0.0);
                tex * (self.lighting.ambient + (1.0 - self.lighting.ambient) * diffuse)
            } else {
                tex
            };
            [base[0] * k, base[1] * k, base[2] * k]
        };

        let mut splats = Vec::new();
        let mut index = 0u32;
        for obj in &objects {
            for (p, n) in obj.model.points.iter().zip(&obj.model.normals) {
                let position = obj.pose.apply(p);
                let normal = obj.pose.rotate(n);
                splats.push((
                    index,
                    SplatPoint {
                        position,
                        normal,
                        radius: obj.splat_radius,
                        color: shade(&position, &normal, &obj.color),
                        instance: Some(obj.instance),
                    },
                ));
                index += 1;
            }
        }
        for spec in &self.background {
            let model = make_primitive(spec.primitive, spec.sample_spacing, &spec.name)?;
            let pose = spec
                .pose
                .to_transform()
                .map_err(|e| SceneError::BadPose(e.to_string()))?;
            for (p, n) in model.points.iter().zip(&model.normals) {
                let position = pose.apply(p);
                let normal = pose.rotate(n);
                splats.push((
                    index,
                    SplatPoint {
                        position,
                        normal,
                        radius: spec.sample_spacing * 0.75,
                        color: shade(&position, &normal, &spec.color),
                        instance: None,
                    },
                ));
                index += 1;
            }
        }

        Ok(Scene {
            labels: self.labels.clone(),
            intr: self.intr,
            lighting: self.lighting.clone(),
            trajectory,
            objects,
            splats,
        })
    }

    /// The built-in desk-scale test scene: two boxes, a cylinder, and a
    /// sphere on a ground slab, observed by a 120-frame orbit at 320x240.
    pub fn default_scene() -> SceneSpec {
        let pose = |x: f64, y: f64, z: f64, yaw: f64| PoseJson::Euler {
            t: [x, y, z],
            euler_xyz: [0.0, 0.0, yaw],
        };
        SceneSpec {
            labels: vec!["box".into(), "cylinder".into(), "sphere".into()],
            intr: CameraIntrinsics::new(260.0, 260.0, 160.0, 120.0, 320, 240).expect("valid"),
            lighting: Lighting::default(),
            trajectory: TrajectorySpec::Orbit {
                radius: 0.9,
                height: 0.65,
                target: [0.0, 0.0, 0.05],
                n_frames: 120,
            },
            objects: vec![
                SceneObjectSpec {
                    name: "box_tall".into(),
                    class: "box".into(),
                    instance: 1,
                    primitive: PrimitiveKind::Box {
                        dims: [0.12, 0.09, 0.18],
                    },
                    sample_spacing: 0.006,
                    pose: pose(0.18, 0.12, 0.09, 0.4),
                    color: [0.85, 0.25, 0.2],
                },
                SceneObjectSpec {
                    name: "box_flat".into(),
                    class: "box".into(),
                    instance: 2,
                    primitive: PrimitiveKind::Box {
                        dims: [0.2, 0.14, 0.1],
                    },
                    sample_spacing: 0.006,
                    pose: pose(-0.22, 0.1, 0.05, -0.7),
                    color: [0.2, 0.35, 0.85],
                },
                SceneObjectSpec {
                    name: "cylinder".into(),
                    class: "cylinder".into(),
                    instance: 3,
                    primitive: PrimitiveKind::Cylinder {
                        radius: 0.05,
                        height: 0.16,
                    },
                    sample_spacing: 0.006,
                    pose: pose(-0.05, -0.2, 0.08, 0.0),
                    color: [0.2, 0.75, 0.3],
                },
                SceneObjectSpec {
                    name: "sphere".into(),
                    class: "sphere".into(),
                    instance: 4,
                    primitive: PrimitiveKind::Sphere { radius: 0.07 },
                    sample_spacing: 0.006,
                    pose: pose(0.22, -0.15, 0.07, 0.0),
                    color: [0.9, 0.8, 0.2],
                },
            ],
            background: vec![BackgroundSpec {
                name: "ground".into(),
                primitive: PrimitiveKind::Box {
                    dims: [1.4, 1.4, 0.02],
                },
                sample_spacing: 0.012,
                pose: pose(0.0, 0.0, -0.01, 0.0),
                color: [0.55, 0.55, 0.5],
            }],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderNoise {
    pub depth_sigma_m: f64,
    pub dropout_prob: f64,
}

/// Everything the pipeline and the evaluation need to know about one frame.
pub struct RenderedFrame {
    pub frame: RgbdFrame,
    /// Exact per-pixel instance silhouettes (noise-free).
    pub gt_instance_map: Grid<Option<InstanceId>>,
    pub gt_masks: BTreeMap<InstanceId, Grid<bool>>,
    /// Object poses in the camera frame at this trajectory step.
    pub gt_poses_camera: BTreeMap<InstanceId, RigidTransform>,
    pub camera_pose: RigidTransform,
}

/// Stable per-stage seed derivation from the root seed.
pub fn derive_seed(root: u64, stage: &str, index: u64) -> u64 {
    let mut h = root ^ 0x517c_c1b7_2722_0a95;
    for b in stage.bytes() {
        h = h.wrapping_mul(0x0100_0000_01b3).wrapping_add(b as u64);
    }
    h.wrapping_mul(0x0100_0000_01b3).wrapping_add(index)
}

impl Scene {
    pub fn n_frames(&self) -> usize {
        self.trajectory.len()
    }

    pub fn splats(&self) -> &[(u32, SplatPoint)] {
        &self.splats
    }

    /// Render the ground-truth view from trajectory step `frame_index`,
    /// apply the sensor noise model, and report exact masks and poses.
    /// Deterministic for a given `seed`.
    pub fn render_frame(
        &self,
        frame_index: u64,
        noise: &RenderNoise,
        seed: u64,
    ) -> Result<RenderedFrame, SceneError> {
        let camera_pose = *self
            .trajectory
            .get(frame_index as usize)
            .ok_or(SceneError::FrameOutOfRange(frame_index, self.trajectory.len()))?;
        let view: RenderedView =
            splat_render_points(self.splats.iter().copied(), &camera_pose, &self.intr);

        let mut frame = view.to_frame(frame_index);
        if noise.depth_sigma_m > 0.0 || noise.dropout_prob > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "depth-noise", frame_index));
            let gauss = Normal::new(0.0, noise.depth_sigma_m.max(1e-300)).expect("valid sigma");
            for y in 0..frame.depth.height() {
                for x in 0..frame.depth.width() {
                    let d = *frame.depth.get(x, y);
                    if d <= 0.0 {
                        continue;
                    }
                    if noise.dropout_prob > 0.0 && rng.random::<f64>() < noise.dropout_prob {
                        frame.depth.set(x, y, 0.0);
                        continue;
                    }
                    if noise.depth_sigma_m > 0.0 {
                        frame.depth.set(x, y, (d + gauss.sample(&mut rng)).max(0.0));
                    }
                }
            }
        }

        let mut gt_masks = BTreeMap::new();
        let mut gt_poses_camera = BTreeMap::new();
        let world_to_cam = camera_pose.inverse();
        for obj in &self.objects {
            gt_masks.insert(obj.instance, view.instance_mask(obj.instance));
            gt_poses_camera.insert(obj.instance, world_to_cam.compose(&obj.pose));
        }

        Ok(RenderedFrame {
            frame,
            gt_instance_map: view.instance_map.clone(),
            gt_masks,
            gt_poses_camera,
            camera_pose,
        })
    }
}
