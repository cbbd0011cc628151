//! On-disk sequence format: per-frame depth/intensity/color/mask images plus
//! JSON metadata, a scene manifest, and the sampled object models as ASCII
//! PLY. `synth` writes this layout and `run`/`eval` read it back.
//!
//! Layout:
//! ```text
//! out/
//!   manifest.json
//!   models/<name>.ply
//!   frames/frame_000000/{depth.pgm, intensity.pgm, color.ppm, mask.pgm, meta.json}
//! ```
//! Depth is 16-bit PGM in 0.1 mm units, intensity 8-bit PGM, color 8-bit
//! PPM, masks 8-bit PGM with pixel value = instance id (0 = background).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{
    depth_from_u16, depth_to_u16, read_pgm16, read_pgm8, read_ppm8, write_pgm16, write_pgm8,
    write_ppm8, CameraIntrinsics, Grid, ImageError, RgbdFrame,
};
use crate::metrics::{MetricsError, ObjectModel};
use crate::pose::{PoseError, PoseJson, RigidTransform};
use crate::scene_sim::{RenderNoise, Scene, SceneError};
use crate::surfel_map::InstanceId;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("instance id {0} exceeds the 8-bit mask range")]
    InstanceIdOverflow(u32),
    #[error("malformed model PLY {0:?}: {1}")]
    ModelPly(PathBuf, String),
    #[error("manifest lists no frames")]
    Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestObject {
    pub instance: u32,
    pub name: String,
    pub class: String,
    pub model_file: String,
    pub pose_world: PoseJson,
    pub diameter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_frames: usize,
    pub intr: CameraIntrinsics,
    pub labels: Vec<String>,
    pub seed: u64,
    pub noise: RenderNoise,
    pub objects: Vec<ManifestObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameMetaObject {
    instance: u32,
    pose_camera: PoseJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameMeta {
    frame: u64,
    camera_pose: PoseJson,
    objects: Vec<FrameMetaObject>,
}

pub fn frame_dir(root: &Path, index: u64) -> PathBuf {
    root.join("frames").join(format!("frame_{index:06}"))
}

fn write_model_ply(path: &Path, model: &ObjectModel) -> Result<(), DatasetError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", model.points.len()));
    for f in ["x", "y", "z", "nx", "ny", "nz"] {
        out.push_str(&format!("property double {f}\n"));
    }
    out.push_str("end_header\n");
    for (p, n) in model.points.iter().zip(&model.normals) {
        out.push_str(&format!("{} {} {} {} {} {}\n", p.x, p.y, p.z, n.x, n.y, n.z));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_model_ply(path: &Path, name: &str) -> Result<ObjectModel, DatasetError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.parse::<usize>().map_err(|e| {
                DatasetError::ModelPly(path.to_path_buf(), format!("vertex count: {e}"))
            })?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| {
        DatasetError::ModelPly(path.to_path_buf(), "missing element vertex".into())
    })?;
    let mut points = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| {
            DatasetError::ModelPly(path.to_path_buf(), "truncated vertex list".into())
        })?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::ModelPly(path.to_path_buf(), e.to_string()))?;
        if v.len() != 6 {
            return Err(DatasetError::ModelPly(
                path.to_path_buf(),
                format!("expected 6 fields, got {}", v.len()),
            ));
        }
        points.push(Vector3::new(v[0], v[1], v[2]));
        normals.push(Vector3::new(v[3], v[4], v[5]));
    }
    Ok(ObjectModel::new(name, points, normals)?)
}

/// Render every trajectory frame of `scene` to `out` in the dataset layout.
pub fn write_dataset(
    scene: &Scene,
    noise: &RenderNoise,
    seed: u64,
    out: &Path,
) -> Result<(), DatasetError> {
    std::fs::create_dir_all(out.join("models"))?;
    let mut objects = Vec::new();
    for obj in &scene.objects {
        if obj.instance.0 > u8::MAX as u32 {
            return Err(DatasetError::InstanceIdOverflow(obj.instance.0));
        }
        let model_file = format!("models/{}.ply", obj.name);
        write_model_ply(&out.join(&model_file), &obj.model)?;
        objects.push(ManifestObject {
            instance: obj.instance.0,
            name: obj.name.clone(),
            class: obj.class.clone(),
            model_file,
            pose_world: PoseJson::from_transform(&obj.pose),
            diameter: obj.model.diameter,
        });
    }
    let manifest = Manifest {
        n_frames: scene.n_frames(),
        intr: scene.intr,
        labels: scene.labels.clone(),
        seed,
        noise: *noise,
        objects,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    for k in 0..scene.n_frames() as u64 {
        let rendered = scene.render_frame(k, noise, seed)?;
        let dir = frame_dir(out, k);
        std::fs::create_dir_all(&dir)?;
        write_pgm16(&dir.join("depth.pgm"), &depth_to_u16(&rendered.frame.depth))?;

        let (w, h) = (rendered.frame.depth.width(), rendered.frame.depth.height());
        let mut intensity8 = Grid::new(w, h, 0u8);
        let mut color8 = Grid::new(w, h, [0u8; 3]);
        let mut mask8 = Grid::new(w, h, 0u8);
        for y in 0..h {
            for x in 0..w {
                intensity8.set(
                    x,
                    y,
                    (rendered.frame.intensity.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8,
                );
                let c = rendered.frame.color.get(x, y);
                color8.set(
                    x,
                    y,
                    [
                        (c[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (c[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ],
                );
                if let Some(id) = rendered.gt_instance_map.get(x, y) {
                    mask8.set(x, y, id.0 as u8);
                }
            }
        }
        write_pgm8(&dir.join("intensity.pgm"), &intensity8)?;
        write_ppm8(&dir.join("color.ppm"), &color8)?;
        write_pgm8(&dir.join("mask.pgm"), &mask8)?;

        let meta = FrameMeta {
            frame: k,
            camera_pose: PoseJson::from_transform(&rendered.camera_pose),
            objects: rendered
                .gt_poses_camera
                .iter()
                .map(|(id, pose)| FrameMetaObject {
                    instance: id.0,
                    pose_camera: PoseJson::from_transform(pose),
                })
                .collect(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

/// One object as the pipeline consumes it.
#[derive(Debug, Clone)]
pub struct SourceObject {
    pub name: String,
    pub class: String,
    pub model: ObjectModel,
    pub pose_world: RigidTransform,
}

/// Ground-truth inputs for one frame.
pub struct FrameInput {
    pub frame: RgbdFrame,
    pub gt_masks: BTreeMap<InstanceId, Grid<bool>>,
    pub gt_camera_pose: RigidTransform,
}

/// Anything the pipeline can consume frames from.
pub trait FrameSource {
    fn n_frames(&self) -> usize;
    fn intr(&self) -> CameraIntrinsics;
    fn labels(&self) -> &[String];
    fn objects(&self) -> &BTreeMap<InstanceId, SourceObject>;
    fn gt_trajectory(&self) -> &[RigidTransform];
    fn load(&self, index: u64) -> Result<FrameInput, DatasetError>;

    fn gt_classes(&self) -> BTreeMap<InstanceId, String> {
        self.objects()
            .iter()
            .map(|(&id, o)| (id, o.class.clone()))
            .collect()
    }

    fn gt_object_poses_world(&self) -> BTreeMap<InstanceId, RigidTransform> {
        self.objects()
            .iter()
            .map(|(&id, o)| (id, o.pose_world))
            .collect()
    }
}

/// Frame source rendering directly from an in-memory scene.
pub struct SceneFrameSource {
    scene: Scene,
    noise: RenderNoise,
    seed: u64,
    objects: BTreeMap<InstanceId, SourceObject>,
}

impl SceneFrameSource {
    pub fn new(scene: Scene, noise: RenderNoise, seed: u64) -> Self {
        let objects = scene
            .objects
            .iter()
            .map(|o| {
                (
                    o.instance,
                    SourceObject {
                        name: o.name.clone(),
                        class: o.class.clone(),
                        model: o.model.clone(),
                        pose_world: o.pose,
                    },
                )
            })
            .collect();
        Self {
            scene,
            noise,
            seed,
            objects,
        }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }
}

impl FrameSource for SceneFrameSource {
    fn n_frames(&self) -> usize {
        self.scene.n_frames()
    }

    fn intr(&self) -> CameraIntrinsics {
        self.scene.intr
    }

    fn labels(&self) -> &[String] {
        &self.scene.labels
    }

    fn objects(&self) -> &BTreeMap<InstanceId, SourceObject> {
        &self.objects
    }

    fn gt_trajectory(&self) -> &[RigidTransform] {
        &self.scene.trajectory
    }

    fn load(&self, index: u64) -> Result<FrameInput, DatasetError> {
        let rendered = self.scene.render_frame(index, &self.noise, self.seed)?;
        Ok(FrameInput {
            frame: rendered.frame,
            gt_masks: rendered.gt_masks,
            gt_camera_pose: rendered.camera_pose,
        })
    }
}

/// Frame source reading a dataset directory written by [`write_dataset`].
pub struct DiskFrameSource {
    root: PathBuf,
    manifest: Manifest,
    objects: BTreeMap<InstanceId, SourceObject>,
    trajectory: Vec<RigidTransform>,
}

impl DiskFrameSource {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json"))?)?;
        if manifest.n_frames == 0 {
            return Err(DatasetError::Empty);
        }
        let mut objects = BTreeMap::new();
        for entry in &manifest.objects {
            let model = read_model_ply(&root.join(&entry.model_file), &entry.name)?;
            objects.insert(
                InstanceId(entry.instance),
                SourceObject {
                    name: entry.name.clone(),
                    class: entry.class.clone(),
                    model,
                    pose_world: entry.pose_world.to_transform()?,
                },
            );
        }
        let mut trajectory = Vec::with_capacity(manifest.n_frames);
        for k in 0..manifest.n_frames as u64 {
            let meta: FrameMeta = serde_json::from_str(&std::fs::read_to_string(
                frame_dir(root, k).join("meta.json"),
            )?)?;
            trajectory.push(meta.camera_pose.to_transform()?);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            objects,
            trajectory,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

impl FrameSource for DiskFrameSource {
    fn n_frames(&self) -> usize {
        self.manifest.n_frames
    }

    fn intr(&self) -> CameraIntrinsics {
        self.manifest.intr
    }

    fn labels(&self) -> &[String] {
        &self.manifest.labels
    }

    fn objects(&self) -> &BTreeMap<InstanceId, SourceObject> {
        &self.objects
    }

    fn gt_trajectory(&self) -> &[RigidTransform] {
        &self.trajectory
    }

    fn load(&self, index: u64) -> Result<FrameInput, DatasetError> {
        let dir = frame_dir(&self.root, index);
        let depth = depth_from_u16(&read_pgm16(&dir.join("depth.pgm"))?);
        let intensity8 = read_pgm8(&dir.join("intensity.pgm"))?;
        let color8 = read_ppm8(&dir.join("color.ppm"))?;
        let mask8 = read_pgm8(&dir.join("mask.pgm"))?;
        let (w, h) = (depth.width(), depth.height());
        let mut intensity = Grid::new(w, h, 0.0);
        let mut color = Grid::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                intensity.set(x, y, *intensity8.get(x, y) as f64 / 255.0);
                let c = color8.get(x, y);
                color.set(
                    x,
                    y,
                    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0],
                );
            }
        }
        let mut gt_masks: BTreeMap<InstanceId, Grid<bool>> = self
            .objects
            .keys()
            .map(|&id| (id, Grid::new(w, h, false)))
            .collect();
        for (x, y, &raw) in mask8.iter_pixels() {
            if raw > 0 {
                if let Some(mask) = gt_masks.get_mut(&InstanceId(raw as u32)) {
                    mask.set(x, y, true);
                }
            }
        }
        let meta: FrameMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        Ok(FrameInput {
            frame: RgbdFrame {
                depth,
                intensity,
                color,
                intr: self.manifest.intr,
                index,
            },
            gt_masks,
            gt_camera_pose: meta.camera_pose.to_transform()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::SceneSpec;

    fn small_scene() -> Scene {
        let mut spec = SceneSpec::default_scene();
        if let crate::scene_sim::TrajectorySpec::Orbit { n_frames, .. } = &mut spec.trajectory {
            *n_frames = 2;
        }
        spec.build().unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small_scene();
        write_dataset(&scene, &RenderNoise::default(), 5, dir.path()).unwrap();
        let source = DiskFrameSource::open(dir.path()).unwrap();
        assert_eq!(source.n_frames(), 2);
        assert_eq!(source.labels(), &["box", "cylinder", "sphere"]);
        assert_eq!(source.objects().len(), 4);

        let mem = SceneFrameSource::new(small_scene(), RenderNoise::default(), 5);
        let from_disk = source.load(1).unwrap();
        let from_mem = mem.load(1).unwrap();
        // Depth quantization is 0.1 mm.
        let mut max_err = 0.0f64;
        for (x, y, &d) in from_mem.frame.depth.iter_pixels() {
            let dd = *from_disk.frame.depth.get(x, y);
            if d > 0.0 && dd > 0.0 {
                max_err = max_err.max((d - dd).abs());
            }
        }
        assert!(max_err <= 5.1e-5, "max depth error {max_err}");
        // Masks survive exactly.
        for (id, mask) in &from_mem.gt_masks {
            assert_eq!(mask.count_true(), from_disk.gt_masks[id].count_true());
        }
        // Camera pose round-trips through JSON.
        let dt = (from_disk.gt_camera_pose.translation - from_mem.gt_camera_pose.translation).norm();
        assert!(dt < 1e-9);
        // Models and diameters round-trip.
        let obj = &source.objects()[&InstanceId(4)];
        assert_eq!(obj.class, "sphere");
        assert!((obj.model.diameter - mem.objects()[&InstanceId(4)].model.diameter).abs() < 1e-9);
    }

    #[test]
    fn byte_identical_rewrite() {
        let scene = small_scene();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_dataset(&scene, &RenderNoise::default(), 9, dir_a.path()).unwrap();
        write_dataset(&scene, &RenderNoise::default(), 9, dir_b.path()).unwrap();
        for rel in [
            "manifest.json",
            "frames/frame_000000/depth.pgm",
            "frames/frame_000001/color.ppm",
            "frames/frame_000001/meta.json",
        ] {
            let a = std::fs::read(dir_a.path().join(rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between identical writes");
        }
    }
}
