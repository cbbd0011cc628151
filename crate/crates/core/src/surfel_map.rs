//! The surfel scene model: an unordered list of oriented disks with
//! per-instance semantic state, updated by merging RGB-D frames, and a
//! z-buffered splat renderer that predicts depth/color/instance views.
//!
//! Class probabilities are stored once per instance (not per surfel); each
//! surfel carries only an instance handle, its non-background probability,
//! and the refinement confidence counter.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{CameraIntrinsics, Grid, ImageError, RgbdFrame};
use crate::pose::RigidTransform;

#[derive(Debug, Error)]
pub enum SurfelMapError {
    #[error("pixel map size mismatch: frame is {frame_w}x{frame_h}, map is {map_w}x{map_h}")]
    SizeMismatch {
        frame_w: usize,
        frame_h: usize,
        map_w: usize,
        map_h: usize,
    },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("distribution length {got} does not match label set size {expected}")]
    DistributionLength { got: usize, expected: usize },
    #[error("unknown class label {0:?}")]
    UnknownLabel(String),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("malformed PLY: {0}")]
    PlyParse(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Handle of a map object instance. Ids start at 1; 0 is reserved for
/// background in the 8-bit mask format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One oriented surface disk.
#[derive(Debug, Clone)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
    pub instance_id: Option<InstanceId>,
    /// Fused non-background probability (running mean of per-frame values).
    pub p_o: f64,
    /// Number of frames that contributed to `p_o`.
    pub obs_count: u32,
    /// Number of geometric fusions, the weight of the position/normal/color
    /// running means. Diverges from `obs_count` on frames without detections.
    pub fuse_weight: u32,
    /// Segmentation-refinement confidence counter.
    pub refine_confidence: u32,
    pub last_seen: u64,
    pub active: bool,
}

impl Surfel {
    /// Fold one per-frame non-background probability into the running mean.
    pub fn with_nonbackground_observation(&self, p_frame: f64) -> Result<Surfel, SurfelMapError> {
        if !(0.0..=1.0).contains(&p_frame) || !p_frame.is_finite() {
            return Err(SurfelMapError::BadProbability(p_frame));
        }
        let t = self.obs_count as f64;
        let mut s = self.clone();
        s.p_o = (self.p_o * t + p_frame) / (t + 1.0);
        s.obs_count += 1;
        Ok(s)
    }
}

/// Per-instance semantic state: one class distribution for all surfels of
/// the instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub class_probs: Vec<f64>,
    pub obs_count: u64,
}

impl InstanceRecord {
    /// Running-mean class update: `probs * t/(t+1) + dist/(t+1)`.
    pub fn with_class_observation(&self, frame_dist: &[f64]) -> Result<InstanceRecord, SurfelMapError> {
        if frame_dist.len() != self.class_probs.len() {
            return Err(SurfelMapError::DistributionLength {
                got: frame_dist.len(),
                expected: self.class_probs.len(),
            });
        }
        for &p in frame_dist {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(SurfelMapError::BadProbability(p));
            }
        }
        let t = self.obs_count as f64;
        let probs = self
            .class_probs
            .iter()
            .zip(frame_dist)
            .map(|(old, new)| old * t / (t + 1.0) + new / (t + 1.0))
            .collect();
        Ok(InstanceRecord {
            id: self.id,
            class_probs: probs,
            obs_count: self.obs_count + 1,
        })
    }

    /// Index of the most probable class.
    pub fn best_class(&self) -> usize {
        self.class_probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Splat-rendered prediction of what the map looks like from a camera pose.
#[derive(Debug, Clone)]
pub struct RenderedView {
    /// Meters; 0 where nothing was hit.
    pub depth: Grid<f64>,
    pub color: Grid<[f64; 3]>,
    pub instance_map: Grid<Option<InstanceId>>,
    /// Index of the winning splat; populated exactly where depth > 0.
    pub surfel_index_map: Grid<Option<u32>>,
    /// World-frame surface point under each hit pixel (pixel ray intersected
    /// with the winning splat's tangent plane).
    pub point_map: Grid<Vector3<f64>>,
    /// World-frame normal of the winning splat.
    pub normal_map: Grid<Vector3<f64>>,
    pub camera_pose: RigidTransform,
    pub intr: CameraIntrinsics,
}

impl RenderedView {
    /// An empty view carrying only the viewpoint (camera pose + intrinsics),
    /// for callers that need the projection geometry without a render.
    pub fn viewpoint(camera_pose: RigidTransform, intr: CameraIntrinsics) -> Self {
        Self::empty(camera_pose, intr)
    }

    fn empty(camera_pose: RigidTransform, intr: CameraIntrinsics) -> Self {
        let (w, h) = (intr.width, intr.height);
        Self {
            depth: Grid::new(w, h, 0.0),
            color: Grid::new(w, h, [0.0; 3]),
            instance_map: Grid::new(w, h, None),
            surfel_index_map: Grid::new(w, h, None),
            point_map: Grid::new(w, h, Vector3::zeros()),
            normal_map: Grid::new(w, h, Vector3::zeros()),
            camera_pose,
            intr,
        }
    }

    /// Binary mask of pixels predicted to belong to `id`. An id absent from
    /// the view yields an all-false mask.
    pub fn instance_mask(&self, id: InstanceId) -> Grid<bool> {
        let mut mask = Grid::new(self.instance_map.width(), self.instance_map.height(), false);
        for (x, y, v) in self.instance_map.iter_pixels() {
            if *v == Some(id) {
                mask.set(x, y, true);
            }
        }
        mask
    }

    /// Instance ids visible in the view with their pixel counts, in id order.
    pub fn visible_instances(&self) -> BTreeMap<InstanceId, usize> {
        let mut counts = BTreeMap::new();
        for (_, _, v) in self.instance_map.iter_pixels() {
            if let Some(id) = v {
                *counts.entry(*id).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Package the rendered channels as an input frame (depth + luma +
    /// color), e.g. to feed predicted views to measurement providers.
    pub fn to_frame(&self, index: u64) -> RgbdFrame {
        let intensity = Grid::from_vec(
            self.color.width(),
            self.color.height(),
            self.color.data().iter().map(crate::image::luma).collect(),
        )
        .expect("same size");
        RgbdFrame {
            depth: self.depth.clone(),
            intensity,
            color: self.color.clone(),
            intr: self.intr,
            index,
        }
    }
}

/// One point fed to the splat renderer.
#[derive(Debug, Clone, Copy)]
pub struct SplatPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
    pub color: [f64; 3],
    pub instance: Option<InstanceId>,
}

/// Forward-project splats into a z-buffered view. Splats facing away from
/// the camera are culled; each survivor covers a disk of pixel radius
/// `max(1, radius * fx / depth)`. Per covered pixel the depth written is the
/// intersection of the pixel ray with the splat's tangent plane, so
/// back-projecting the rendered depth lands on the splat surface. The
/// nearest depth wins per pixel with ties broken by lower index.
pub fn splat_render_points<I>(
    points: I,
    camera_pose: &RigidTransform,
    intr: &CameraIntrinsics,
) -> RenderedView
where
    I: IntoIterator<Item = (u32, SplatPoint)>,
{
    let mut view = RenderedView::empty(*camera_pose, *intr);
    let world_to_cam = camera_pose.inverse();
    let cam_center = camera_pose.translation;
    for (index, sp) in points {
        let view_dir = sp.position - cam_center;
        if sp.normal.dot(&view_dir) >= 0.0 {
            continue;
        }
        let p_c = world_to_cam.apply(&sp.position);
        if p_c.z <= 0.0 {
            continue;
        }
        let n_c = world_to_cam.rotate(&sp.normal);
        let plane_offset = n_c.dot(&p_c);
        let Some((u, v)) = intr.project(&p_c) else { continue };
        let r_px = (sp.radius * intr.fx / p_c.z).max(1.0);
        let x0 = (u - r_px).ceil().max(0.0) as i64;
        let x1 = (u + r_px).floor().min(intr.width as f64 - 1.0) as i64;
        let y0 = (v - r_px).ceil().max(0.0) as i64;
        let y1 = (v + r_px).floor().min(intr.height as f64 - 1.0) as i64;
        if x1 < x0 || y1 < y0 {
            continue;
        }
        let r2 = r_px * r_px;
        for y in y0..=y1 {
            let dy = y as f64 - v;
            for x in x0..=x1 {
                let dx = x as f64 - u;
                // Strict inclusion (with a guard against projection jitter)
                // keeps a radius-1 splat centered on a pixel from bleeding
                // into its neighbours.
                if dx * dx + dy * dy >= r2 - 1e-9 {
                    continue;
                }
                let ray = Vector3::new(
                    (x as f64 - intr.cx) / intr.fx,
                    (y as f64 - intr.cy) / intr.fy,
                    1.0,
                );
                let denom = n_c.dot(&ray);
                if denom.abs() < 1e-9 {
                    continue;
                }
                let depth = plane_offset / denom;
                if depth <= 0.0 {
                    continue;
                }
                let (xu, yu) = (x as usize, y as usize);
                let current = *view.depth.get(xu, yu);
                if current > 0.0 && current <= depth {
                    continue;
                }
                view.depth.set(xu, yu, depth);
                view.color.set(xu, yu, sp.color);
                view.instance_map.set(xu, yu, sp.instance);
                view.surfel_index_map.set(xu, yu, Some(index));
                // The surface point under this pixel, not the splat center.
                view.point_map.set(xu, yu, camera_pose.apply(&(ray * depth)));
                view.normal_map.set(xu, yu, sp.normal);
            }
        }
    }
    view
}

/// Gates for projective association during fusion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    /// Maximum |frame depth - rendered depth| for a merge.
    pub depth_gate_m: f64,
    /// Maximum angle between frame and surfel normals, degrees.
    pub normal_gate_deg: f64,
    /// Depth jump above which neighbouring pixels are not used for frame
    /// normal estimation.
    pub normal_jump_m: f64,
    /// Frames a background surfel may go unseen before demotion.
    pub active_window: u64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            depth_gate_m: 0.05,
            normal_gate_deg: 30.0,
            normal_jump_m: 0.05,
            active_window: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FusionStats {
    pub merged: usize,
    pub created: usize,
    /// Valid-depth pixels skipped because no surface normal could be
    /// estimated.
    pub skipped: usize,
}

/// The scene model.
#[derive(Debug, Clone)]
pub struct SurfelMap {
    surfels: Vec<Surfel>,
    instances: BTreeMap<InstanceId, InstanceRecord>,
    labels: Vec<String>,
    next_instance: u32,
}

impl SurfelMap {
    /// The class label set is fixed at construction; inputs naming labels
    /// outside it are rejected rather than auto-added.
    pub fn new(labels: Vec<String>) -> Self {
        Self {
            surfels: Vec::new(),
            instances: BTreeMap::new(),
            labels,
            next_instance: 1,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Result<usize, SurfelMapError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| SurfelMapError::UnknownLabel(label.to_string()))
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    pub fn surfels_mut(&mut self) -> &mut [Surfel] {
        &mut self.surfels
    }

    #[cfg(test)]
    pub(crate) fn push_surfel(&mut self, s: Surfel) {
        self.surfels.push(s);
    }

    pub fn instances(&self) -> &BTreeMap<InstanceId, InstanceRecord> {
        &self.instances
    }

    pub fn instance(&self, id: InstanceId) -> Option<&InstanceRecord> {
        self.instances.get(&id)
    }

    /// Floats held by per-instance class distributions; grows with
    /// instances x labels, never with surfel count.
    pub fn class_prob_storage(&self) -> usize {
        self.instances.len() * self.labels.len()
    }

    /// Create a new instance, honoring `hint` when that id is free. The
    /// class distribution starts uniform with zero observations.
    pub fn create_instance(&mut self, hint: Option<InstanceId>) -> InstanceId {
        let id = match hint {
            Some(h) if !self.instances.contains_key(&h) && h.0 > 0 => h,
            _ => {
                while self.instances.contains_key(&InstanceId(self.next_instance)) {
                    self.next_instance += 1;
                }
                InstanceId(self.next_instance)
            }
        };
        self.next_instance = self.next_instance.max(id.0 + 1);
        let uniform = if self.labels.is_empty() {
            Vec::new()
        } else {
            vec![1.0 / self.labels.len() as f64; self.labels.len()]
        };
        self.instances.insert(
            id,
            InstanceRecord {
                id,
                class_probs: uniform,
                obs_count: 0,
            },
        );
        id
    }

    /// Fold a per-frame class distribution into an instance record.
    pub fn update_class_probability(
        &mut self,
        id: InstanceId,
        frame_dist: &[f64],
    ) -> Result<(), SurfelMapError> {
        let rec = self
            .instances
            .get(&id)
            .ok_or(SurfelMapError::UnknownInstance(id))?;
        let updated = rec.with_class_observation(frame_dist)?;
        self.instances.insert(id, updated);
        Ok(())
    }

    /// Merge an RGB-D frame into the map by projective association. Each
    /// valid depth pixel with an estimable normal either merges into the
    /// surfel it hits in the rendered index map (within the gates) or
    /// creates a new surfel. `pixel_instances` / `pixel_p_o`, when given,
    /// update instance labels and non-background probabilities.
    pub fn fuse_frame(
        &mut self,
        frame: &RgbdFrame,
        camera_pose: &RigidTransform,
        pixel_instances: Option<&Grid<Option<InstanceId>>>,
        pixel_p_o: Option<&Grid<f64>>,
        params: &FusionParams,
    ) -> Result<FusionStats, SurfelMapError> {
        let (fw, fh) = (frame.depth.width(), frame.depth.height());
        for (w, h) in pixel_instances
            .map(|g| (g.width(), g.height()))
            .into_iter()
            .chain(pixel_p_o.map(|g| (g.width(), g.height())))
        {
            if (w, h) != (fw, fh) {
                return Err(SurfelMapError::SizeMismatch {
                    frame_w: fw,
                    frame_h: fh,
                    map_w: w,
                    map_h: h,
                });
            }
        }

        let index_view = self.splat_render(camera_pose, &frame.intr);
        let normals = frame.compute_normals(params.normal_jump_m);
        let cos_gate = params.normal_gate_deg.to_radians().cos();
        let mut stats = FusionStats::default();

        for y in 0..fh {
            for x in 0..fw {
                let Some(d) = frame.valid_depth_at(x, y) else { continue };
                let Some(n_c) = normals.get(x, y) else {
                    stats.skipped += 1;
                    continue;
                };
                let p_c = frame.intr.backproject(x as f64, y as f64, d);
                let w_pos = camera_pose.apply(&p_c);
                let n_w = camera_pose.rotate(n_c);

                // Match the pixel's own index-map entry first; fall back to
                // the 8-neighbour ring (smallest depth gap, tie: lower
                // index) for geometry that projects slightly off-pixel.
                let mut best: Option<(f64, u32)> = None;
                let consider = |nx: i64, ny: i64, best: &mut Option<(f64, u32)>| {
                    if !index_view.depth.in_bounds(nx, ny) {
                        return;
                    }
                    let (nxu, nyu) = (nx as usize, ny as usize);
                    let Some(idx) = *index_view.surfel_index_map.get(nxu, nyu) else {
                        return;
                    };
                    let rendered_depth = *index_view.depth.get(nxu, nyu);
                    let gap = (rendered_depth - d).abs();
                    if gap >= params.depth_gate_m {
                        return;
                    }
                    if self.surfels[idx as usize].normal.dot(&n_w) <= cos_gate {
                        return;
                    }
                    let better = match *best {
                        None => true,
                        Some((bg, bi)) => gap < bg || (gap == bg && idx < bi),
                    };
                    if better {
                        *best = Some((gap, idx));
                    }
                };
                consider(x as i64, y as i64, &mut best);
                if best.is_none() {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            consider(x as i64 + dx, y as i64 + dy, &mut best);
                        }
                    }
                }

                let p_obs = pixel_p_o.map(|g| *g.get(x, y));
                let inst_obs = pixel_instances.and_then(|g| *g.get(x, y));
                if let Some(p) = p_obs {
                    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                        return Err(SurfelMapError::BadProbability(p));
                    }
                }

                match best {
                    Some((_, idx)) => {
                        let s = &mut self.surfels[idx as usize];
                        let w = s.fuse_weight as f64;
                        s.position = (s.position * w + w_pos) / (w + 1.0);
                        let n_mean = (s.normal * w + n_w) / (w + 1.0);
                        if n_mean.norm() > 1e-9 {
                            s.normal = n_mean.normalize();
                        }
                        let c = *frame.color.get(x, y);
                        for (sc, fc) in s.color.iter_mut().zip(&c) {
                            *sc = (*sc * w + fc) / (w + 1.0);
                        }
                        s.radius = (s.radius * w + d / frame.intr.fx) / (w + 1.0);
                        s.fuse_weight += 1;
                        s.last_seen = frame.index;
                        s.active = true;
                        if s.instance_id.is_none() {
                            s.instance_id = inst_obs;
                        }
                        if let Some(p) = p_obs {
                            let t = s.obs_count as f64;
                            s.p_o = (s.p_o * t + p) / (t + 1.0);
                            s.obs_count += 1;
                        }
                        stats.merged += 1;
                    }
                    None => {
                        let (p_o, obs_count) = match p_obs {
                            Some(p) => (p, 1),
                            None => (0.5, 0),
                        };
                        self.surfels.push(Surfel {
                            position: w_pos,
                            normal: n_w,
                            radius: d / frame.intr.fx,
                            color: *frame.color.get(x, y),
                            instance_id: inst_obs,
                            p_o,
                            obs_count,
                            fuse_weight: 1,
                            refine_confidence: 0,
                            last_seen: frame.index,
                            active: true,
                        });
                        stats.created += 1;
                    }
                }
            }
        }
        Ok(stats)
    }

    /// Render the active surfels from a camera pose.
    pub fn splat_render(&self, camera_pose: &RigidTransform, intr: &CameraIntrinsics) -> RenderedView {
        splat_render_points(
            self.surfels.iter().enumerate().filter(|(_, s)| s.active).map(|(i, s)| {
                (
                    i as u32,
                    SplatPoint {
                        position: s.position,
                        normal: s.normal,
                        radius: s.radius,
                        color: s.color,
                        instance: s.instance_id,
                    },
                )
            }),
            camera_pose,
            intr,
        )
    }

    /// Demote background surfels unseen for more than `window` frames.
    /// Surfels on object instances stay active forever.
    pub fn mark_active_objects(&mut self, frame_index: u64, window: u64) {
        for s in &mut self.surfels {
            s.active = s.instance_id.is_some() || frame_index.saturating_sub(s.last_seen) <= window;
        }
    }

    /// World-frame positions of the surfels labeled with `id`.
    pub fn instance_points(&self, id: InstanceId) -> Vec<Vector3<f64>> {
        self.surfels
            .iter()
            .filter(|s| s.instance_id == Some(id))
            .map(|s| s.position)
            .collect()
    }

    // --- PLY + JSON sidecar export/import -----------------------------------

    /// ASCII PLY with per-vertex
    /// `x y z nx ny nz red green blue radius instance_id p_o`.
    pub fn export_ply(&self) -> String {
        let mut out = String::new();
        out.push_str("ply\nformat ascii 1.0\ncomment surfel map\n");
        out.push_str(&format!("element vertex {}\n", self.surfels.len()));
        for f in ["x", "y", "z", "nx", "ny", "nz"] {
            out.push_str(&format!("property double {f}\n"));
        }
        for f in ["red", "green", "blue"] {
            out.push_str(&format!("property uchar {f}\n"));
        }
        out.push_str("property double radius\nproperty int instance_id\nproperty double p_o\n");
        out.push_str("end_header\n");
        for s in &self.surfels {
            let rgb: Vec<String> = s
                .color
                .iter()
                .map(|c| format!("{}", (c.clamp(0.0, 1.0) * 255.0).round() as u8))
                .collect();
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {}\n",
                s.position.x,
                s.position.y,
                s.position.z,
                s.normal.x,
                s.normal.y,
                s.normal.z,
                rgb.join(" "),
                s.radius,
                s.instance_id.map(|i| i.0 as i64).unwrap_or(-1),
                s.p_o,
            ));
        }
        out
    }

    pub fn export_instances_json(&self) -> String {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            labels: &'a [String],
            instances: Vec<&'a InstanceRecord>,
        }
        serde_json::to_string_pretty(&Sidecar {
            labels: &self.labels,
            instances: self.instances.values().collect(),
        })
        .expect("serializable")
    }

    pub fn save(&self, ply_path: &Path, instances_path: &Path) -> Result<(), SurfelMapError> {
        std::fs::write(ply_path, self.export_ply())?;
        std::fs::write(instances_path, self.export_instances_json())?;
        Ok(())
    }

    pub fn import_ply(ply: &str, instances_json: &str) -> Result<Self, SurfelMapError> {
        #[derive(Deserialize)]
        struct Sidecar {
            labels: Vec<String>,
            instances: Vec<InstanceRecord>,
        }
        let sidecar: Sidecar = serde_json::from_str(instances_json)
            .map_err(|e| SurfelMapError::PlyParse(format!("instance sidecar: {e}")))?;

        let mut lines = ply.lines();
        let mut vertex_count = None;
        for line in lines.by_ref() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("element vertex ") {
                vertex_count = Some(rest.parse::<usize>().map_err(|e| {
                    SurfelMapError::PlyParse(format!("bad vertex count: {e}"))
                })?);
            }
            if line == "end_header" {
                break;
            }
        }
        let vertex_count =
            vertex_count.ok_or_else(|| SurfelMapError::PlyParse("missing element vertex".into()))?;

        let mut surfels = Vec::with_capacity(vertex_count);
        for _ in 0..vertex_count {
            let line = lines
                .next()
                .ok_or_else(|| SurfelMapError::PlyParse("truncated vertex list".into()))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 12 {
                return Err(SurfelMapError::PlyParse(format!(
                    "expected 12 vertex fields, got {}",
                    fields.len()
                )));
            }
            let f = |i: usize| -> Result<f64, SurfelMapError> {
                fields[i]
                    .parse()
                    .map_err(|e| SurfelMapError::PlyParse(format!("field {i}: {e}")))
            };
            let instance_raw: i64 = fields[10]
                .parse()
                .map_err(|e| SurfelMapError::PlyParse(format!("instance id: {e}")))?;
            surfels.push(Surfel {
                position: Vector3::new(f(0)?, f(1)?, f(2)?),
                normal: Vector3::new(f(3)?, f(4)?, f(5)?),
                radius: f(9)?,
                color: [f(6)? / 255.0, f(7)? / 255.0, f(8)? / 255.0],
                instance_id: (instance_raw >= 0).then_some(InstanceId(instance_raw as u32)),
                p_o: f(11)?,
                obs_count: 1,
                fuse_weight: 1,
                refine_confidence: 0,
                last_seen: 0,
                active: true,
            });
        }

        let next_instance = sidecar.instances.iter().map(|r| r.id.0 + 1).max().unwrap_or(1);
        Ok(Self {
            surfels,
            instances: sidecar.instances.into_iter().map(|r| (r.id, r)).collect(),
            labels: sidecar.labels,
            next_instance,
        })
    }

    pub fn load(ply_path: &Path, instances_path: &Path) -> Result<Self, SurfelMapError> {
        let ply = std::fs::read_to_string(ply_path)?;
        let sidecar = std::fs::read_to_string(instances_path)?;
        Self::import_ply(&ply, &sidecar)
    }
}
