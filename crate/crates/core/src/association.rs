//! Detector-output ingestion, mask-to-instance data association by predicted
//! mask overlap, and the confidence-counter segmentation refinement. The
//! synthetic detector that stands in for a CNN lives here too, along with
//! the on-disk detection format (16-bit PGM soft masks + JSON manifest).

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{read_pgm16, write_pgm16, Grid, ImageError};
use crate::spatial::{NearestNeighborGrid, VoxelSet};
use crate::surfel_map::{InstanceId, RenderedView, SurfelMap};

#[derive(Debug, Error)]
pub enum AssociationError {
    #[error("mask size mismatch: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("soft mask value {0} outside [0, 1]")]
    BadSoftValue(f64),
    #[error("detection manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One detected instance mask. The binary mask is always the soft mask
/// thresholded at 0.5.
#[derive(Debug, Clone)]
pub struct InstanceMask {
    pub binary: Grid<bool>,
    pub soft: Grid<f64>,
    pub class_label: String,
    /// Full distribution over the class label set; sums to 1.
    pub class_probs: Vec<f64>,
    pub score: f64,
    /// Ground-truth source instance when synthesized; lets downstream
    /// bookkeeping keep instance ids aligned with the ground truth.
    pub source_instance: Option<InstanceId>,
}

impl InstanceMask {
    /// Build from a soft mask, binarizing at 0.5.
    pub fn from_soft(
        soft: Grid<f64>,
        class_label: impl Into<String>,
        class_probs: Vec<f64>,
        score: f64,
    ) -> Result<Self, AssociationError> {
        let mut binary = Grid::new(soft.width(), soft.height(), false);
        for (x, y, &v) in soft.iter_pixels() {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(AssociationError::BadSoftValue(v));
            }
            binary.set(x, y, v > 0.5);
        }
        Ok(Self {
            binary,
            soft,
            class_label: class_label.into(),
            class_probs,
            score,
            source_instance: None,
        })
    }
}

/// All masks detected in one frame. Binary masks are made disjoint at
/// construction: on contested pixels the higher-scoring mask wins.
#[derive(Debug, Clone)]
pub struct Detection {
    pub masks: Vec<InstanceMask>,
    pub frame_index: u64,
}

impl Detection {
    pub fn new(mut masks: Vec<InstanceMask>, frame_index: u64) -> Self {
        // Score order, high to low; ties by original position for stability.
        let mut order: Vec<usize> = (0..masks.len()).collect();
        order.sort_by(|&a, &b| {
            masks[b]
                .score
                .partial_cmp(&masks[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        if let Some(first) = masks.first() {
            let (w, h) = (first.binary.width(), first.binary.height());
            let mut claimed = Grid::new(w, h, false);
            for &i in &order {
                for y in 0..h {
                    for x in 0..w {
                        if *masks[i].binary.get(x, y) {
                            if *claimed.get(x, y) {
                                masks[i].binary.set(x, y, false);
                            } else {
                                claimed.set(x, y, true);
                            }
                        }
                    }
                }
            }
        }
        Self { masks, frame_index }
    }

    /// Per-pixel non-background probability: the max soft value over masks.
    pub fn nonbackground_map(&self, width: usize, height: usize) -> Grid<f64> {
        let mut out = Grid::new(width, height, 0.0);
        for mask in &self.masks {
            for (x, y, &v) in mask.soft.iter_pixels() {
                if v > *out.get(x, y) {
                    out.set(x, y, v);
                }
            }
        }
        out
    }
}

/// Percent overlap between a detected mask and a predicted mask:
/// `|M ∩ M̂| / |M̂|`, zero when the predicted mask is empty.
pub fn overlap(detected: &Grid<bool>, predicted: &Grid<bool>) -> Result<f64, AssociationError> {
    if !detected.same_size(predicted) {
        return Err(AssociationError::SizeMismatch(
            detected.width(),
            detected.height(),
            predicted.width(),
            predicted.height(),
        ));
    }
    let mut inter = 0usize;
    let mut pred = 0usize;
    for (x, y, &p) in predicted.iter_pixels() {
        if p {
            pred += 1;
            if *detected.get(x, y) {
                inter += 1;
            }
        }
    }
    if pred == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / pred as f64)
}

/// Intersection over union of two binary masks, used by the evaluation side.
pub fn mask_iou(a: &Grid<bool>, b: &Grid<bool>) -> Result<f64, AssociationError> {
    if !a.same_size(b) {
        return Err(AssociationError::SizeMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y, &va) in a.iter_pixels() {
        let vb = *b.get(x, y);
        if va || vb {
            union += 1;
        }
        if va && vb {
            inter += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Outcome of associating one detection mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskAssignment {
    Existing { id: InstanceId, overlap: f64 },
    NewInstance,
}

pub const OVERLAP_THRESHOLD: f64 = 0.3;

/// Associate each detection mask with the existing instance whose predicted
/// mask overlaps it most, provided the overlap strictly exceeds the
/// threshold; otherwise the mask founds a new instance. At most one mask
/// per frame maps to a given instance (larger overlap wins, then lower
/// instance id).
pub fn associate(
    detection: &Detection,
    view: &RenderedView,
    threshold: f64,
) -> Result<Vec<MaskAssignment>, AssociationError> {
    let visible = view.visible_instances();
    let predicted_masks: BTreeMap<InstanceId, Grid<bool>> = visible
        .keys()
        .map(|&id| (id, view.instance_mask(id)))
        .collect();

    // All candidate pairs above the strict threshold.
    let mut pairs: Vec<(f64, InstanceId, usize)> = Vec::new();
    for (mask_idx, mask) in detection.masks.iter().enumerate() {
        for (&id, predicted) in &predicted_masks {
            let u = overlap(&mask.binary, predicted)?;
            if u > threshold {
                pairs.push((u, id, mask_idx));
            }
        }
    }
    // Greedy by descending overlap; ties to the lower instance id, then
    // lower mask index.
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut result = vec![MaskAssignment::NewInstance; detection.masks.len()];
    let mut used_instances = std::collections::BTreeSet::new();
    let mut used_masks = std::collections::BTreeSet::new();
    for (u, id, mask_idx) in pairs {
        if used_instances.contains(&id) || used_masks.contains(&mask_idx) {
            continue;
        }
        used_instances.insert(id);
        used_masks.insert(mask_idx);
        result[mask_idx] = MaskAssignment::Existing { id, overlap: u };
    }
    Ok(result)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineParams {
    /// Candidate band for the fused non-background probability (open
    /// interval).
    pub band: (f64, f64),
    /// Per-frame pixel probability must exceed this.
    pub pixel_threshold: f64,
    /// Sweep cadence in frames.
    pub n: u64,
    /// Confidence must strictly exceed this at a sweep to assign.
    pub sigma_object: u32,
    /// Voxel size for the 6-connected object-neighbourhood test.
    pub voxel_m: f64,
    /// Maximum distance to the closest instance surfel for assignment.
    pub assign_radius_m: f64,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            band: (0.4, 0.5),
            pixel_threshold: 0.4,
            n: 10,
            sigma_object: 10,
            voxel_m: 0.01,
            assign_radius_m: 0.03,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefineStats {
    pub candidates: usize,
    pub incremented: usize,
    pub reset: usize,
    pub assigned: usize,
}

/// One segmentation-refinement step. Candidate surfels (unlabeled, fused
/// probability inside the band) gain confidence when this frame's pixel
/// probability exceeds the threshold and an object-labeled surfel occupies
/// their voxel 6-neighbourhood; any failure resets the counter. Every `n`
/// frames, candidates whose confidence strictly exceeds `sigma_object` are
/// assigned to the closest instance within reach.
pub fn refine_step(
    map: &mut SurfelMap,
    view: &RenderedView,
    pixel_p_o: &Grid<f64>,
    frame_index: u64,
    params: &RefineParams,
) -> RefineStats {
    let mut stats = RefineStats::default();

    // Object-labeled occupancy and positions, built once per call.
    let mut object_voxels = VoxelSet::new(params.voxel_m);
    let mut object_points = Vec::new();
    let mut object_ids = Vec::new();
    for s in map.surfels() {
        if let Some(id) = s.instance_id {
            object_voxels.insert(&s.position);
            object_points.push(s.position);
            object_ids.push(id);
        }
    }
    let nn = (!object_points.is_empty()).then(|| NearestNeighborGrid::build(object_points));

    let world_to_cam = view.camera_pose.inverse();
    let sweep = frame_index > 0 && frame_index.is_multiple_of(params.n);

    for s in map.surfels_mut() {
        let is_candidate =
            s.instance_id.is_none() && s.p_o > params.band.0 && s.p_o < params.band.1;
        if !is_candidate {
            continue;
        }
        stats.candidates += 1;

        // Criterion (i): this frame's pixel probability at the surfel's
        // projection exceeds the threshold.
        let p_c = world_to_cam.apply(&s.position);
        let pixel_ok = view
            .intr
            .project(&p_c)
            .map(|(u, v)| (u.round(), v.round()))
            .filter(|&(u, v)| pixel_p_o.in_bounds(u as i64, v as i64))
            .map(|(u, v)| *pixel_p_o.get(u as usize, v as usize) > params.pixel_threshold)
            .unwrap_or(false);
        // Criterion (ii): an object-labeled surfel inside the voxel
        // 6-neighbourhood.
        let neighbourhood_ok = object_voxels.occupied_near(&s.position);

        if pixel_ok && neighbourhood_ok {
            s.refine_confidence += 1;
            stats.incremented += 1;
        } else {
            if s.refine_confidence > 0 {
                stats.reset += 1;
            }
            s.refine_confidence = 0;
        }

        if sweep && s.refine_confidence > params.sigma_object {
            let assigned = nn
                .as_ref()
                .and_then(|nn| nn.nearest_within(&s.position, params.assign_radius_m))
                .map(|(idx, _)| object_ids[idx]);
            if let Some(id) = assigned {
                s.instance_id = Some(id);
                stats.assigned += 1;
            }
            s.refine_confidence = 0;
        }
    }
    stats
}

/// Detector corruption model for the synthetic detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorCorruption {
    /// Boundary erosion in pixels; eroded-away object pixels receive soft
    /// values just below the 0.5 binarization threshold.
    pub erode_px: u32,
    /// Probability that a mask's class label flips to a random other label.
    pub class_flip_prob: f64,
}

impl Default for DetectorCorruption {
    fn default() -> Self {
        Self {
            erode_px: 0,
            class_flip_prob: 0.0,
        }
    }
}

/// Chebyshev (square structuring element) binary erosion.
pub fn erode_mask(mask: &Grid<bool>, px: u32) -> Grid<bool> {
    if px == 0 {
        return mask.clone();
    }
    let k = px as i64;
    let (w, h) = (mask.width(), mask.height());
    let survives = |x: i64, y: i64| -> bool {
        for dy in -k..=k {
            for dx in -k..=k {
                let (nx, ny) = (x + dx, y + dy);
                if !mask.in_bounds(nx, ny) || !*mask.get(nx as usize, ny as usize) {
                    return false;
                }
            }
        }
        true
    };
    let mut out = Grid::new(w, h, false);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if *mask.get(x as usize, y as usize) && survives(x, y) {
                out.set(x as usize, y as usize, true);
            }
        }
    }
    out
}

/// Synthesize a detection from ground-truth masks: interiors score high,
/// eroded boundary pixels sit just under the binarization threshold, the
/// background stays low, and class labels occasionally flip. Deterministic
/// per seed.
pub fn synthetic_detect(
    gt_masks: &BTreeMap<InstanceId, Grid<bool>>,
    gt_classes: &BTreeMap<InstanceId, String>,
    labels: &[String],
    corruption: &DetectorCorruption,
    frame_index: u64,
    seed: u64,
) -> Detection {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::scene_sim::derive_seed(
        seed,
        "synthetic-detect",
        frame_index,
    ));
    let mut masks = Vec::new();
    for (&id, gt) in gt_masks {
        if gt.count_true() == 0 {
            continue;
        }
        let eroded = erode_mask(gt, corruption.erode_px);
        let mut soft = Grid::new(gt.width(), gt.height(), 0.0);
        for (x, y, &inside) in gt.iter_pixels() {
            let v = if inside {
                if *eroded.get(x, y) {
                    rng.random_range(0.7..1.0)
                } else {
                    // Misclassified boundary: just under the threshold.
                    rng.random_range(0.40..0.50)
                }
            } else {
                rng.random_range(0.0..0.2)
            };
            soft.set(x, y, v);
        }
        let true_class = gt_classes.get(&id).cloned().unwrap_or_default();
        let class = if corruption.class_flip_prob > 0.0
            && labels.len() > 1
            && rng.random::<f64>() < corruption.class_flip_prob
        {
            let others: Vec<&String> = labels.iter().filter(|l| **l != true_class).collect();
            others[rng.random_range(0..others.len())].clone()
        } else {
            true_class
        };
        let score = rng.random_range(0.9..1.0);
        // Softmax-like distribution: most mass on the emitted class.
        let class_probs: Vec<f64> = if labels.is_empty() {
            Vec::new()
        } else {
            let off = 0.1 / labels.len() as f64;
            labels
                .iter()
                .map(|l| if *l == class { 0.9 + off } else { off })
                .collect()
        };
        let mut mask = InstanceMask::from_soft(soft, class, class_probs, score)
            .expect("synthetic soft values are in range");
        mask.source_instance = Some(id);
        masks.push(mask);
    }
    Detection::new(masks, frame_index)
}

// --- Disk format -------------------------------------------------------------
//
// Per-frame directory: soft masks as 16-bit PGM (soft = gray / 65535) plus
// manifest.json listing file, class, score, and optionally the ground truth
// source instance. Real detector outputs can be dropped in this format.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskManifestEntry {
    file: String,
    class: String,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_instance: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionManifest {
    frame: u64,
    masks: Vec<MaskManifestEntry>,
}

pub fn write_detection(dir: &Path, detection: &Detection) -> Result<(), AssociationError> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (i, mask) in detection.masks.iter().enumerate() {
        let file = format!("mask_{i:03}.pgm");
        let mut raw = Grid::new(mask.soft.width(), mask.soft.height(), 0u16);
        for (x, y, &v) in mask.soft.iter_pixels() {
            raw.set(x, y, (v * 65535.0).round() as u16);
        }
        write_pgm16(&dir.join(&file), &raw)?;
        entries.push(MaskManifestEntry {
            file,
            class: mask.class_label.clone(),
            score: mask.score,
            class_probs: Some(mask.class_probs.clone()),
            gt_instance: mask.source_instance.map(|id| id.0),
        });
    }
    let manifest = DetectionManifest {
        frame: detection.frame_index,
        masks: entries,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_detection(dir: &Path) -> Result<Detection, AssociationError> {
    let manifest: DetectionManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut masks = Vec::new();
    for entry in manifest.masks {
        let raw = read_pgm16(&dir.join(&entry.file))?;
        let mut soft = Grid::new(raw.width(), raw.height(), 0.0);
        for (x, y, &v) in raw.iter_pixels() {
            soft.set(x, y, v as f64 / 65535.0);
        }
        let class_probs = entry.class_probs.unwrap_or_default();
        let mut mask = InstanceMask::from_soft(soft, entry.class, class_probs, entry.score)?;
        mask.source_instance = entry.gt_instance.map(InstanceId);
        masks.push(mask);
    }
    Ok(Detection::new(masks, manifest.frame))
}
