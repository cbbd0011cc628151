//! Frame-to-model camera tracking: Gauss-Newton minimization of a joint
//! point-to-plane plus weighted photometric objective against the
//! splat-rendered predicted view.
//!
//! The optimization increment is a 6-dof tangent vector (translation +
//! rotation vector) applied with the rotation on the left:
//! `R <- exp(dr) * R`, `t <- t + dt`.

use nalgebra::{Matrix3, Rotation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{luma, Grid, RgbdFrame};
use crate::pose::{RigidTransform, TangentVector6};
use crate::surfel_map::RenderedView;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("only {icp} geometric correspondences (need at least 6); {rgb} photometric")]
    InsufficientCorrespondences { icp: usize, rgb: usize },
    #[error("normal equations are singular (degenerate geometry)")]
    SingularSystem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    /// Weight of the photometric term in `E = E_icp + omega * E_rgb`.
    pub omega: f64,
    pub max_iterations: usize,
    /// Maximum |frame depth - predicted depth| for a geometric pair.
    pub depth_gate_m: f64,
    /// Maximum angle between frame and model normals, degrees.
    pub normal_gate_deg: f64,
    /// 1 = single resolution; up to 3 coarse-to-fine levels.
    pub pyramid_levels: usize,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            omega: 0.1,
            max_iterations: 15,
            depth_gate_m: 0.1,
            normal_gate_deg: 30.0,
            pyramid_levels: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Camera-to-global pose.
    pub pose: RigidTransform,
    /// `icp_cost + omega * rgb_cost`, costs as sums of squared residuals.
    pub final_cost: f64,
    pub icp_cost: f64,
    pub rgb_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub icp_correspondences: usize,
    pub rgb_correspondences: usize,
}

/// One point-to-plane residual with everything needed to re-evaluate it
/// under a perturbed pose (association frozen).
#[derive(Debug, Clone)]
pub struct IcpResidual {
    pub residual: f64,
    pub jacobian: [f64; 6],
    /// Frame point in the camera frame.
    pub point_cam: Vector3<f64>,
    /// Associated model point and normal, world frame.
    pub model_point: Vector3<f64>,
    pub model_normal: Vector3<f64>,
    pub pixel: (usize, usize),
}

/// One photometric residual (frame intensity warped onto a model pixel).
#[derive(Debug, Clone)]
pub struct RgbResidual {
    pub residual: f64,
    pub jacobian: [f64; 6],
    /// Model surface point, world frame.
    pub model_point: Vector3<f64>,
    pub model_intensity: f64,
    pub pixel: (usize, usize),
}

/// Left-multiplied increment on a camera pose.
pub fn apply_increment(delta: &TangentVector6, pose: &RigidTransform) -> RigidTransform {
    RigidTransform::from_parts(
        Rotation3::from_scaled_axis(delta.dr).into_inner() * pose.rotation,
        pose.translation + delta.dt,
    )
}

/// Frame data precomputed once per registration solve.
struct FramePrecomp {
    points_cam: Vec<Option<Vector3<f64>>>,
    normals_cam: Grid<Option<Vector3<f64>>>,
}

fn precompute(frame: &RgbdFrame, depth_jump: f64) -> FramePrecomp {
    let (w, h) = (frame.depth.width(), frame.depth.height());
    let mut points_cam = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            if let Some(d) = frame.valid_depth_at(x, y) {
                points_cam[y * w + x] = Some(frame.intr.backproject(x as f64, y as f64, d));
            }
        }
    }
    let normals_cam = frame.compute_normals(depth_jump);
    FramePrecomp {
        points_cam,
        normals_cam,
    }
}

fn icp_residuals_inner(
    frame: &RgbdFrame,
    pre: &FramePrecomp,
    predicted: &RenderedView,
    pose: &RigidTransform,
    params: &RegistrationParams,
    with_jacobians: bool,
) -> Vec<IcpResidual> {
    let (w, h) = (frame.depth.width(), frame.depth.height());
    let cos_gate = params.normal_gate_deg.to_radians().cos();
    let model_world_to_cam = predicted.camera_pose.inverse();
    let mut out = Vec::new();
    // Frame pixels on normal creases (box edges, silhouettes) carry blended
    // normals that associate across faces with a systematic sign; exclude
    // pixels whose normal disagrees with any neighbour's.
    let crease_cos = 15.0f64.to_radians().cos();
    let crease_free = |x: usize, y: usize, n: &Vector3<f64>| -> bool {
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if !frame.depth.in_bounds(nx, ny) {
                continue;
            }
            if let Some(nn) = pre.normals_cam.get(nx as usize, ny as usize) {
                if n.dot(nn) < crease_cos {
                    return false;
                }
            }
        }
        true
    };
    for y in 0..h {
        for x in 0..w {
            let Some(p_c) = pre.points_cam[y * w + x] else { continue };
            let Some(n_c) = pre.normals_cam.get(x, y) else { continue };
            if !crease_free(x, y, n_c) {
                continue;
            }
            let w_pos = pose.apply(&p_c);
            let n_w = pose.rotate(n_c);
            // Projective association into the predicted view.
            let q_c = model_world_to_cam.apply(&w_pos);
            let Some((u, v)) = predicted.intr.project(&q_c) else { continue };
            let (px, py) = (u.round(), v.round());
            if !predicted.depth.in_bounds(px as i64, py as i64) {
                continue;
            }
            let (pxu, pyu) = (px as usize, py as usize);
            let model_depth = *predicted.depth.get(pxu, pyu);
            if model_depth <= 0.0 {
                continue;
            }
            if (q_c.z - model_depth).abs() >= params.depth_gate_m {
                continue;
            }
            let n_model = *predicted.normal_map.get(pxu, pyu);
            if n_w.dot(&n_model) <= cos_gate {
                continue;
            }
            let v_model = *predicted.point_map.get(pxu, pyu);
            let residual = (w_pos - v_model).dot(&n_model);
            let jacobian = if with_jacobians {
                let rp = pose.rotate(&p_c); // w - t
                let rot = rp.cross(&n_model);
                [n_model.x, n_model.y, n_model.z, rot.x, rot.y, rot.z]
            } else {
                [0.0; 6]
            };
            out.push(IcpResidual {
                residual,
                jacobian,
                point_cam: p_c,
                model_point: v_model,
                model_normal: n_model,
                pixel: (x, y),
            });
        }
    }
    out
}

fn rgb_residuals_inner(
    frame: &RgbdFrame,
    predicted: &RenderedView,
    pose: &RigidTransform,
    params: &RegistrationParams,
    with_jacobians: bool,
) -> Vec<RgbResidual> {
    let world_to_cam = pose.inverse();
    let rot_t = pose.rotation.transpose();
    let mut out = Vec::new();
    // Photometric samples at model depth discontinuities alias the hard
    // silhouette edges of the splat rendering; mask them out.
    let edge_free = |x: usize, y: usize, d: f64| -> bool {
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if !predicted.depth.in_bounds(nx, ny) {
                return false;
            }
            let nd = *predicted.depth.get(nx as usize, ny as usize);
            if nd <= 0.0 || (nd - d).abs() > 0.02 {
                return false;
            }
        }
        true
    };
    for y in 0..predicted.depth.height() {
        for x in 0..predicted.depth.width() {
            let model_depth = *predicted.depth.get(x, y);
            if model_depth <= 0.0 || !edge_free(x, y, model_depth) {
                continue;
            }
            let v_model = *predicted.point_map.get(x, y);
            let p_c = world_to_cam.apply(&v_model);
            if p_c.z <= 0.0 {
                continue;
            }
            let Some((u, v)) = frame.intr.project(&p_c) else { continue };
            // Occlusion gate: the warped sample must land on compatible
            // frame geometry, not on a disoccluded surface.
            let (ui, vi) = (u.round() as i64, v.round() as i64);
            if !frame.depth.in_bounds(ui, vi) {
                continue;
            }
            let frame_depth = *frame.depth.get(ui as usize, vi as usize);
            if !RgbdFrame::depth_valid(frame_depth)
                || (frame_depth - p_c.z).abs() >= params.depth_gate_m
            {
                continue;
            }
            let Some(i_frame) = frame.intensity.sample_bilinear(u, v) else { continue };
            let i_model = luma(predicted.color.get(x, y));
            let residual = i_frame - i_model;
            let jacobian = if with_jacobians {
                let (gx, gy) = frame
                    .intensity
                    .sample_bilinear_gradient(u, v)
                    .unwrap_or((0.0, 0.0));
                let z = p_c.z;
                let fx = frame.intr.fx;
                let fy = frame.intr.fy;
                // d(u,v)/dp_c rows folded with the sampled image gradient.
                let gp = Vector3::new(
                    gx * fx / z,
                    gy * fy / z,
                    -(gx * fx * p_c.x + gy * fy * p_c.y) / (z * z),
                );
                // dp_c/d(dt) = -R^T, dp_c/d(dr) = R^T [v - t]x
                let jt = -(rot_t.transpose() * gp); // (gp^T * -R^T)^T = -R * gp
                let vt = v_model - pose.translation;
                let jr_vec = rot_t.transpose() * gp;
                let jr = vt.cross(&jr_vec) * -1.0;
                [jt.x, jt.y, jt.z, jr.x, jr.y, jr.z]
            } else {
                [0.0; 6]
            };
            out.push(RgbResidual {
                residual,
                jacobian,
                model_point: v_model,
                model_intensity: i_model,
                pixel: (x, y),
            });
        }
    }
    out
}

/// Point-to-plane residuals and analytic Jacobians of the frame against the
/// predicted view under `pose`.
pub fn icp_residuals(
    frame: &RgbdFrame,
    predicted: &RenderedView,
    pose: &RigidTransform,
    params: &RegistrationParams,
) -> Vec<IcpResidual> {
    let pre = precompute(frame, 0.05);
    icp_residuals_inner(frame, &pre, predicted, pose, params, true)
}

/// Photometric residuals `I_frame(warp(pixel)) - I_model(pixel)` with
/// analytic Jacobians.
pub fn rgb_residuals(
    frame: &RgbdFrame,
    predicted: &RenderedView,
    pose: &RigidTransform,
    params: &RegistrationParams,
) -> Vec<RgbResidual> {
    rgb_residuals_inner(frame, predicted, pose, params, true)
}

fn downsample_frame(frame: &RgbdFrame) -> RgbdFrame {
    let (w, h) = (frame.depth.width() / 2, frame.depth.height() / 2);
    let mut depth = Grid::new(w, h, 0.0);
    let mut intensity = Grid::new(w, h, 0.0);
    let mut color = Grid::new(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            depth.set(x, y, *frame.depth.get(x * 2, y * 2));
            // Box-average intensity so coarse levels see an anti-aliased
            // image; depth is subsampled (averaging across edges lies).
            let sum = frame.intensity.get(x * 2, y * 2)
                + frame.intensity.get(x * 2 + 1, y * 2)
                + frame.intensity.get(x * 2, y * 2 + 1)
                + frame.intensity.get(x * 2 + 1, y * 2 + 1);
            intensity.set(x, y, sum / 4.0);
            color.set(x, y, *frame.color.get(x * 2, y * 2));
        }
    }
    let intr = crate::image::CameraIntrinsics {
        fx: frame.intr.fx / 2.0,
        fy: frame.intr.fy / 2.0,
        cx: frame.intr.cx / 2.0,
        cy: frame.intr.cy / 2.0,
        width: w,
        height: h,
    };
    RgbdFrame {
        depth,
        intensity,
        color,
        intr,
        index: frame.index,
    }
}

fn downsample_view(view: &RenderedView) -> RenderedView {
    let (w, h) = (view.depth.width() / 2, view.depth.height() / 2);
    let intr = crate::image::CameraIntrinsics {
        fx: view.intr.fx / 2.0,
        fy: view.intr.fy / 2.0,
        cx: view.intr.cx / 2.0,
        cy: view.intr.cy / 2.0,
        width: w,
        height: h,
    };
    let mut depth = Grid::new(w, h, 0.0);
    let mut color = Grid::new(w, h, [0.0; 3]);
    let mut instance_map = Grid::new(w, h, None);
    let mut surfel_index_map = Grid::new(w, h, None);
    let mut point_map = Grid::new(w, h, Vector3::zeros());
    let mut normal_map = Grid::new(w, h, Vector3::zeros());
    for y in 0..h {
        for x in 0..w {
            depth.set(x, y, *view.depth.get(x * 2, y * 2));
            color.set(x, y, *view.color.get(x * 2, y * 2));
            instance_map.set(x, y, *view.instance_map.get(x * 2, y * 2));
            surfel_index_map.set(x, y, *view.surfel_index_map.get(x * 2, y * 2));
            point_map.set(x, y, *view.point_map.get(x * 2, y * 2));
            normal_map.set(x, y, *view.normal_map.get(x * 2, y * 2));
        }
    }
    RenderedView {
        depth,
        color,
        instance_map,
        surfel_index_map,
        point_map,
        normal_map,
        camera_pose: view.camera_pose,
        intr,
    }
}

/// Estimate the camera pose that aligns `frame` to the predicted model view,
/// minimizing `E_icp + omega * E_rgb` by Gauss-Newton with step halving.
pub fn estimate_pose(
    frame: &RgbdFrame,
    predicted: &RenderedView,
    init: &RigidTransform,
    params: &RegistrationParams,
) -> Result<RegistrationResult, RegistrationError> {
    // Coarse-to-fine level stack; level 0 is full resolution.
    let levels = params.pyramid_levels.clamp(1, 3);
    let mut frames = vec![frame.clone()];
    let mut views = vec![predicted.clone()];
    for _ in 1..levels {
        frames.push(downsample_frame(frames.last().unwrap()));
        views.push(downsample_view(views.last().unwrap()));
    }

    let mut pose = *init;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_counts = (0usize, 0usize);
    let mut final_costs = (0.0, 0.0);

    // The worst tail of each residual set (splat aliasing at silhouettes,
    // curvature of the tangent-plane model) is excluded from the normal
    // equations and, with the same per-iteration thresholds, from the cost
    // used by step halving: trimmed least squares with a fixed keep
    // fraction.
    const KEEP_FRACTION: f64 = 0.9;
    let trim_threshold = |values: &mut Vec<f64>| -> f64 {
        if values.len() < 20 {
            return f64::INFINITY;
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values[((values.len() as f64 * KEEP_FRACTION).ceil() as usize - 1).min(values.len() - 1)]
    };

    for level in (0..levels).rev() {
        let frame_l = &frames[level];
        let view_l = &views[level];
        let pre = precompute(frame_l, 0.05);

        let trimmed_cost = |p: &RigidTransform, tau_icp: f64, tau_rgb: f64| -> (f64, f64) {
            let icp = icp_residuals_inner(frame_l, &pre, view_l, p, params, false);
            let rgb = rgb_residuals_inner(frame_l, view_l, p, params, false);
            (
                icp.iter()
                    .filter(|r| r.residual.abs() <= tau_icp)
                    .map(|r| r.residual * r.residual)
                    .sum(),
                rgb.iter()
                    .filter(|r| r.residual.abs() <= tau_rgb)
                    .map(|r| r.residual * r.residual)
                    .sum(),
            )
        };

        let mut icp_cost = 0.0;
        let mut rgb_cost = 0.0;
        for _ in 0..params.max_iterations {
            let icp = icp_residuals_inner(frame_l, &pre, view_l, &pose, params, true);
            let rgb = rgb_residuals_inner(frame_l, view_l, &pose, params, true);
            if icp.len() < 6 {
                return Err(RegistrationError::InsufficientCorrespondences {
                    icp: icp.len(),
                    rgb: rgb.len(),
                });
            }
            last_counts = (icp.len(), rgb.len());

            let tau_icp = trim_threshold(&mut icp.iter().map(|r| r.residual.abs()).collect());
            let tau_rgb = trim_threshold(&mut rgb.iter().map(|r| r.residual.abs()).collect());

            let mut h = nalgebra::Matrix6::<f64>::zeros();
            let mut g = Vector6::<f64>::zeros();
            let mut cost_icp0 = 0.0;
            let mut cost_rgb0 = 0.0;
            {
                let mut accumulate = |jac: &[f64; 6], r: f64, weight: f64| {
                    for i in 0..6 {
                        g[i] += weight * jac[i] * r;
                        for j in i..6 {
                            h[(i, j)] += weight * jac[i] * jac[j];
                        }
                    }
                };
                for e in &icp {
                    if e.residual.abs() <= tau_icp {
                        accumulate(&e.jacobian, e.residual, 1.0);
                        cost_icp0 += e.residual * e.residual;
                    }
                }
                for e in &rgb {
                    if e.residual.abs() <= tau_rgb {
                        accumulate(&e.jacobian, e.residual, params.omega);
                        cost_rgb0 += e.residual * e.residual;
                    }
                }
            }
            for i in 0..6 {
                for j in 0..i {
                    h[(i, j)] = h[(j, i)];
                }
            }
            icp_cost = cost_icp0;
            rgb_cost = cost_rgb0;
            let cost = cost_icp0 + params.omega * cost_rgb0;

            let delta_v = match h.cholesky() {
                Some(chol) => chol.solve(&(-g)),
                None => return Err(RegistrationError::SingularSystem),
            };
            let delta = TangentVector6::from_vector6(&delta_v);
            if delta.norm() < 1e-6 {
                iterations += 1;
                converged = true;
                break;
            }

            // Step halving on cost increase, under this iteration's trim.
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=8 {
                let scaled = TangentVector6 {
                    dt: delta.dt * alpha,
                    dr: delta.dr * alpha,
                };
                let candidate = apply_increment(&scaled, &pose);
                let (c_icp, c_rgb) = trimmed_cost(&candidate, tau_icp, tau_rgb);
                let c = c_icp + params.omega * c_rgb;
                if c <= cost {
                    accepted = Some((candidate, c, c_icp, c_rgb, scaled));
                    break;
                }
                alpha /= 2.0;
            }
            iterations += 1;
            let Some((new_pose, new_cost, new_icp, new_rgb, step)) = accepted else {
                converged = false;
                break;
            };
            let rel_decrease = (cost - new_cost) / cost.max(1e-300);
            pose = new_pose;
            icp_cost = new_icp;
            rgb_cost = new_rgb;
            if step.norm() < 1e-6 || rel_decrease < 1e-7 {
                converged = true;
                break;
            }
        }
        final_costs = (icp_cost, rgb_cost);
    }

    Ok(RegistrationResult {
        pose,
        final_cost: final_costs.0 + params.omega * final_costs.1,
        icp_cost: final_costs.0,
        rgb_cost: final_costs.1,
        iterations,
        converged,
        icp_correspondences: last_counts.0,
        rgb_correspondences: last_counts.1,
    })
}

/// Re-evaluate a frozen point-to-plane residual under a pose; the oracle
/// used by finite-difference tests and the reference ICP solver.
pub fn icp_residual_at(entry: &IcpResidual, pose: &RigidTransform) -> f64 {
    (pose.apply(&entry.point_cam) - entry.model_point).dot(&entry.model_normal)
}

#[allow(dead_code)]
fn _assert_matrix3_is_rotation(_m: &Matrix3<f64>) {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::CameraIntrinsics;
    use crate::pose::Pose6D;
    use crate::scene_sim::{PrimitiveKind, SceneSpec, SceneObjectSpec, Lighting, TrajectorySpec, RenderNoise};
    use crate::pose::PoseJson;
    use crate::surfel_map::splat_render_points;

    fn corner_scene() -> (crate::scene_sim::Scene, RigidTransform) {
        // A box seen corner-on gives three visible faces, which fully
        // constrains point-to-plane alignment.
        let spec = SceneSpec {
            labels: vec!["box".into()],
            intr: CameraIntrinsics::new(120.0, 120.0, 64.0, 48.0, 128, 96).unwrap(),
            lighting: Lighting::default(),
            trajectory: TrajectorySpec::Orbit {
                radius: 0.9,
                height: 0.5,
                target: [0.0, 0.0, 0.0],
                n_frames: 8,
            },
            objects: vec![SceneObjectSpec {
                name: "box".into(),
                class: "box".into(),
                instance: 1,
                primitive: PrimitiveKind::Box {
                    dims: [0.25, 0.2, 0.15],
                },
                sample_spacing: 0.005,
                pose: PoseJson::Euler {
                    t: [0.0, 0.0, 0.0],
                    euler_xyz: [0.0, 0.0, 0.5],
                },
                color: [0.8, 0.3, 0.2],
            }],
            background: vec![],
        };
        let scene = spec.build().unwrap();
        let pose = scene.trajectory[0];
        (scene, pose)
    }

    fn scene_view(scene: &crate::scene_sim::Scene, pose: &RigidTransform) -> RenderedView {
        splat_render_points(scene.splats().iter().copied(), pose, &scene.intr)
    }

    #[test]
    fn residuals_vanish_at_true_pose() {
        let (scene, pose) = corner_scene();
        let view = scene_view(&scene, &pose);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        let res = icp_residuals(&frame, &view, &pose, &RegistrationParams::default());
        assert!(res.len() > 100);
        for r in &res {
            assert!(r.residual.abs() < 1e-9, "residual {}", r.residual);
        }
        let rgb = rgb_residuals(&frame, &view, &pose, &RegistrationParams::default());
        assert!(rgb.len() > 100);
        for r in &rgb {
            assert!(r.residual.abs() < 1e-9);
        }
    }

    /// Model plane at z=1, frame plane at z=1.01: every point-to-plane
    /// residual equals the signed offset along the camera-facing normal.
    #[test]
    fn plane_offset_residuals() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap();
        let pose = RigidTransform::identity();
        // Model: splats on z=1 facing the camera.
        let mut splats = Vec::new();
        let mut idx = 0;
        for i in 0..40 {
            for j in 0..30 {
                splats.push((
                    idx,
                    crate::surfel_map::SplatPoint {
                        position: Vector3::new(
                            (i as f64 - 20.0) * 0.01,
                            (j as f64 - 15.0) * 0.01,
                            1.0,
                        ),
                        normal: Vector3::new(0.0, 0.0, -1.0),
                        radius: 0.01,
                        color: [0.5; 3],
                        instance: None,
                    },
                ));
                idx += 1;
            }
        }
        let view = splat_render_points(splats, &pose, &intr);
        let frame = RgbdFrame {
            depth: Grid::new(80, 60, 1.01),
            intensity: Grid::new(80, 60, 0.5),
            color: Grid::new(80, 60, [0.5; 3]),
            intr,
            index: 0,
        };
        let res = icp_residuals(&frame, &view, &pose, &RegistrationParams::default());
        assert!(res.len() > 500);
        for r in &res {
            // (w - v) . n with n = (0,0,-1): -(1.01 - 1.0) = -0.01.
            assert!((r.residual - (-0.01)).abs() < 1e-9, "residual {}", r.residual);
        }
    }

    #[test]
    fn icp_jacobians_match_finite_differences() {
        let (scene, pose) = corner_scene();
        let view = scene_view(&scene, &pose);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        // Evaluate at a slightly wrong pose so residuals are non-trivial.
        let off = Pose6D::new(0.004, -0.003, 0.002, 0.004, -0.002, 0.003).to_transform();
        let test_pose = pose.compose(&off);
        let res = icp_residuals(&frame, &view, &test_pose, &RegistrationParams::default());
        assert!(res.len() > 100);
        let h = 1e-7;
        for entry in res.iter().step_by(97) {
            for k in 0..6 {
                let mut dp = Vector6::zeros();
                dp[k] = h;
                let plus = apply_increment(&TangentVector6::from_vector6(&dp), &test_pose);
                dp[k] = -h;
                let minus = apply_increment(&TangentVector6::from_vector6(&dp), &test_pose);
                let fd = (icp_residual_at(entry, &plus) - icp_residual_at(entry, &minus)) / (2.0 * h);
                let analytic = entry.jacobian[k];
                let scale = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / scale < 1e-4,
                    "component {k}: fd={fd} analytic={analytic}"
                );
            }
        }
    }

    #[test]
    fn rgb_jacobians_match_finite_differences() {
        // A smooth bilinear-exact intensity pattern: I = a + b*u + c*v + d*u*v.
        let intr = CameraIntrinsics::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap();
        let pose = RigidTransform::identity();
        let mut splats = Vec::new();
        let mut idx = 0;
        for i in 0..40 {
            for j in 0..30 {
                let p = Vector3::new((i as f64 - 20.0) * 0.012, (j as f64 - 15.0) * 0.012, 1.0);
                splats.push((
                    idx,
                    crate::surfel_map::SplatPoint {
                        position: p,
                        normal: Vector3::new(0.0, 0.0, -1.0),
                        radius: 0.012,
                        color: [0.5; 3],
                        instance: None,
                    },
                ));
                idx += 1;
            }
        }
        let view = splat_render_points(splats, &pose, &intr);
        let mut intensity = Grid::new(80, 60, 0.0);
        for y in 0..60 {
            for x in 0..80 {
                let (u, v) = (x as f64, y as f64);
                intensity.set(x, y, 0.3 + 0.004 * u + 0.002 * v + 3e-5 * u * v);
            }
        }
        let frame = RgbdFrame {
            depth: Grid::new(80, 60, 1.0),
            intensity: intensity.clone(),
            color: Grid::new(80, 60, [0.5; 3]),
            intr,
            index: 0,
        };
        let off = Pose6D::new(0.002, 0.001, -0.002, 0.002, 0.001, -0.001).to_transform();
        let test_pose = pose.compose(&off);
        let res = rgb_residuals(&frame, &view, &test_pose, &RegistrationParams::default());
        assert!(res.len() > 500);
        let h = 1e-7;
        let eval = |entry: &RgbResidual, p: &RigidTransform| -> Option<f64> {
            let p_c = p.inverse().apply(&entry.model_point);
            let (u, v) = frame.intr.project(&p_c)?;
            Some(frame.intensity.sample_bilinear(u, v)? - entry.model_intensity)
        };
        let mut checked = 0;
        for entry in res.iter().step_by(131) {
            // Stay away from the border where gradient grids are one-sided.
            let (px, py) = entry.pixel;
            if px < 3 || px >= 77 || py < 3 || py >= 57 {
                continue;
            }
            for k in 0..6 {
                let mut dp = Vector6::zeros();
                dp[k] = h;
                let plus = apply_increment(&TangentVector6::from_vector6(&dp), &test_pose);
                dp[k] = -h;
                let minus = apply_increment(&TangentVector6::from_vector6(&dp), &test_pose);
                let (Some(rp), Some(rm)) = (eval(entry, &plus), eval(entry, &minus)) else {
                    continue;
                };
                let fd = (rp - rm) / (2.0 * h);
                let analytic = entry.jacobian[k];
                let scale = fd.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    (fd - analytic).abs() / scale < 1e-4,
                    "component {k}: fd={fd} analytic={analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn recovers_synthetic_perturbation() {
        let (scene, pose) = corner_scene();
        let view = scene_view(&scene, &pose);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        // Init 2 cm / 2 degrees off the true pose.
        let delta = TangentVector6::new(
            Vector3::new(0.012, -0.01, 0.012),
            Vector3::new(0.02, -0.02, 0.02),
        );
        let init = apply_increment(&delta, &pose);
        let result = estimate_pose(&frame, &view, &init, &RegistrationParams::default()).unwrap();
        let err = result.pose.minus(&pose);
        assert!(err.dt.norm() < 1e-3, "translation error {}", err.dt.norm());
        assert!(err.dr.norm() < 1e-3, "rotation error {}", err.dr.norm());
        // Cost decomposition identity.
        assert!(
            (result.final_cost - (result.icp_cost + 0.1 * result.rgb_cost)).abs() < 1e-9
        );
    }

    /// Full-magnitude basin check on a realistic scene: with the
    /// coarse-to-fine pyramid, noise-free solves from 5 cm / 5 degrees off
    /// land below 1e-6 m / 1e-6 rad.
    #[test]
    fn noise_free_exactness_within_basin() {
        let scene = SceneSpec::default_scene().build().unwrap();
        let pose = scene.trajectory[0];
        let view = splat_render_points(scene.splats().iter().copied(), &pose, &scene.intr);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        let params = RegistrationParams {
            max_iterations: 30,
            pyramid_levels: 3,
            ..Default::default()
        };
        for (dt, dr) in [
            (Vector3::new(0.03, -0.02, 0.028), Vector3::new(0.05, -0.045, 0.05)),
            (Vector3::new(-0.04, 0.012, -0.028), Vector3::new(-0.03, 0.06, 0.04)),
        ] {
            let dt = dt.normalize() * 0.05;
            let dr = dr.normalize() * 5.0f64.to_radians();
            let init = apply_increment(&TangentVector6::new(dt, dr), &pose);
            let result = estimate_pose(&frame, &view, &init, &params).unwrap();
            assert!(result.converged, "no convergence from {dt:?} {dr:?}");
            let err = result.pose.minus(&pose);
            assert!(err.dt.norm() < 1e-6, "translation error {}", err.dt.norm());
            assert!(err.dr.norm() < 1e-6, "rotation error {}", err.dr.norm());
        }
    }

    #[test]
    fn already_optimal_init_converges_immediately() {
        let (scene, pose) = corner_scene();
        let view = scene_view(&scene, &pose);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        let result = estimate_pose(&frame, &view, &pose, &RegistrationParams::default()).unwrap();
        assert!(result.converged);
        assert_eq!(result.iterations, 1);
        let err = result.pose.minus(&pose);
        assert!(err.dt.norm() < 1e-9 && err.dr.norm() < 1e-9);
    }

    #[test]
    fn icp_only_matches_reference_gauss_newton() {
        // With omega = 0 the solver must agree with an independent
        // point-to-plane Gauss-Newton built on the same correspondences.
        let (scene, pose) = corner_scene();
        let view = scene_view(&scene, &pose);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        let delta = TangentVector6::new(
            Vector3::new(0.01, -0.008, 0.01),
            Vector3::new(0.015, -0.01, 0.015),
        );
        let init = apply_increment(&delta, &pose);
        let params = RegistrationParams {
            omega: 0.0,
            ..Default::default()
        };
        let result = estimate_pose(&frame, &view, &init, &params).unwrap();

        // Reference: re-associate each iteration via the public residual op,
        // then solve the normal equations with a plain matrix inverse.
        let mut ref_pose = init;
        for _ in 0..params.max_iterations {
            let res = icp_residuals(&frame, &view, &ref_pose, &params);
            let mut h = nalgebra::Matrix6::<f64>::zeros();
            let mut g = Vector6::<f64>::zeros();
            for e in &res {
                let j = Vector6::from_row_slice(&e.jacobian);
                h += j * j.transpose();
                g += j * e.residual;
            }
            let delta = h.try_inverse().unwrap() * (-g);
            ref_pose = apply_increment(&TangentVector6::from_vector6(&delta), &ref_pose);
            if delta.norm() < 1e-10 {
                break;
            }
        }
        let diff = result.pose.minus(&ref_pose);
        assert!(diff.dt.norm() < 1e-6, "translation gap {}", diff.dt.norm());
        assert!(diff.dr.norm() < 1e-6, "rotation gap {}", diff.dr.norm());
    }

    #[test]
    fn rejects_empty_predicted_view() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 40.0, 30.0, 80, 60).unwrap();
        let view = splat_render_points(std::iter::empty(), &RigidTransform::identity(), &intr);
        let frame = RgbdFrame {
            depth: Grid::new(80, 60, 1.0),
            intensity: Grid::new(80, 60, 0.5),
            color: Grid::new(80, 60, [0.5; 3]),
            intr,
            index: 0,
        };
        let err = estimate_pose(
            &frame,
            &view,
            &RigidTransform::identity(),
            &RegistrationParams::default(),
        );
        assert!(matches!(
            err,
            Err(RegistrationError::InsufficientCorrespondences { .. })
        ));
    }

    #[test]
    fn pyramid_smoke_test() {
        let (scene, pose) = corner_scene();
        let view = scene_view(&scene, &pose);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        let delta = TangentVector6::new(
            Vector3::new(0.02, 0.0, -0.02),
            Vector3::new(0.0, 0.03, 0.0),
        );
        let init = apply_increment(&delta, &pose);
        let params = RegistrationParams {
            pyramid_levels: 3,
            ..Default::default()
        };
        let result = estimate_pose(&frame, &view, &init, &params).unwrap();
        let err = result.pose.minus(&pose);
        assert!(err.dt.norm() < 2e-3, "translation error {}", err.dt.norm());
        assert!(err.dr.norm() < 2e-3);
    }

    #[test]
    fn descent_is_monotone() {
        let (scene, pose) = corner_scene();
        let view = scene_view(&scene, &pose);
        let frame = scene.render_frame(0, &RenderNoise::default(), 0).unwrap().frame;
        let delta = TangentVector6::new(
            Vector3::new(0.02, 0.01, -0.015),
            Vector3::new(0.02, -0.01, 0.02),
        );
        let init = apply_increment(&delta, &pose);
        let params = RegistrationParams::default();
        let pre = precompute(&frame, 0.05);
        let cost_at = |p: &RigidTransform| -> f64 {
            let icp = icp_residuals_inner(&frame, &pre, &view, p, &params, false);
            let rgb = rgb_residuals_inner(&frame, &view, p, &params, false);
            icp.iter().map(|r| r.residual * r.residual).sum::<f64>()
                + params.omega * rgb.iter().map(|r| r.residual * r.residual).sum::<f64>()
        };
        let result = estimate_pose(&frame, &view, &init, &params).unwrap();
        assert!(cost_at(&result.pose) <= cost_at(&init) + 1e-12);
    }
        }
