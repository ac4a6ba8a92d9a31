use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use super::{rotation_of, sh, sigmoid, GaussianScene, GaussianSet, ObjectNode, RenderConfig};
use crate::exec::map_range;
use crate::geometry::{matrix_to_quat, normalize_quat, quat_mul, CameraIntrinsics, PinholeCamera, Se3Pose};
use crate::{Error, Result};

/// Screen-space dilation (px²) of the 2D mip filter.
pub const DEFAULT_MIP_DILATION: f64 = 0.3;

/// `Σ = R(q) diag(s)² R(q)ᵀ`.
pub fn covariance_world(q: [f64; 4], scale: [f64; 3]) -> Matrix3<f64> {
    let m = rotation_of(q) * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

/// Ratios `x/z`, `y/z` clamped to 1.3 times the half field of view, and
/// whether each was clamped. Keeps the affine approximation bounded for
/// Gaussians far outside the frustum.
pub(crate) fn clamped_ratios(k: &CameraIntrinsics, pc: &Vector3<f64>) -> ([f64; 2], [bool; 2]) {
    let (w, h) = (k.width as f64, k.height as f64);
    let margin_x = 0.3 * 0.5 * w / k.fx;
    let margin_y = 0.3 * 0.5 * h / k.fy;
    let clamp = |r: f64, lo: f64, hi: f64| (r.clamp(lo, hi), r < lo || r > hi);
    let (rx, cx) = clamp(pc.x / pc.z, -k.cx / k.fx - margin_x, (w - k.cx) / k.fx + margin_x);
    let (ry, cy) = clamp(pc.y / pc.z, -k.cy / k.fy - margin_y, (h - k.cy) / k.fy + margin_y);
    ([rx, ry], [cx, cy])
}

/// Jacobian of the perspective projection at camera-frame point `pc`, with
/// the off-axis ratios clamped.
pub(crate) fn projection_jacobian(k: &CameraIntrinsics, pc: &Vector3<f64>) -> Matrix2x3<f64> {
    let ([rx, ry], _) = clamped_ratios(k, pc);
    let iz = 1.0 / pc.z;
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * rx * iz, 0.0, k.fy * iz, -k.fy * ry * iz)
}

/// Screen-space covariance `Σ* = J W Σ Wᵀ Jᵀ` of a world Gaussian at `mean`.
pub fn project_covariance(
    cov: &Matrix3<f64>,
    world_to_camera: &Se3Pose,
    k: &CameraIntrinsics,
    mean: &Vector3<f64>,
    near: f64,
) -> Result<Matrix2<f64>> {
    let pc = world_to_camera.transform_point(mean);
    if pc.z <= near {
        return Err(Error::BehindCamera(pc.z));
    }
    let w = world_to_camera.rotation;
    let j = projection_jacobian(k, &pc);
    Ok(j * (w * cov * w.transpose()) * j.transpose())
}

/// Adds `dilation·I` and returns the opacity compensation
/// `sqrt(det Σ* / det(Σ* + dilation·I))`.
pub fn apply_mip_filter(cov2d: &Matrix2<f64>, dilation: f64) -> (Matrix2<f64>, f64) {
    let filtered = cov2d + Matrix2::identity() * dilation;
    let det = cov2d.determinant().max(0.0);
    let det_f = filtered.determinant();
    let comp = if det_f > 0.0 { (det / det_f).sqrt() } else { 0.0 };
    (filtered, comp)
}

/// Object Gaussians mapped to world space at time `t`:
/// `μ̂ = R μ + t`, `R̂ = R R_g`. Scales, opacities and SH are unchanged.
pub fn warp_object(node: &ObjectNode, t: f64) -> Result<GaussianSet> {
    let pose = node.pose_at(t)?.pose;
    Ok(warp_set(&node.gaussians, &pose))
}

pub(crate) fn warp_set(set: &GaussianSet, pose: &Se3Pose) -> GaussianSet {
    let qp = matrix_to_quat(&pose.rotation);
    let mut out = set.clone();
    for (p, q) in out.positions.iter_mut().zip(out.rotations.iter_mut()) {
        let w = pose.transform_point(&Vector3::from(*p));
        *p = [w.x, w.y, w.z];
        *q = quat_mul(qp, normalize_quat(*q));
    }
    out
}

/// A Gaussian after projection, with the intermediates the backward pass
/// needs.
#[derive(Debug, Clone)]
pub struct Projected {
    pub global: u32,
    /// 0 for background, `k + 1` for object `k`.
    pub set: u32,
    pub local: u32,
    pub is_object: bool,
    pub mean: [f64; 2],
    /// Inverse of the filtered screen covariance as `(a, b, c)` for
    /// `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// `sigmoid(logit) · mip compensation`.
    pub alpha0: f64,
    pub color: [f64; 3],
    pub depth: f64,
    /// Pixel radius enclosing the footprint cutoff.
    pub radius: f64,
    pub(crate) opacity: f64,
    pub(crate) comp: f64,
    pub(crate) pc: Vector3<f64>,
    pub(crate) cov_cam: Matrix3<f64>,
    pub(crate) cov2d: Matrix2<f64>,
    pub(crate) color_raw: [f64; 3],
    pub(crate) dir: [f64; 3],
    pub(crate) dir_len: f64,
}

struct WorldGaussian<'a> {
    global: u32,
    set: u32,
    local: u32,
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
    logit: f64,
    sh: &'a [f64],
}

fn world_gaussians<'a>(scene: &'a GaussianScene, t: f64) -> Result<Vec<WorldGaussian<'a>>> {
    let mut out = Vec::with_capacity(scene.gaussian_count());
    let bg = &scene.background;
    for i in 0..bg.len() {
        let s = bg.log_scales[i].map(f64::exp);
        out.push(WorldGaussian {
            global: i as u32,
            set: 0,
            local: i as u32,
            mean: Vector3::from(bg.positions[i]),
            cov: covariance_world(bg.rotations[i], s),
            logit: bg.opacity_logits[i],
            sh: bg.sh_of(i),
        });
    }
    let mut offset = bg.len();
    for (k, node) in scene.objects.iter().enumerate() {
        let set = &node.gaussians;
        if node.present_at(t) {
            let pose = node.pose_at(t)?.pose;
            let r = pose.rotation;
            for i in 0..set.len() {
                let s = set.log_scales[i].map(f64::exp);
                out.push(WorldGaussian {
                    global: (offset + i) as u32,
                    set: k as u32 + 1,
                    local: i as u32,
                    mean: pose.transform_point(&Vector3::from(set.positions[i])),
                    cov: r * covariance_world(set.rotations[i], s) * r.transpose(),
                    logit: set.opacity_logits[i],
                    sh: set.sh_of(i),
                });
            }
        }
        offset += set.len();
    }
    Ok(out)
}

fn project_one(
    g: &WorldGaussian<'_>,
    camera: &PinholeCamera,
    center: &Vector3<f64>,
    sh_degree: u32,
    cfg: &RenderConfig,
) -> Option<Projected> {
    let k = &camera.intrinsics;
    let w = camera.world_to_camera.rotation;
    let pc = camera.world_to_camera.transform_point(&g.mean);
    if !(pc.z > cfg.near) {
        return None;
    }
    let cov_cam = w * g.cov * w.transpose();
    let j = projection_jacobian(k, &pc);
    let cov2d = j * cov_cam * j.transpose();
    let (filtered, comp) = if cfg.mip_filter {
        apply_mip_filter(&cov2d, cfg.mip_dilation)
    } else {
        (cov2d, 1.0)
    };
    let det = filtered.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [filtered[(1, 1)] / det, -filtered[(0, 1)] / det, filtered[(0, 0)] / det];
    let mid = 0.5 * (filtered[(0, 0)] + filtered[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = cfg.extent_sigma * lambda_max.sqrt();
    let (u, v) = camera.project_camera_point(&pc);
    let (wd, ht) = (camera.width() as f64, camera.height() as f64);
    if u + radius < -1.0 || v + radius < -1.0 || u - radius > wd || v - radius > ht {
        return None;
    }

    let dv = g.mean - center;
    let dir_len = dv.norm();
    let dir = if dir_len > 0.0 {
        [dv.x / dir_len, dv.y / dir_len, dv.z / dir_len]
    } else {
        [0.0, 0.0, 1.0]
    };
    let color_raw = sh::eval_raw(sh_degree, g.sh, dir);
    let opacity = sigmoid(g.logit);
    Some(Projected {
        global: g.global,
        set: g.set,
        local: g.local,
        is_object: g.set > 0,
        mean: [u, v],
        conic,
        alpha0: opacity * comp,
        color: color_raw.map(|c| c.max(0.0)),
        depth: pc.z,
        radius,
        opacity,
        comp,
        pc,
        cov_cam,
        cov2d,
        color_raw,
        dir,
        dir_len,
    })
}

/// Projects every visible Gaussian and sorts by `(depth, global index)`.
pub fn project_scene(
    scene: &GaussianScene,
    camera: &PinholeCamera,
    t: f64,
    cfg: &RenderConfig,
) -> Result<Vec<Projected>> {
    let world = world_gaussians(scene, t)?;
    let center = camera.center();
    let mut out: Vec<Projected> = map_range(cfg.parallelism, world.len(), |i| {
        project_one(&world[i], camera, &center, scene.sh_degree, cfg)
    })
    .into_iter()
    .flatten()
    .collect();
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.global.cmp(&b.global)));
    Ok(out)
}
