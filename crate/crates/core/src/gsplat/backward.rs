use nalgebra::{Matrix2, Matrix3, Vector3};

use super::project::{clamped_ratios, project_scene, projection_jacobian, Projected};
use super::raster::Bins;
use super::{rotation_of, sh, GaussianScene, GaussianSet, RenderConfig};
use crate::exec::map_range;
use crate::geometry::{normalize_quat, PinholeCamera};
use crate::{Error, Result};

/// Upstream gradient of a scalar loss with respect to each render output.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`, row-major.
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
    pub object_alpha: Vec<f64>,
}

impl RenderGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        RenderGrad {
            width,
            height,
            rgb: vec![0.0; n * 3],
            depth: vec![0.0; n],
            opacity: vec![0.0; n],
            object_alpha: vec![0.0; n],
        }
    }

    /// Adds `other` elementwise.
    pub fn accumulate(&mut self, other: &RenderGrad) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::ShapeMismatch(format!(
                "gradient {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        for (a, b) in [
            (&mut self.rgb, &other.rgb),
            (&mut self.depth, &other.depth),
            (&mut self.opacity, &other.opacity),
            (&mut self.object_alpha, &other.object_alpha),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

/// Gradients laid out like [`GaussianSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros_like(set: &GaussianSet) -> Self {
        let n = set.len();
        GaussianGrads {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; set.sh.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        let flat = self
            .positions
            .iter()
            .flatten()
            .chain(self.rotations.iter().flatten())
            .chain(self.log_scales.iter().flatten())
            .chain(&self.opacity_logits)
            .chain(&self.sh);
        flat.fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PoseCorrectionGrad {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectGrads {
    pub gaussians: GaussianGrads,
    /// One per tracklet keyframe.
    pub corrections: Vec<PoseCorrectionGrad>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub background: GaussianGrads,
    pub objects: Vec<ObjectGrads>,
    /// Same layout as `SkyCubemap::texels`.
    pub sky: Vec<f64>,
    /// Screen-space mean gradient norm in NDC units, per global index.
    pub view_grad_norm: Vec<f64>,
    /// Whether the Gaussian survived culling, per global index.
    pub visible: Vec<bool>,
}

impl SceneGrads {
    pub fn zeros_like(scene: &GaussianScene) -> Self {
        SceneGrads {
            background: GaussianGrads::zeros_like(&scene.background),
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectGrads {
                    gaussians: GaussianGrads::zeros_like(&o.gaussians),
                    corrections: vec![PoseCorrectionGrad::default(); o.corrections.len()],
                })
                .collect(),
            sky: vec![0.0; scene.sky.texels.len()],
            view_grad_norm: vec![0.0; scene.gaussian_count()],
            visible: vec![false; scene.gaussian_count()],
        }
    }

    /// Largest absolute parameter gradient, excluding the densification
    /// statistics.
    pub fn max_abs(&self) -> f64 {
        let mut m = self.background.max_abs();
        for o in &self.objects {
            m = m.max(o.gaussians.max_abs());
            for c in &o.corrections {
                for v in c.translation.iter().chain(&c.rotation) {
                    m = m.max(v.abs());
                }
            }
        }
        self.sky.iter().fold(m, |m, v| m.max(v.abs()))
    }
}

/// Screen-space gradients of one projected Gaussian.
const D_U: usize = 0;
const D_V: usize = 1;
const D_A: usize = 2;
const D_B: usize = 3;
const D_C: usize = 4;
const D_ALPHA0: usize = 5;
const D_COLOR: usize = 6;
const D_DEPTH: usize = 9;
type ScreenGrad = [f64; 10];

struct Contributor {
    slot: usize,
    alpha: f64,
    trans: f64,
    gauss: f64,
    dx: f64,
    dy: f64,
    clamped: bool,
}

/// Per-tile pass: replays compositing for each pixel and sweeps back to
/// front. Returns partial gradients aligned with the tile's list.
fn tile_backward(
    t: usize,
    bins: &Bins,
    proj: &[Projected],
    camera: &PinholeCamera,
    sky: &super::SkyCubemap,
    cfg: &RenderConfig,
    grad: &RenderGrad,
) -> Vec<ScreenGrad> {
    let (x0, x1, y0, y1) = bins.bounds(t, camera.width(), camera.height());
    let w = camera.width();
    let list = &bins.lists[t];
    let mut partial = vec![[0.0; 10]; list.len()];
    let extent2 = cfg.extent_sigma * cfg.extent_sigma;
    let mut contrib: Vec<Contributor> = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64, y as f64);
            contrib.clear();
            let mut trans = 1.0;
            for (slot, &k) in list.iter().enumerate() {
                let g = &proj[k as usize];
                let dx = px - g.mean[0];
                let dy = py - g.mean[1];
                let [a, b, c] = g.conic;
                let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
                if m > extent2 {
                    continue;
                }
                let gauss = (-0.5 * m).exp();
                let raw = g.alpha0 * gauss;
                let alpha = raw.min(cfg.alpha_max);
                if alpha < cfg.alpha_min {
                    continue;
                }
                let next = trans * (1.0 - alpha);
                if next < cfg.min_transmittance {
                    break;
                }
                contrib.push(Contributor {
                    slot,
                    alpha,
                    trans,
                    gauss,
                    dx,
                    dy,
                    clamped: raw > cfg.alpha_max,
                });
                trans = next;
            }
            if contrib.is_empty() {
                continue;
            }
            let i = y * w + x;
            let g_rgb = [grad.rgb[i * 3], grad.rgb[i * 3 + 1], grad.rgb[i * 3 + 2]];
            let skyc = sky.sample(&camera.ray_direction(px, py));
            let g_o = grad.opacity[i] - (0..3).map(|c| skyc[c] * g_rgb[c]).sum::<f64>();
            let (g_d, g_obj) = (grad.depth[i], grad.object_alpha[i]);

            let mut behind = 0.0;
            for ct in contrib.iter().rev() {
                let g = &proj[list[ct.slot] as usize];
                let v = g_rgb[0] * g.color[0]
                    + g_rgb[1] * g.color[1]
                    + g_rgb[2] * g.color[2]
                    + g_d * g.depth
                    + g_o
                    + if g.is_object { g_obj } else { 0.0 };
                let weight = ct.alpha * ct.trans;
                let d_alpha = v * ct.trans - behind / (1.0 - ct.alpha);
                behind += v * weight;

                let p = &mut partial[ct.slot];
                for c in 0..3 {
                    p[D_COLOR + c] += g_rgb[c] * weight;
                }
                p[D_DEPTH] += g_d * weight;
                if ct.clamped {
                    continue;
                }
                p[D_ALPHA0] += d_alpha * ct.gauss;
                let d_m = -0.5 * ct.alpha * d_alpha;
                let [a, b, c] = g.conic;
                let (dx, dy) = (ct.dx, ct.dy);
                p[D_A] += d_m * dx * dx;
                p[D_B] += d_m * 2.0 * dx * dy;
                p[D_C] += d_m * dy * dy;
                p[D_U] += -2.0 * (a * dx + b * dy) * d_m;
                p[D_V] += -2.0 * (b * dx + c * dy) * d_m;
            }
        }
    }
    partial
}

/// Gradient of a projected Gaussian with respect to its world-space
/// mean and covariance, opacity logit and SH coefficients.
struct WorldGrad {
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
    logit: f64,
    sh: Vec<f64>,
    view_norm: f64,
}

fn chain_projection(
    g: &Projected,
    s: &ScreenGrad,
    camera: &PinholeCamera,
    sh_degree: u32,
    sh_coeffs: &[f64],
    cfg: &RenderConfig,
) -> WorldGrad {
    let k = &camera.intrinsics;
    let [a, b, c] = g.conic;
    let conic = Matrix2::new(a, b, b, c);

    // Opacity and mip compensation.
    let sig = g.opacity;
    let logit = s[D_ALPHA0] * g.comp * sig * (1.0 - sig);
    let d_comp = s[D_ALPHA0] * sig;

    // Conic to filtered covariance, then to the unfiltered one.
    let g_conic = Matrix2::new(s[D_A], 0.5 * s[D_B], 0.5 * s[D_B], s[D_C]);
    let mut d_cov2d = -(conic * g_conic * conic);
    if cfg.mip_filter {
        let det = g.cov2d.determinant();
        if det > 0.0 && g.comp > 0.0 {
            let inv = Matrix2::new(g.cov2d[(1, 1)], -g.cov2d[(0, 1)], -g.cov2d[(1, 0)], g.cov2d[(0, 0)]) / det;
            d_cov2d += (inv - conic) * (0.5 * d_comp * g.comp);
        }
    }

    // EWA: Σ* = J Σc Jᵀ.
    let pc = g.pc;
    let j = projection_jacobian(k, &pc);
    let d_cov_cam = j.transpose() * d_cov2d * j;
    let d_j = 2.0 * d_cov2d * j * g.cov_cam;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (iz, iz2) = (1.0 / z, 1.0 / (z * z));
    let ([rx, ry], clamped) = clamped_ratios(k, &pc);
    // J02 = -fx·rx/z with rx = x/z unless clamped to a constant.
    let (dj02_dx, dj02_dz) = if clamped[0] {
        (0.0, k.fx * rx * iz2)
    } else {
        (-k.fx * iz2, 2.0 * k.fx * rx * iz2)
    };
    let (dj12_dy, dj12_dz) = if clamped[1] {
        (0.0, k.fy * ry * iz2)
    } else {
        (-k.fy * iz2, 2.0 * k.fy * ry * iz2)
    };
    let mut d_pc = Vector3::new(
        d_j[(0, 2)] * dj02_dx,
        d_j[(1, 2)] * dj12_dy,
        d_j[(0, 0)] * (-k.fx * iz2) + d_j[(0, 2)] * dj02_dz + d_j[(1, 1)] * (-k.fy * iz2) + d_j[(1, 2)] * dj12_dz,
    );
    d_pc.x += s[D_U] * k.fx * iz;
    d_pc.y += s[D_V] * k.fy * iz;
    d_pc.z += -s[D_U] * k.fx * x * iz2 - s[D_V] * k.fy * y * iz2;
    d_pc.z += s[D_DEPTH];

    let w = camera.world_to_camera.rotation;
    let cov = w.transpose() * d_cov_cam * w;
    let mut mean = w.transpose() * d_pc;

    // View-dependent color.
    let n_coef = sh::coeff_count(sh_degree);
    let mut d_raw = [0.0; 3];
    for ch in 0..3 {
        if g.color_raw[ch] > 0.0 {
            d_raw[ch] = s[D_COLOR + ch];
        }
    }
    let basis = sh::basis(sh_degree, g.dir);
    let mut d_sh = vec![0.0; n_coef * 3];
    for kk in 0..n_coef {
        for ch in 0..3 {
            d_sh[kk * 3 + ch] = d_raw[ch] * basis[kk];
        }
    }
    if sh_degree > 0 && g.dir_len > 0.0 {
        let bg = sh::basis_grad(sh_degree, g.dir);
        let mut d_dir = Vector3::zeros();
        for kk in 1..n_coef {
            let wk: f64 = (0..3).map(|ch| d_raw[ch] * sh_coeffs[kk * 3 + ch]).sum();
            d_dir += Vector3::from(bg[kk]) * wk;
        }
        let d = Vector3::from(g.dir);
        mean += (d_dir - d * d.dot(&d_dir)) / g.dir_len;
    }

    let view_norm = (s[D_U] * 0.5 * k.width as f64).hypot(s[D_V] * 0.5 * k.height as f64);
    WorldGrad {
        mean,
        cov,
        logit,
        sh: d_sh,
        view_norm,
    }
}

/// `∂R/∂q` for the unnormalized-quaternion rotation matrix, `q = [w,x,y,z]`.
fn rotation_partials(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Pulls `dL/dR(q̂)` back to the stored (unnormalized) quaternion.
pub(crate) fn quaternion_grad(q: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let qn = normalize_quat(q);
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let parts = rotation_partials(qn);
    let dq: [f64; 4] = std::array::from_fn(|i| parts[i].component_mul(d_r).sum());
    let dot: f64 = (0..4).map(|i| qn[i] * dq[i]).sum();
    std::array::from_fn(|i| (dq[i] - qn[i] * dot) / norm)
}

/// Pulls `dL/dΣ` back to `(q, log s)` for `Σ = R S² Rᵀ`.
fn covariance_grad(q: [f64; 4], log_scale: [f64; 3], d_cov: &Matrix3<f64>) -> ([f64; 4], [f64; 3]) {
    let r = rotation_of(q);
    let s = Vector3::from(log_scale.map(f64::exp));
    let m = r * Matrix3::from_diagonal(&s);
    let d_m = 2.0 * d_cov * m;
    let d_r = d_m * Matrix3::from_diagonal(&s);
    let rtdm = r.transpose() * d_m;
    let d_log = [0, 1, 2].map(|j| rtdm[(j, j)] * s[j]);
    (quaternion_grad(q, &d_r), d_log)
}

fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Analytic gradients of a scalar loss through [`super::render`].
///
/// `grad` holds `dL/d(output)` for each render output. Per-tile partial
/// sums are reduced in tile order, so the result does not depend on the
/// parallelism setting.
pub fn render_backward(
    scene: &GaussianScene,
    camera: &PinholeCamera,
    t: f64,
    cfg: &RenderConfig,
    grad: &RenderGrad,
) -> Result<SceneGrads> {
    let (w, h) = (camera.width(), camera.height());
    if (grad.width, grad.height) != (w, h) {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {}x{} vs camera {}x{}",
            grad.width, grad.height, w, h
        )));
    }
    let proj = project_scene(scene, camera, t, cfg)?;
    let bins = Bins::build(&proj, w, h, cfg.tile_size);
    let sky = &scene.sky;

    let partials = map_range(cfg.parallelism, bins.len(), |ti| {
        tile_backward(ti, &bins, &proj, camera, sky, cfg, grad)
    });
    let mut screen = vec![[0.0; 10]; proj.len()];
    for (ti, part) in partials.iter().enumerate() {
        for (slot, &k) in bins.lists[ti].iter().enumerate() {
            let acc = &mut screen[k as usize];
            for (a, p) in acc.iter_mut().zip(&part[slot]) {
                *a += p;
            }
        }
    }

    let mut out = SceneGrads::zeros_like(scene);

    // Sky texels: rgb gets (1 - O) times the bilinear sample.
    let opacity = super::render_projected::<f64>(&proj, sky, camera, cfg).opacity;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rest = 1.0 - opacity[i];
            if rest == 0.0 {
                continue;
            }
            for (texel, wt) in sky.taps(&camera.ray_direction(x as f64, y as f64)) {
                for c in 0..3 {
                    out.sky[texel * 3 + c] += rest * wt * grad.rgb[i * 3 + c];
                }
            }
        }
    }

    let sets: Vec<&GaussianSet> = scene.sets().collect();
    let world = map_range(cfg.parallelism, proj.len(), |i| {
        let g = &proj[i];
        let set = sets[g.set as usize];
        chain_projection(g, &screen[i], camera, scene.sh_degree, set.sh_of(g.local as usize), cfg)
    });

    // Object poses at t, for pulling gradients back to canonical frames.
    let poses: Vec<Option<super::ObjectPose>> = scene
        .objects
        .iter()
        .map(|o| if o.present_at(t) { o.pose_at(t).ok() } else { None })
        .collect();
    let mut pose_grads = vec![(Matrix3::<f64>::zeros(), Vector3::<f64>::zeros()); scene.objects.len()];

    // Reduce per-Gaussian results in global index order.
    let mut order: Vec<usize> = (0..proj.len()).collect();
    order.sort_by_key(|&i| proj[i].global);
    for i in order {
        let g = &proj[i];
        let wg = &world[i];
        out.visible[g.global as usize] = true;
        out.view_grad_norm[g.global as usize] = wg.view_norm;
        let local = g.local as usize;
        let (set, grads, d_mean, d_cov) = if g.set == 0 {
            (&scene.background, &mut out.background, wg.mean, symmetrize(&wg.cov))
        } else {
            let k = g.set as usize - 1;
            let node = &scene.objects[k];
            let pose = poses[k].as_ref().expect("projected object has a pose").pose;
            let p = pose.rotation;
            let d_cov_w = symmetrize(&wg.cov);
            let mu_c = Vector3::from(node.gaussians.positions[local]);
            let s = node.gaussians.log_scales[local].map(f64::exp);
            let cov_c = super::covariance_world(node.gaussians.rotations[local], s);
            let (d_p, d_t) = &mut pose_grads[k];
            *d_p += 2.0 * d_cov_w * p * cov_c + wg.mean * mu_c.transpose();
            *d_t += wg.mean;
            (
                &node.gaussians,
                &mut out.objects[k].gaussians,
                p.transpose() * wg.mean,
                p.transpose() * d_cov_w * p,
            )
        };
        for a in 0..3 {
            grads.positions[local][a] += d_mean[a];
        }
        let (dq, dls) = covariance_grad(set.rotations[local], set.log_scales[local], &d_cov);
        for a in 0..4 {
            grads.rotations[local][a] += dq[a];
        }
        for a in 0..3 {
            grads.log_scales[local][a] += dls[a];
        }
        grads.opacity_logits[local] += wg.logit;
        let stride = set.sh_stride();
        for (dst, src) in grads.sh[local * stride..(local + 1) * stride].iter_mut().zip(&wg.sh) {
            *dst += src;
        }
    }

    for (k, (d_p, d_t)) in pose_grads.into_iter().enumerate() {
        let Some(pose) = poses[k] else { continue };
        let node = &scene.objects[k];
        let corr = &node.corrections[pose.correction];
        let d_rc = pose.base.rotation.transpose() * d_p;
        let dq = quaternion_grad(corr.rotation, &d_rc);
        let cg = &mut out.objects[k].corrections[pose.correction];
        for a in 0..3 {
            cg.translation[a] += d_t[a];
        }
        for a in 0..4 {
            cg.rotation[a] += dq[a];
        }
    }
    Ok(out)
}
