//! Brute-force renderer: every pixel visits every projected Gaussian in a
//! freshly sorted order, with no tiles and no bounding radii. Kept as a
//! permanent fixture for checking the tiled path.

use super::project::Projected;
use super::{GaussianScene, RenderConfig, RenderOutput};
use crate::geometry::PinholeCamera;
use crate::image::ImageBuf;
use crate::Result;

/// One compositing contribution at a pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub global: u32,
    pub weight: f64,
    pub color: [f64; 3],
    pub is_object: bool,
}

/// Front-to-back contributions at pixel `(x, y)`. `sorted` must be
/// ordered by `(depth, global)`.
pub fn pixel_contributions(sorted: &[&Projected], x: f64, y: f64, cfg: &RenderConfig) -> Vec<Contribution> {
    let mut out = Vec::new();
    let mut trans = 1.0;
    let cutoff = cfg.extent_sigma * cfg.extent_sigma;
    for g in sorted {
        let d = [x - g.mean[0], y - g.mean[1]];
        let q = [
            g.conic[0] * d[0] + g.conic[1] * d[1],
            g.conic[1] * d[0] + g.conic[2] * d[1],
        ];
        let m = d[0] * q[0] + d[1] * q[1];
        if m > cutoff {
            continue;
        }
        let alpha = f64::min(cfg.alpha_max, g.alpha0 * (-m / 2.0).exp());
        if alpha < cfg.alpha_min {
            continue;
        }
        if trans * (1.0 - alpha) < cfg.min_transmittance {
            break;
        }
        out.push(Contribution {
            global: g.global,
            weight: alpha * trans,
            color: g.color,
            is_object: g.is_object,
        });
        trans *= 1.0 - alpha;
    }
    out
}

/// Renders projected Gaussians pixel by pixel.
pub fn render_reference_projected(
    proj: &[Projected],
    sky: &super::SkyCubemap,
    camera: &PinholeCamera,
    cfg: &RenderConfig,
) -> RenderOutput {
    let mut sorted: Vec<&Projected> = proj.iter().collect();
    sorted.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.global.cmp(&b.global)));
    let depth_of = |global: u32| sorted.iter().find(|g| g.global == global).map(|g| g.depth).unwrap();
    let (w, h) = (camera.width(), camera.height());
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb: ImageBuf::new(w, h, 3),
        depth: vec![0.0; w * h],
        opacity: vec![0.0; w * h],
        object_alpha: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let contrib = pixel_contributions(&sorted, x as f64, y as f64, cfg);
            let mut rgb = [0.0; 3];
            let (mut d, mut o, mut oo) = (0.0, 0.0, 0.0);
            for c in &contrib {
                for k in 0..3 {
                    rgb[k] += c.weight * c.color[k];
                }
                d += c.weight * depth_of(c.global);
                o += c.weight;
                if c.is_object {
                    oo += c.weight;
                }
            }
            let s = sky.sample(&camera.ray_direction(x as f64, y as f64));
            for k in 0..3 {
                out.rgb.set(x, y, k, rgb[k] + (1.0 - o) * s[k]);
            }
            let i = y * w + x;
            out.depth[i] = d;
            out.opacity[i] = o;
            out.object_alpha[i] = oo;
        }
    }
    out
}

pub fn render_reference(
    scene: &GaussianScene,
    camera: &PinholeCamera,
    t: f64,
    cfg: &RenderConfig,
) -> Result<RenderOutput> {
    let proj = super::project_scene(scene, camera, t, cfg)?;
    Ok(render_reference_projected(&proj, &scene.sky, camera, cfg))
}
