use num_traits::Float;

use super::cubemap::SkyCubemap;
use super::project::{project_scene, Projected};
use super::{GaussianScene, RenderConfig, RenderOutput};
use crate::exec::map_range;
use crate::geometry::PinholeCamera;
use crate::image::ImageBuf;
use crate::Result;

/// Per-tile lists of indices into the depth-sorted projection list.
pub(crate) struct Bins {
    pub tiles_x: usize,
    pub tile: usize,
    pub lists: Vec<Vec<u32>>,
}

impl Bins {
    pub fn build(proj: &[Projected], width: usize, height: usize, tile: usize) -> Self {
        let tiles_x = width.div_ceil(tile);
        let tiles_y = height.div_ceil(tile);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, g) in proj.iter().enumerate() {
            let [u, v] = g.mean;
            let x0 = (u - g.radius).floor().max(0.0);
            let y0 = (v - g.radius).floor().max(0.0);
            let x1 = (u + g.radius).ceil().min(width as f64 - 1.0);
            let y1 = (v + g.radius).ceil().min(height as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                continue;
            }
            for ty in (y0 as usize / tile)..=(y1 as usize / tile) {
                for tx in (x0 as usize / tile)..=(x1 as usize / tile) {
                    lists[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        Bins { tiles_x, tile, lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    /// Pixel bounds `(x0, x1, y0, y1)` (exclusive ends) of tile `t`.
    pub fn bounds(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        (
            tx * self.tile,
            ((tx + 1) * self.tile).min(width),
            ty * self.tile,
            ((ty + 1) * self.tile).min(height),
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct RasterGaussian<T> {
    mean: [T; 2],
    conic: [T; 3],
    alpha0: T,
    color: [T; 3],
    depth: T,
    is_object: bool,
}

#[derive(Clone, Copy)]
struct Guards<T> {
    alpha_max: T,
    min_transmittance: T,
    alpha_min: T,
    extent2: T,
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("f64 converts to any Float")
}

/// `[r, g, b, depth, opacity, object_alpha]` composited front to back.
#[inline]
fn composite<'a, T: Float + 'a>(
    x: T,
    y: T,
    gaussians: impl Iterator<Item = &'a RasterGaussian<T>>,
    guards: &Guards<T>,
) -> [T; 6] {
    let one = T::one();
    let two = one + one;
    let half = one / two;
    let mut trans = one;
    let mut acc = [T::zero(); 6];
    for g in gaussians {
        let dx = x - g.mean[0];
        let dy = y - g.mean[1];
        let m = g.conic[0] * dx * dx + two * g.conic[1] * dx * dy + g.conic[2] * dy * dy;
        if m > guards.extent2 {
            continue;
        }
        let alpha = (g.alpha0 * (-half * m).exp()).min(guards.alpha_max);
        if alpha < guards.alpha_min {
            continue;
        }
        let next = trans * (one - alpha);
        if next < guards.min_transmittance {
            break;
        }
        let w = alpha * trans;
        for c in 0..3 {
            acc[c] = acc[c] + w * g.color[c];
        }
        acc[3] = acc[3] + w * g.depth;
        acc[4] = acc[4] + w;
        if g.is_object {
            acc[5] = acc[5] + w;
        }
        trans = next;
    }
    acc
}

/// Renders already-projected Gaussians with kernels in precision `T`.
pub fn render_projected<T: Float + Send + Sync>(
    proj: &[Projected],
    sky: &SkyCubemap,
    camera: &PinholeCamera,
    cfg: &RenderConfig,
) -> RenderOutput {
    let (w, h) = (camera.width(), camera.height());
    let bins = Bins::build(proj, w, h, cfg.tile_size);
    let gs: Vec<RasterGaussian<T>> = proj
        .iter()
        .map(|g| RasterGaussian {
            mean: g.mean.map(cast),
            conic: g.conic.map(cast),
            alpha0: cast(g.alpha0),
            color: g.color.map(cast),
            depth: cast(g.depth),
            is_object: g.is_object,
        })
        .collect();
    let guards = Guards {
        alpha_max: cast(cfg.alpha_max),
        min_transmittance: cast(cfg.min_transmittance),
        alpha_min: cast(cfg.alpha_min),
        extent2: cast(cfg.extent_sigma * cfg.extent_sigma),
    };

    let tiles = map_range(cfg.parallelism, bins.len(), |t| {
        let (x0, x1, y0, y1) = bins.bounds(t, w, h);
        let list = &bins.lists[t];
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for y in y0..y1 {
            for x in x0..x1 {
                let acc = composite(
                    cast::<T>(x as f64),
                    cast::<T>(y as f64),
                    list.iter().map(|&k| &gs[k as usize]),
                    &guards,
                );
                let skyc = sky.sample(&camera.ray_direction(x as f64, y as f64));
                let rest = T::one() - acc[4];
                let rgb = [0, 1, 2].map(|c| (acc[c] + rest * cast::<T>(skyc[c])).to_f64().unwrap());
                out.push((
                    rgb,
                    acc[3].to_f64().unwrap(),
                    acc[4].to_f64().unwrap(),
                    acc[5].to_f64().unwrap(),
                ));
            }
        }
        out
    });

    let mut res = RenderOutput {
        width: w,
        height: h,
        rgb: ImageBuf::new(w, h, 3),
        depth: vec![0.0; w * h],
        opacity: vec![0.0; w * h],
        object_alpha: vec![0.0; w * h],
    };
    for (t, pixels) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, _) = bins.bounds(t, w, h);
        let tw = x1 - x0;
        for (k, (rgb, d, o, oo)) in pixels.into_iter().enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            let i = y * w + x;
            for (c, v) in rgb.iter().enumerate() {
                res.rgb.set(x, y, c, *v);
            }
            res.depth[i] = d;
            res.opacity[i] = o;
            res.object_alpha[i] = oo;
        }
    }
    res
}

/// Renders the scene at time `t` with 64-bit kernels.
pub fn render(scene: &GaussianScene, camera: &PinholeCamera, t: f64, cfg: &RenderConfig) -> Result<RenderOutput> {
    let proj = project_scene(scene, camera, t, cfg)?;
    Ok(render_projected::<f64>(&proj, &scene.sky, camera, cfg))
}

/// Same as [`render`] with 32-bit compositing kernels.
pub fn render_f32(scene: &GaussianScene, camera: &PinholeCamera, t: f64, cfg: &RenderConfig) -> Result<RenderOutput> {
    let proj = project_scene(scene, camera, t, cfg)?;
    Ok(render_projected::<f32>(&proj, &scene.sky, camera, cfg))
}
