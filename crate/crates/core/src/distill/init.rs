//! Initial Gaussian scene from colorized LiDAR: one isotropic Gaussian per
//! (deduplicated) point, sized by the distance to its nearest neighbors.

use std::collections::{HashMap, HashSet};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::exec::{map_range, Parallelism};
use crate::gsplat::{Gaussian3D, GaussianScene, GaussianSet, ObjectNode, SkyCubemap};
use crate::pointcloud::{decompose_scene, ColoredPoint};
use crate::scene_io::Scene;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub sh_degree: u32,
    /// Points sharing a voxel of this size keep only the first one. Zero
    /// keeps every point.
    pub voxel_size: f64,
    /// Evenly strided subsample above this many points per set.
    pub max_points: usize,
    pub opacity: f64,
    pub knn: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub sky_face_size: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            sh_degree: 3,
            voxel_size: 0.05,
            max_points: 200_000,
            opacity: 0.1,
            knn: 3,
            min_scale: 1e-3,
            max_scale: 1.0,
            sky_face_size: 16,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sh_degree <= 3
            && self.voxel_size >= 0.0
            && self.max_points > 0
            && self.opacity > 0.0
            && self.opacity < 1.0
            && self.knn > 0
            && self.min_scale > 0.0
            && self.min_scale <= self.max_scale
            && self.sky_face_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid init settings {self:?}")))
        }
    }
}

/// Keeps the first point of every occupied voxel, in input order.
pub fn voxel_dedup(points: &[ColoredPoint], voxel: f64) -> Vec<ColoredPoint> {
    if voxel <= 0.0 {
        return points.to_vec();
    }
    let mut seen = HashSet::new();
    points
        .iter()
        .filter(|p| {
            let key = p.position.map(|v| (v / voxel).floor() as i64);
            seen.insert((key.x, key.y, key.z))
        })
        .copied()
        .collect()
}

type Cell = (i64, i64, i64);

/// Root-mean-square distance to the `k` nearest other points, found with
/// a uniform grid and an expanding ring search. Points with no neighbor
/// get `None`.
pub fn knn_scales(points: &[Vector3<f64>], k: usize, par: Parallelism) -> Vec<Option<f64>> {
    let n = points.len();
    if n < 2 {
        return vec![None; n];
    }
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let extent = (hi - lo).max().max(1e-9);
    let cell = extent / (n as f64).sqrt().max(1.0);
    let key = |p: &Vector3<f64>| -> Cell {
        let c = ((p - lo) / cell).map(|v| v.floor() as i64);
        (c.x, c.y, c.z)
    };
    let mut grid: HashMap<Cell, Vec<u32>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i as u32);
    }
    let span = key(&hi);
    let max_ring = span.0.max(span.1).max(span.2) + 1;
    let k = k.min(n - 1);
    map_range(par, n, |i| {
        let p = &points[i];
        let c = key(p);
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        for r in 0..=max_ring {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(list) = grid.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) else {
                            continue;
                        };
                        for &j in list {
                            if j as usize == i {
                                continue;
                            }
                            let d2 = (points[j as usize] - p).norm_squared();
                            if best.len() < k || d2 < best[k - 1] {
                                let at = best.partition_point(|v| *v <= d2);
                                best.insert(at, d2);
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            let reach = r as f64 * cell;
            if best.len() == k && best[k - 1] <= reach * reach {
                break;
            }
        }
        (!best.is_empty()).then(|| (best.iter().sum::<f64>() / best.len() as f64).sqrt())
    })
}

fn stride_subsample(points: Vec<ColoredPoint>, max: usize) -> Vec<ColoredPoint> {
    let n = points.len();
    if n <= max {
        return points;
    }
    (0..max).map(|k| points[k * n / max]).collect()
}

fn gaussians_from_points(points: &[ColoredPoint], cfg: &InitConfig, par: Parallelism) -> GaussianSet {
    let pts = stride_subsample(voxel_dedup(points, cfg.voxel_size), cfg.max_points);
    let pos: Vec<Vector3<f64>> = pts.iter().map(|p| p.position).collect();
    let scales = knn_scales(&pos, cfg.knn, par);
    let fallback = cfg.voxel_size.max(cfg.min_scale);
    GaussianSet::from_gaussians(
        cfg.sh_degree,
        pts.iter().zip(scales).map(|(p, s)| {
            let s = s.unwrap_or(fallback).clamp(cfg.min_scale, cfg.max_scale);
            Gaussian3D::isotropic(p.position.into(), s, cfg.opacity, p.color, cfg.sh_degree)
        }),
    )
}

/// Mean image color under the sky masks, or mid-gray without masks.
fn sky_color(scene: &Scene) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for i in 0..scene.frames().len() {
        let Some(mask) = scene.sky_mask(i) else { continue };
        let img = scene.image(i);
        for y in 0..img.height {
            for x in 0..img.width {
                if mask.get(x, y, 0) > 0.5 {
                    for (c, s) in sum.iter_mut().enumerate() {
                        *s += img.get(x, y, c);
                    }
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        [0.5; 3]
    } else {
        sum.map(|s| s / n as f64)
    }
}

/// Background Gaussians from the background points of every frame,
/// object Gaussians from each object's canonical points, and a uniform
/// sky at the mean masked sky color.
pub fn init_from_lidar(scene: &Scene, cfg: &InitConfig, par: Parallelism) -> Result<GaussianScene> {
    cfg.validate()?;
    let cloud = decompose_scene(scene, par)?;
    let mut out = GaussianScene::new(cfg.sh_degree, SkyCubemap::uniform(cfg.sky_face_size, sky_color(scene)));
    let bg: Vec<ColoredPoint> = cloud.frames.iter().flat_map(|f| f.background.iter().copied()).collect();
    out.background = gaussians_from_points(&bg, cfg, par);
    for tb in &scene.manifest.tracklets {
        let pts: Vec<ColoredPoint> = cloud
            .frames
            .iter()
            .flat_map(|f| f.objects.get(&tb.object_id).into_iter().flatten().copied())
            .collect();
        out.objects
            .push(ObjectNode::new(tb.clone(), gaussians_from_points(&pts, cfg, par)));
    }
    log::info!(
        "initialized {} background and {} object Gaussians",
        out.background.len(),
        out.gaussian_count() - out.background.len()
    );
    Ok(out)
}
