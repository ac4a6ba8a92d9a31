//! Condition-image rasterization of aggregated LiDAR clouds, and the
//! scale-then-top-crop mapping to the generator's input resolution.
//!
//! Each point is drawn as a disc of pixel radius `radius_ndc * min(W, H) / 2`
//! around its projection. Per pixel the covering point with the smallest
//! camera depth wins; ties go to the smaller `(source_frame, source_index)`
//! and then to the earlier position in the cloud.

use crate::exec::{map_range, Parallelism};
use crate::geometry::PinholeCamera;
use crate::image::ImageBuf;
use crate::pointcloud::AggregatedCloud;
use crate::{Error, Result};

pub const DEFAULT_RADIUS_NDC: f64 = 0.01;
pub const TILE: usize = 16;
/// Marks a pixel with no covering point.
pub const NO_POINT: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub width: usize,
    pub height: usize,
    /// Black where uncovered.
    pub rgb: ImageBuf,
    pub mask: Vec<bool>,
    /// Camera-frame depth, `+inf` where uncovered.
    pub depth: Vec<f64>,
    /// Index of the winning cloud point, [`NO_POINT`] where uncovered.
    pub source: Vec<u32>,
}

impl ConditionImage {
    pub fn empty(width: usize, height: usize) -> Self {
        ConditionImage {
            width,
            height,
            rgb: ImageBuf::new(width, height, 3),
            mask: vec![false; width * height],
            depth: vec![f64::INFINITY; width * height],
            source: vec![NO_POINT; width * height],
        }
    }

    pub fn covered(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// RGBA with the mask in the alpha channel.
    pub fn to_rgba(&self) -> ImageBuf {
        ImageBuf::from_fn(self.width, self.height, 4, |x, y, c| {
            if c < 3 {
                self.rgb.get(x, y, c)
            } else if self.mask[y * self.width + x] {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Depth as a one-channel image with `0` where uncovered.
    pub fn depth_image(&self) -> ImageBuf {
        ImageBuf {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .depth
                .iter()
                .map(|d| if d.is_finite() { *d } else { 0.0 })
                .collect(),
        }
    }
}

/// A point projected for rasterization.
#[derive(Debug, Clone, Copy)]
pub struct ScreenPoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub frame: u32,
    pub index: u32,
    pub slot: u32,
}

impl ScreenPoint {
    #[inline]
    pub fn covers(&self, x: usize, y: usize, r2: f64) -> bool {
        let dx = x as f64 - self.u;
        let dy = y as f64 - self.v;
        dx * dx + dy * dy <= r2
    }

    /// Total order used to pick the per-pixel winner (smaller wins).
    #[inline]
    pub fn beats(&self, other: &ScreenPoint) -> bool {
        (self.depth, self.frame, self.index, self.slot) < (other.depth, other.frame, other.index, other.slot)
    }
}

pub fn pixel_radius(radius_ndc: f64, width: usize, height: usize) -> f64 {
    radius_ndc * width.min(height) as f64 / 2.0
}

/// Projects the cloud, keeping points with positive camera depth.
pub fn project_cloud(cloud: &AggregatedCloud, camera: &PinholeCamera) -> Vec<ScreenPoint> {
    cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(slot, p)| {
            let (u, v, depth) = camera.project(&p.position)?;
            Some(ScreenPoint {
                u,
                v,
                depth,
                frame: p.source_frame,
                index: p.source_index,
                slot: slot as u32,
            })
        })
        .collect()
}

pub fn rasterize_condition(cloud: &AggregatedCloud, camera: &PinholeCamera, radius_ndc: f64) -> ConditionImage {
    rasterize_condition_with(cloud, camera, radius_ndc, Parallelism::default())
}

/// Tiled condition rasterization; identical output for any [`Parallelism`].
pub fn rasterize_condition_with(
    cloud: &AggregatedCloud,
    camera: &PinholeCamera,
    radius_ndc: f64,
    par: Parallelism,
) -> ConditionImage {
    let (w, h) = (camera.width(), camera.height());
    let r = pixel_radius(radius_ndc, w, h);
    let r2 = r * r;
    let pts = project_cloud(cloud, camera);

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, p) in pts.iter().enumerate() {
        // one pixel of slack so binning never disagrees with the disc test
        let x0 = (p.u - r).floor().max(0.0);
        let y0 = (p.v - r).floor().max(0.0);
        let x1 = (p.u + r).ceil().min(w as f64 - 1.0);
        let y1 = (p.v + r).ceil().min(h as f64 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
        let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    let tile_winners = map_range(par, tiles_x * tiles_y, |t| {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let xs = tx * TILE..((tx + 1) * TILE).min(w);
        let ys = ty * TILE..((ty + 1) * TILE).min(h);
        let mut out = Vec::with_capacity(xs.len() * ys.len());
        for y in ys.clone() {
            for x in xs.clone() {
                let mut best: Option<&ScreenPoint> = None;
                for &k in &bins[t] {
                    let p = &pts[k as usize];
                    if p.covers(x, y, r2) && best.is_none_or(|b| p.beats(b)) {
                        best = Some(p);
                    }
                }
                out.push(best.copied());
            }
        }
        out
    });

    let mut img = ConditionImage::empty(w, h);
    for (t, winners) in tile_winners.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let x_start = tx * TILE;
        let tw = ((tx + 1) * TILE).min(w) - x_start;
        for (k, win) in winners.into_iter().enumerate() {
            let Some(p) = win else { continue };
            let (x, y) = (x_start + k % tw, ty * TILE + k / tw);
            let i = y * w + x;
            img.mask[i] = true;
            img.depth[i] = p.depth;
            img.source[i] = p.slot;
            let c = cloud.points[p.slot as usize].color;
            for (ch, v) in c.iter().enumerate() {
                img.rgb.set(x, y, ch, *v);
            }
        }
    }
    img
}

/// Uniform scale to the target width followed by removal of rows from the
/// top. Linear in the image, with an exact adjoint for backpropagation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropResize {
    pub src_width: usize,
    pub src_height: usize,
    pub dst_width: usize,
    pub dst_height: usize,
    /// Height after scaling, before cropping.
    pub scaled_height: usize,
    pub scale: f64,
}

impl CropResize {
    pub fn new(src_width: usize, src_height: usize, dst_height: usize, dst_width: usize) -> Result<Self> {
        if dst_width == 0 || dst_height == 0 || src_width == 0 || src_height == 0 {
            return Err(Error::InvalidTarget("zero-sized image".into()));
        }
        if src_width < dst_width {
            return Err(Error::InvalidTarget(format!(
                "source width {src_width} is smaller than target width {dst_width}"
            )));
        }
        let scale = dst_width as f64 / src_width as f64;
        let scaled_height = (src_height as f64 * scale).round() as usize;
        if scaled_height < dst_height {
            return Err(Error::InvalidTarget(format!(
                "scaled height {scaled_height} is below target height {dst_height}"
            )));
        }
        Ok(CropResize {
            src_width,
            src_height,
            dst_width,
            dst_height,
            scaled_height,
            scale,
        })
    }

    /// Rows removed from the top of the scaled image.
    pub fn cropped_rows(&self) -> usize {
        self.scaled_height - self.dst_height
    }

    pub fn is_identity(&self) -> bool {
        self.src_width == self.dst_width && self.src_height == self.dst_height
    }

    fn src_coord(&self, dst: usize, src_len: usize, scale: f64) -> f64 {
        ((dst as f64 + 0.5) / scale - 0.5).clamp(0.0, src_len as f64 - 1.0)
    }

    fn scale_y(&self) -> f64 {
        self.scaled_height as f64 / self.src_height as f64
    }

    /// Bilinear taps `(src index, weight)` along one axis.
    fn taps(&self, s: f64, len: usize) -> [(usize, f64); 2] {
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let f = s - i0 as f64;
        [(i0, 1.0 - f), (i1, f)]
    }

    pub fn apply(&self, img: &ImageBuf) -> ImageBuf {
        if self.is_identity() {
            return img.clone();
        }
        let top = self.cropped_rows();
        let sy = self.scale_y();
        let mut out = ImageBuf::new(self.dst_width, self.dst_height, img.channels);
        for y in 0..self.dst_height {
            let ty = self.taps(self.src_coord(y + top, self.src_height, sy), self.src_height);
            for x in 0..self.dst_width {
                let tx = self.taps(self.src_coord(x, self.src_width, self.scale), self.src_width);
                for c in 0..img.channels {
                    let mut v = 0.0;
                    for (yy, wy) in ty {
                        for (xx, wx) in tx {
                            v += wy * wx * img.get(xx, yy, c);
                        }
                    }
                    out.set(x, y, c, v);
                }
            }
        }
        out
    }

    /// Transpose of [`CropResize::apply`].
    pub fn adjoint(&self, grad: &ImageBuf) -> ImageBuf {
        if self.is_identity() {
            return grad.clone();
        }
        let top = self.cropped_rows();
        let sy = self.scale_y();
        let mut out = ImageBuf::new(self.src_width, self.src_height, grad.channels);
        for y in 0..self.dst_height {
            let ty = self.taps(self.src_coord(y + top, self.src_height, sy), self.src_height);
            for x in 0..self.dst_width {
                let tx = self.taps(self.src_coord(x, self.src_width, self.scale), self.src_width);
                for c in 0..grad.channels {
                    let g = grad.get(x, y, c);
                    for (yy, wy) in ty {
                        for (xx, wx) in tx {
                            let i = out.index(xx, yy, c);
                            out.data[i] += wy * wx * g;
                        }
                    }
                }
            }
        }
        out
    }

    /// Nearest-sample source pixel for each destination pixel.
    fn nearest(&self, x: usize, y: usize) -> (usize, usize) {
        let sx = self.src_coord(x, self.src_width, self.scale).round() as usize;
        let sy = self
            .src_coord(y + self.cropped_rows(), self.src_height, self.scale_y())
            .round() as usize;
        (sx, sy)
    }
}

/// Scales an RGB image to the target width and crops rows from the top.
pub fn crop_for_model(img: &ImageBuf, target_height: usize, target_width: usize) -> Result<ImageBuf> {
    Ok(CropResize::new(img.width, img.height, target_height, target_width)?.apply(img))
}

/// Condition-image variant using nearest sampling so that mask, depth and
/// source stay consistent with each other.
pub fn crop_condition_for_model(
    img: &ConditionImage,
    target_height: usize,
    target_width: usize,
) -> Result<ConditionImage> {
    let op = CropResize::new(img.width, img.height, target_height, target_width)?;
    if op.is_identity() {
        return Ok(img.clone());
    }
    let mut out = ConditionImage::empty(target_width, target_height);
    for y in 0..target_height {
        for x in 0..target_width {
            let (sx, sy) = op.nearest(x, y);
            let (si, di) = (sy * img.width + sx, y * target_width + x);
            out.mask[di] = img.mask[si];
            out.depth[di] = img.depth[si];
            out.source[di] = img.source[si];
            for c in 0..3 {
                out.rgb.set(x, y, c, img.rgb.get(sx, sy, c));
            }
        }
    }
    Ok(out)
}
