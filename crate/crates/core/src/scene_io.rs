//! Neutral on-disk scene format.
//!
//! Layout under a scene root:
//!
//! ```text
//! scene.json          manifest (frames, tracklets, metadata)
//! images/NNNN.png     RGB frames
//! lidar/NNNN.bin      little-endian f32 (x, y, z) triplets
//! sky/NNNN.png        optional single-channel masks, 255 = sky
//! ```
//!
//! Paths inside the manifest are relative to the root, so any layout the
//! manifest describes is accepted; [`write_scene`] emits exactly the paths
//! stored in the records.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::{PinholeCamera, Se3Pose, ROTATION_TOLERANCE};
use crate::image::{load_gray8, load_rgb8, ImageBuf};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "scene.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameTag {
    Ego,
    World,
}

/// Per-frame LiDAR sweep. Points keep their on-disk `f32` precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    pub timestamp: f64,
    pub frame_tag: FrameTag,
    /// Required when `frame_tag` is `Ego`.
    pub ego_to_world: Option<Se3Pose>,
    pub points: Vec<[f32; 3]>,
}

impl LidarScan {
    pub fn world_points(&self) -> Vec<Vector3<f64>> {
        let to_world = match self.frame_tag {
            FrameTag::World => Se3Pose::identity(),
            FrameTag::Ego => self.ego_to_world.unwrap_or_default(),
        };
        self.points
            .iter()
            .map(|p| to_world.transform_point(&Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.frame_tag == FrameTag::Ego && self.ego_to_world.is_none() {
            return Err(Error::Schema("ego-frame scan without ego_to_world pose".into()));
        }
        if let Some(p) = &self.ego_to_world {
            p.validate(ROTATION_TOLERANCE)?;
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation("non-finite LiDAR coordinate".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Se3Pose,
}

/// Tracked object: fixed box dimensions and box-to-world poses over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    pub object_id: String,
    pub class_label: String,
    /// (length, width, height) in meters along the box x, y, z axes.
    pub dimensions: [f64; 3],
    /// Strictly increasing in timestamp.
    pub poses: Vec<TimedPose>,
}

impl TrackedBox {
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((self.poses.first()?.timestamp, self.poses.last()?.timestamp))
    }

    pub fn covers(&self, t: f64) -> bool {
        self.span().is_some_and(|(a, b)| t >= a && t <= b)
    }

    /// Half-open membership `[-l/2, l/2) x [-w/2, w/2) x [-h/2, h/2)`.
    pub fn contains_canonical(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| {
            let h = self.dimensions[k] / 2.0;
            p[k] >= -h && p[k] < h
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dimensions.iter().all(|&d| d > 0.0 && d.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "tracklet {} has non-positive dimensions",
                self.object_id
            )));
        }
        for w in self.poses.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::InvariantViolation(format!(
                    "tracklet {} timestamps not strictly increasing",
                    self.object_id
                )));
            }
        }
        for p in &self.poses {
            p.pose.validate(ROTATION_TOLERANCE)?;
        }
        Ok(())
    }
}

/// Box pose at time `t`.
///
/// Stored timestamps return the stored pose exactly; between them the
/// translation is interpolated linearly and the rotation by shortest-path
/// slerp.
pub fn interpolate_box_pose(tracked: &TrackedBox, t: f64) -> Result<Se3Pose> {
    let (first, last) = tracked.span().ok_or(Error::OutOfRange {
        t,
        first: f64::NAN,
        last: f64::NAN,
    })?;
    if !(t >= first && t <= last) {
        return Err(Error::OutOfRange { t, first, last });
    }
    let poses = &tracked.poses;
    let hi = poses.partition_point(|p| p.timestamp < t);
    if poses[hi].timestamp == t {
        return Ok(poses[hi].pose);
    }
    let (a, b) = (&poses[hi - 1], &poses[hi]);
    let w = (t - a.timestamp) / (b.timestamp - a.timestamp);
    Ok(a.pose.interpolate(&b.pose, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarRef {
    pub path: String,
    pub timestamp: f64,
    pub frame: FrameTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego_to_world: Option<Se3Pose>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: u32,
    pub timestamp: f64,
    pub image: String,
    pub camera: PinholeCamera,
    pub lidar: LidarRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sky_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub frames: Vec<FrameRecord>,
    #[serde(default)]
    pub tracklets: Vec<TrackedBox>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

impl Default for SceneManifest {
    fn default() -> Self {
        SceneManifest {
            version: MANIFEST_VERSION,
            frames: Vec::new(),
            tracklets: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }
}

impl SceneManifest {
    /// Checks every manifest-level invariant (assets are checked by the loader).
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.frames {
            if !seen.insert(f.index) {
                return Err(Error::InvariantViolation(format!("duplicate frame index {}", f.index)));
            }
            f.camera.validate()?;
            if !f.timestamp.is_finite() {
                return Err(Error::InvariantViolation("non-finite frame timestamp".into()));
            }
        }
        for w in self.frames.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(Error::InvariantViolation(
                    "frame timestamps not strictly increasing".into(),
                ));
            }
        }
        let span = self
            .frames
            .first()
            .zip(self.frames.last())
            .map(|(a, b)| (a.timestamp, b.timestamp));
        let mut ids = std::collections::BTreeSet::new();
        for tb in &self.tracklets {
            tb.validate()?;
            if !ids.insert(tb.object_id.as_str()) {
                return Err(Error::InvariantViolation(format!(
                    "duplicate object id {}",
                    tb.object_id
                )));
            }
            for p in &tb.poses {
                let on_frame = self.frames.iter().any(|f| (f.timestamp - p.timestamp).abs() < 1e-9);
                let inside = span.is_some_and(|(a, b)| p.timestamp >= a && p.timestamp <= b);
                if !on_frame && !inside {
                    return Err(Error::InvariantViolation(format!(
                        "tracklet {} pose at {} is neither on a frame nor inside the sequence",
                        tb.object_id, p.timestamp
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn tracklet(&self, id: &str) -> Option<&TrackedBox> {
        self.tracklets.iter().find(|t| t.object_id == id)
    }
}

/// A manifest together with its loaded assets.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub lidar: Vec<LidarScan>,
    pub images: Vec<image::RgbImage>,
    pub sky_masks: Vec<Option<image::GrayImage>>,
}

impl Scene {
    pub fn frames(&self) -> &[FrameRecord] {
        &self.manifest.frames
    }

    pub fn image(&self, i: usize) -> ImageBuf {
        ImageBuf::from_rgb8(&self.images[i])
    }

    /// Sky mask in `{0, 1}` (1 = sky), if present.
    pub fn sky_mask(&self, i: usize) -> Option<ImageBuf> {
        self.sky_masks[i].as_ref().map(|m| {
            let mut b = ImageBuf::from_gray8(m);
            b.data.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
            b
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        let n = self.manifest.frames.len();
        if self.lidar.len() != n || self.images.len() != n || self.sky_masks.len() != n {
            return Err(Error::Schema("asset count does not match frame count".into()));
        }
        for (i, f) in self.manifest.frames.iter().enumerate() {
            let img = &self.images[i];
            let k = &f.camera.intrinsics;
            if img.width() != k.width || img.height() != k.height {
                return Err(Error::InvariantViolation(format!(
                    "frame {} image is {}x{}, camera declares {}x{}",
                    f.index,
                    img.width(),
                    img.height(),
                    k.width,
                    k.height
                )));
            }
            if let Some(m) = &self.sky_masks[i] {
                if m.dimensions() != img.dimensions() {
                    return Err(Error::InvariantViolation(format!(
                        "frame {} sky mask size mismatch",
                        f.index
                    )));
                }
            }
            if f.sky_mask.is_some() != self.sky_masks[i].is_some() {
                return Err(Error::Schema(format!("frame {} sky mask presence mismatch", f.index)));
            }
            let scan = &self.lidar[i];
            if scan.frame_tag != f.lidar.frame || scan.ego_to_world != f.lidar.ego_to_world {
                return Err(Error::Schema(format!("frame {} LiDAR header mismatch", f.index)));
            }
            scan.validate()?;
        }
        Ok(())
    }
}

pub fn read_lidar_bin(path: &Path) -> Result<Vec<[f32; 3]>> {
    if !path.exists() {
        return Err(Error::MissingAsset(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 12 != 0 {
        return Err(Error::Schema(format!(
            "{}: length {} is not a multiple of 12",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|r| {
            let f = |o: usize| f32::from_le_bytes([r[o], r[o + 1], r[o + 2], r[o + 3]]);
            [f(0), f(4), f(8)]
        })
        .collect())
}

pub fn write_lidar_bin(path: &Path, points: &[[f32; 3]]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * 12);
    for p in points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and fully validates a scene rooted at `root`.
pub fn load_scene(root: &Path) -> Result<Scene> {
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingAsset(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: SceneManifest =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", manifest_path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Schema(format!(
            "unsupported manifest version {}",
            manifest.version
        )));
    }
    manifest.validate()?;

    let mut lidar = Vec::with_capacity(manifest.frames.len());
    let mut images = Vec::with_capacity(manifest.frames.len());
    let mut sky_masks = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        images.push(load_rgb8(&root.join(&f.image))?);
        lidar.push(LidarScan {
            timestamp: f.lidar.timestamp,
            frame_tag: f.lidar.frame,
            ego_to_world: f.lidar.ego_to_world,
            points: read_lidar_bin(&root.join(&f.lidar.path))?,
        });
        sky_masks.push(match &f.sky_mask {
            Some(p) => Some(load_gray8(&root.join(p))?),
            None => None,
        });
    }
    let scene = Scene {
        manifest,
        lidar,
        images,
        sky_masks,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes `scene` under `root`; [`load_scene`] reads it back unchanged.
pub fn write_scene(scene: &Scene, root: &Path) -> Result<()> {
    scene.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, f) in scene.manifest.frames.iter().enumerate() {
        let img_path = root.join(&f.image);
        if let Some(dir) = img_path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        scene.images[i].save(&img_path).map_err(|e| Error::Image {
            path: img_path.clone(),
            message: e.to_string(),
        })?;
        write_lidar_bin(&root.join(&f.lidar.path), &scene.lidar[i].points)?;
        if let (Some(p), Some(m)) = (&f.sky_mask, &scene.sky_masks[i]) {
            let path = root.join(p);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            m.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
    }
    let json = serde_json::to_string_pretty(&scene.manifest).map_err(|e| Error::Schema(e.to_string()))?;
    write_file(&root.join(MANIFEST_FILE), json.as_bytes())
}

/// Conventional relative asset paths for frame `index`.
pub fn default_paths(index: u32) -> (String, String, String) {
    (
        format!("images/{index:04}.png"),
        format!("lidar/{index:04}.bin"),
        format!("sky/{index:04}.png"),
    )
}
