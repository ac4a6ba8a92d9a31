//! LiDAR colorization, background/object decomposition, temporal window
//! aggregation and box-level scene edits.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::exec::{map_range, Parallelism};
use crate::geometry::Se3Pose;
use crate::image::ImageBuf;
use crate::scene_io::{interpolate_box_pose, FrameRecord, LidarScan, Scene, TrackedBox};
use crate::{Error, Result};

/// Default aggregation half-window in seconds.
pub const DEFAULT_WINDOW: f64 = 1.0;

const WINDOW_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub source_frame: u32,
    pub source_index: u32,
}

/// Projects a world-frame scan into its frame's camera and samples the
/// nearest pixel. Points behind the camera or outside the image are dropped.
pub fn colorize_scan(scan: &LidarScan, frame: &FrameRecord, image: &ImageBuf) -> Vec<ColoredPoint> {
    let cam = &frame.camera;
    let (w, h) = (image.width as i64, image.height as i64);
    scan.world_points()
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (u, v, _) = cam.project(&p)?;
            let (px, py) = (u.round(), v.round());
            if !(px >= 0.0 && py >= 0.0 && (px as i64) < w && (py as i64) < h) {
                return None;
            }
            let (px, py) = (px as usize, py as usize);
            let c = image.pixel(px, py);
            Some(ColoredPoint {
                position: p,
                color: [c[0], c[1], c[2]],
                source_frame: frame.index,
                source_index: i as u32,
            })
        })
        .collect()
}

/// One frame's points split into world-frame background and per-object
/// canonical-frame sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDecomposition {
    pub frame: u32,
    pub timestamp: f64,
    pub background: Vec<ColoredPoint>,
    pub objects: BTreeMap<String, Vec<ColoredPoint>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecomposedCloud {
    pub frames: Vec<FrameDecomposition>,
}

/// Splits colored world points by box membership at time `t`.
///
/// A point inside several boxes goes to the box with the nearest center,
/// ties broken by the lexicographically smaller object id.
pub fn decompose(points: &[ColoredPoint], boxes: &[TrackedBox], t: f64, frame: u32) -> Result<FrameDecomposition> {
    let mut posed: Vec<(&TrackedBox, Se3Pose, Se3Pose)> = boxes
        .iter()
        .map(|b| {
            let pose = interpolate_box_pose(b, t)?;
            Ok((b, pose, pose.inverse()))
        })
        .collect::<Result<_>>()?;
    posed.sort_by(|a, b| a.0.object_id.cmp(&b.0.object_id));

    let mut out = FrameDecomposition {
        frame,
        timestamp: t,
        ..Default::default()
    };
    for p in points {
        let mut best: Option<(f64, usize, Vector3<f64>)> = None;
        for (k, (b, pose, inv)) in posed.iter().enumerate() {
            let local = inv.transform_point(&p.position);
            if b.contains_canonical(&local) {
                let d = (p.position - pose.translation).norm_squared();
                // strict comparison keeps the earlier (smaller) id on ties
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, k, local));
                }
            }
        }
        match best {
            Some((_, k, local)) => out
                .objects
                .entry(posed[k].0.object_id.clone())
                .or_default()
                .push(ColoredPoint { position: local, ..*p }),
            None => out.background.push(*p),
        }
    }
    Ok(out)
}

/// Colorizes and decomposes every frame. Boxes whose tracklet does not cover
/// a frame's timestamp are absent from that frame.
pub fn decompose_scene(scene: &Scene, par: Parallelism) -> Result<DecomposedCloud> {
    let frames = map_range(par, scene.frames().len(), |i| {
        let f = &scene.frames()[i];
        let colored = colorize_scan(&scene.lidar[i], f, &scene.image(i));
        let boxes: Vec<TrackedBox> = scene
            .manifest
            .tracklets
            .iter()
            .filter(|b| b.covers(f.timestamp))
            .cloned()
            .collect();
        decompose(&colored, &boxes, f.timestamp, f.index)
    });
    Ok(DecomposedCloud {
        frames: frames.into_iter().collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Edit {
    Remove {
        object_id: String,
    },
    /// World-frame delta applied after the object pose.
    Translate {
        object_id: String,
        delta: Se3Pose,
    },
    Replace {
        object_id: String,
        donor_object_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EditScript {
    pub edits: Vec<Edit>,
}

impl EditScript {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Provenance {
    Background,
    /// Points placed under this object's (possibly edited) pose.
    Object(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCloud {
    pub points: Vec<ColoredPoint>,
    pub provenance: Vec<Provenance>,
    pub query_time: f64,
    pub window: f64,
}

impl AggregatedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

struct ObjectSlot {
    removed: bool,
    delta: Se3Pose,
    source: String,
}

/// Aggregates the decomposed frames within `window` seconds of
/// `query_time` into one world-frame cloud.
///
/// Edits are applied first. Object points are warped by the object's pose at
/// `query_time`; objects whose tracklet does not cover that time are left
/// out. A replaced object takes its donor's canonical points from every
/// frame in the window. Output is sorted by `(source_frame, source_index,
/// provenance)`.
pub fn aggregate(
    cloud: &DecomposedCloud,
    tracklets: &[TrackedBox],
    query_time: f64,
    window: f64,
    edits: Option<&EditScript>,
) -> Result<AggregatedCloud> {
    if !(window >= 0.0) {
        return Err(Error::InvariantViolation(format!("negative window {window}")));
    }
    let mut slots: BTreeMap<&str, ObjectSlot> = tracklets
        .iter()
        .map(|t| {
            (
                t.object_id.as_str(),
                ObjectSlot {
                    removed: false,
                    delta: Se3Pose::identity(),
                    source: t.object_id.clone(),
                },
            )
        })
        .collect();
    for e in edits.map(|s| s.edits.as_slice()).unwrap_or_default() {
        let id = match e {
            Edit::Remove { object_id } | Edit::Translate { object_id, .. } | Edit::Replace { object_id, .. } => {
                object_id
            }
        };
        let slot = slots
            .get_mut(id.as_str())
            .ok_or_else(|| Error::UnknownObject(id.clone()))?;
        match e {
            Edit::Remove { .. } => slot.removed = true,
            Edit::Translate { delta, .. } => slot.delta = delta.compose(&slot.delta),
            Edit::Replace { donor_object_id, .. } => {
                if !tracklets.iter().any(|t| &t.object_id == donor_object_id) {
                    return Err(Error::UnknownObject(donor_object_id.clone()));
                }
                slot.source = donor_object_id.clone();
            }
        }
    }

    let in_window: Vec<&FrameDecomposition> = cloud
        .frames
        .iter()
        .filter(|f| (f.timestamp - query_time).abs() <= window + WINDOW_EPS)
        .collect();

    let mut tagged: Vec<(ColoredPoint, Provenance)> = Vec::new();
    for f in &in_window {
        tagged.extend(f.background.iter().map(|p| (*p, Provenance::Background)));
    }
    for tb in tracklets {
        let slot = &slots[tb.object_id.as_str()];
        if slot.removed || !tb.covers(query_time) {
            continue;
        }
        let pose = slot.delta.compose(&interpolate_box_pose(tb, query_time)?);
        for f in &in_window {
            if let Some(pts) = f.objects.get(&slot.source) {
                tagged.extend(pts.iter().map(|p| {
                    (
                        ColoredPoint {
                            position: pose.transform_point(&p.position),
                            ..*p
                        },
                        Provenance::Object(tb.object_id.clone()),
                    )
                }));
            }
        }
    }
    tagged.sort_by(|a, b| (a.0.source_frame, a.0.source_index, &a.1).cmp(&(b.0.source_frame, b.0.source_index, &b.1)));
    let (points, provenance) = tagged.into_iter().unzip();
    Ok(AggregatedCloud {
        points,
        provenance,
        query_time,
        window,
    })
}
