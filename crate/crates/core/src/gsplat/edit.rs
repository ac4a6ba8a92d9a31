//! Box-level edits of the Gaussian scene graph, with the same semantics as
//! the point-cloud edits: the script is folded per object, then applied.

use std::collections::BTreeMap;

use super::{GaussianScene, ObjectNode};
use crate::geometry::Se3Pose;
use crate::pointcloud::{Edit, EditScript};
use crate::{Error, Result};

/// Removes, translates or re-skins object nodes. Translate left-composes
/// the world delta with every keyframe pose and rotates the learned
/// translation corrections, so the rendered pose becomes `δ ∘ pose` at any
/// time. Replace keeps the target's tracklet and corrections and takes the
/// donor's canonical Gaussians from the unedited scene.
pub fn apply_edits(scene: &GaussianScene, script: &EditScript) -> Result<GaussianScene> {
    struct Slot {
        removed: bool,
        delta: Se3Pose,
        source: usize,
    }
    let index: BTreeMap<&str, usize> = scene
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| (o.object_id.as_str(), k))
        .collect();
    let mut slots: Vec<Slot> = (0..scene.objects.len())
        .map(|k| Slot {
            removed: false,
            delta: Se3Pose::identity(),
            source: k,
        })
        .collect();
    let find = |id: &String| {
        index
            .get(id.as_str())
            .copied()
            .ok_or_else(|| Error::UnknownObject(id.clone()))
    };
    for e in &script.edits {
        match e {
            Edit::Remove { object_id } => slots[find(object_id)?].removed = true,
            Edit::Translate { object_id, delta } => {
                let s = &mut slots[find(object_id)?];
                s.delta = delta.compose(&s.delta);
            }
            Edit::Replace {
                object_id,
                donor_object_id,
            } => {
                let donor = find(donor_object_id)?;
                slots[find(object_id)?].source = donor;
            }
        }
    }
    let mut out = scene.clone();
    out.objects = scene
        .objects
        .iter()
        .zip(&slots)
        .filter(|(_, s)| !s.removed)
        .map(|(node, s)| {
            let mut n: ObjectNode = node.clone();
            n.gaussians = scene.objects[s.source].gaussians.clone();
            for p in &mut n.tracklet.poses {
                p.pose = s.delta.compose(&p.pose);
            }
            let r = s.delta.rotation;
            for c in &mut n.corrections {
                c.translation = (r * nalgebra::Vector3::from(c.translation)).into();
            }
            n
        })
        .collect();
    Ok(out)
}
