//! Binary scene checkpoint.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      b"LSGS"
//! version    u32 (= 1)
//! sh_degree  u32
//! face_size  u32
//! n_objects  u32
//! background gaussian block
//! per object:
//!   tracklet   u64 byte length + JSON (TrackedBox)
//!   gaussian block
//!   n_corr     u32, then n_corr x 7 f64 (translation xyz, rotation wxyz)
//! sky        6 x F x F x 3 f64
//! ```
//!
//! A gaussian block is `n: u64` followed by f64 arrays: positions (3n),
//! rotations (4n), log-scales (3n), opacity logits (n), SH
//! (`n x (deg+1)² x 3`, coefficient-major within a Gaussian).

use std::path::Path;

use super::{GaussianScene, GaussianSet, ObjectNode, PoseCorrection, SkyCubemap};
use crate::scene_io::TrackedBox;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSGS";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn set(&mut self, s: &GaussianSet) {
        self.u64(s.len() as u64);
        self.f64s(s.positions.iter().flatten());
        self.f64s(s.rotations.iter().flatten());
        self.f64s(s.log_scales.iter().flatten());
        self.f64s(&s.opacity_logits);
        self.f64s(&s.sh);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Schema(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn count(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > self.buf.len() as u64 {
            return Err(Error::Schema(format!("implausible count {n} in checkpoint")));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Schema("checkpoint overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn arrays<const N: usize>(&mut self, n: usize) -> Result<Vec<[f64; N]>> {
        Ok(self
            .f64s(n * N)?
            .chunks_exact(N)
            .map(|c| c.try_into().unwrap())
            .collect())
    }
    fn set(&mut self, sh_degree: u32) -> Result<GaussianSet> {
        let n = self.count()?;
        let mut s = GaussianSet::new(sh_degree);
        s.positions = self.arrays::<3>(n)?;
        s.rotations = self.arrays::<4>(n)?;
        s.log_scales = self.arrays::<3>(n)?;
        s.opacity_logits = self.f64s(n)?;
        s.sh = self.f64s(n * s.sh_stride())?;
        Ok(s)
    }
}

pub fn to_bytes(scene: &GaussianScene) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u32(scene.sh_degree);
    w.u32(scene.sky.face_size as u32);
    w.u32(scene.objects.len() as u32);
    w.set(&scene.background);
    for o in &scene.objects {
        let json = serde_json::to_vec(&o.tracklet).map_err(|e| Error::Schema(e.to_string()))?;
        w.u64(json.len() as u64);
        w.0.extend_from_slice(&json);
        w.set(&o.gaussians);
        w.u32(o.corrections.len() as u32);
        for c in &o.corrections {
            w.f64s(c.translation.iter().chain(&c.rotation));
        }
    }
    w.f64s(&scene.sky.texels);
    Ok(w.0)
}

pub fn from_bytes(buf: &[u8]) -> Result<GaussianScene> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Schema("not a scene checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {version}")));
    }
    let sh_degree = r.u32()?;
    if sh_degree > super::sh::MAX_DEGREE {
        return Err(Error::Schema(format!("SH degree {sh_degree} exceeds 3")));
    }
    let face = r.u32()? as usize;
    let n_objects = r.u32()? as usize;
    let background = r.set(sh_degree)?;
    let mut objects = Vec::new();
    for _ in 0..n_objects {
        let len = r.count()?;
        let tracklet: TrackedBox =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Schema(format!("tracklet: {e}")))?;
        let gaussians = r.set(sh_degree)?;
        let n_corr = r.u32()? as usize;
        let raw = r.arrays::<7>(n_corr)?;
        if n_corr != tracklet.poses.len() {
            return Err(Error::Schema(format!(
                "object {}: {n_corr} corrections for {} keyframes",
                tracklet.object_id,
                tracklet.poses.len()
            )));
        }
        let mut node = ObjectNode::new(tracklet, gaussians);
        node.corrections = raw
            .iter()
            .map(|c| PoseCorrection {
                translation: [c[0], c[1], c[2]],
                rotation: [c[3], c[4], c[5], c[6]],
            })
            .collect();
        objects.push(node);
    }
    let texels = r.f64s(6 * face * face * 3)?;
    if r.pos != buf.len() {
        return Err(Error::Schema(format!(
            "{} trailing bytes in checkpoint",
            buf.len() - r.pos
        )));
    }
    Ok(GaussianScene {
        sh_degree,
        background,
        objects,
        sky: SkyCubemap {
            face_size: face,
            texels,
        },
    })
}

pub fn save(scene: &GaussianScene, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(scene)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<GaussianScene> {
    if !path.exists() {
        return Err(Error::MissingAsset(path.to_path_buf()));
    }
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Se3Pose;
    use crate::gsplat::Gaussian3D;
    use crate::scene_io::TimedPose;

    fn scene() -> GaussianScene {
        let mut s = GaussianScene::new(1, SkyCubemap::uniform(2, [0.3, 0.5, 0.9]));
        s.background
            .push(Gaussian3D::isotropic([1.0, 2.0, 3.0], 0.1, 0.4, [0.2, 0.3, 0.4], 1));
        let tb = TrackedBox {
            object_id: "car_1".into(),
            class_label: "car".into(),
            dimensions: [4.0, 2.0, 1.5],
            poses: vec![
                TimedPose {
                    timestamp: 0.0,
                    pose: Se3Pose::identity(),
                },
                TimedPose {
                    timestamp: 1.0,
                    pose: Se3Pose::from_translation([1.0, 0.0, 0.0].into()),
                },
            ],
        };
        let mut set = GaussianSet::new(1);
        set.push(Gaussian3D::isotropic([0.1, 0.0, 0.2], 0.3, 0.7, [0.9, 0.1, 0.1], 1));
        let mut node = ObjectNode::new(tb, set);
        node.corrections[1].translation = [0.01, -0.02, 0.0];
        s.objects.push(node);
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = scene();
        let bytes = to_bytes(&s).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&scene()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(from_bytes(&bad).is_err());
    }
}
