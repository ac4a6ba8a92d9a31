//! Six-face sky cubemap with per-face bilinear lookup.
//!
//! Face order is `+x, -x, +y, -y, +z, -z`. Within a face the texel grid is
//! indexed by the two remaining axes in ascending order (`+x`: (y, z),
//! `+y`: (x, z), `+z`: (x, y)), each mapped from `[-1, 1]` to `[0, F)`.
//! Lookups never blend across faces; samples clamp at face edges.

use nalgebra::Vector3;

#[derive(Debug, Clone, PartialEq)]
pub struct SkyCubemap {
    pub face_size: usize,
    /// `6 x F x F x 3`, row index is the second face axis.
    pub texels: Vec<f64>,
}

/// Texel taps of one lookup: flat texel index (times 3 for the channel
/// offset) and bilinear weight.
pub type Taps = [(usize, f64); 4];

impl SkyCubemap {
    pub fn uniform(face_size: usize, color: [f64; 3]) -> Self {
        let mut texels = Vec::with_capacity(6 * face_size * face_size * 3);
        for _ in 0..6 * face_size * face_size {
            texels.extend_from_slice(&color);
        }
        SkyCubemap { face_size, texels }
    }

    pub fn texel_count(&self) -> usize {
        6 * self.face_size * self.face_size
    }

    /// Bilinear taps for a (not necessarily normalized) direction.
    pub fn taps(&self, d: &Vector3<f64>) -> Taps {
        let f = self.face_size;
        let (ax, ay, az) = (d.x.abs(), d.y.abs(), d.z.abs());
        let (face, major, a, b) = if ax >= ay && ax >= az {
            (if d.x >= 0.0 { 0 } else { 1 }, ax, d.y, d.z)
        } else if ay >= az {
            (if d.y >= 0.0 { 2 } else { 3 }, ay, d.x, d.z)
        } else {
            (if d.z >= 0.0 { 4 } else { 5 }, az, d.x, d.y)
        };
        let to_texel = |c: f64| {
            let s = if major > 0.0 { c / major } else { 0.0 };
            ((s + 1.0) * 0.5 * f as f64 - 0.5).clamp(0.0, f as f64 - 1.0)
        };
        let (s, t) = (to_texel(a), to_texel(b));
        let (s0, t0) = (s.floor() as usize, t.floor() as usize);
        let (s1, t1) = ((s0 + 1).min(f - 1), (t0 + 1).min(f - 1));
        let (fs, ft) = (s - s0 as f64, t - t0 as f64);
        let idx = |ss: usize, tt: usize| face * f * f + tt * f + ss;
        [
            (idx(s0, t0), (1.0 - fs) * (1.0 - ft)),
            (idx(s1, t0), fs * (1.0 - ft)),
            (idx(s0, t1), (1.0 - fs) * ft),
            (idx(s1, t1), fs * ft),
        ]
    }

    pub fn sample_taps(&self, taps: &Taps) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (i, w) in taps {
            for (ch, cv) in c.iter_mut().enumerate() {
                *cv += w * self.texels[i * 3 + ch];
            }
        }
        c
    }

    pub fn sample(&self, d: &Vector3<f64>) -> [f64; 3] {
        self.sample_taps(&self.taps(d))
    }

    pub fn validate(&self) -> bool {
        self.texels.len() == self.texel_count() * 3
            && self.texels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        self.texels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_map_samples_constant() {
        let m = SkyCubemap::uniform(4, [0.1, 0.2, 0.3]);
        for d in [
            Vector3::new(1.0, 0.2, -0.3),
            Vector3::new(-0.1, -2.0, 0.5),
            Vector3::new(0.0, 0.0, -1.0),
        ] {
            let c = m.sample(&d);
            for (a, b) in c.iter().zip([0.1, 0.2, 0.3]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weights_sum_to_one_and_pick_face() {
        let m = SkyCubemap::uniform(8, [0.0; 3]);
        let taps = m.taps(&Vector3::new(0.1, 0.3, 1.0));
        assert!((taps.iter().map(|t| t.1).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(taps.iter().all(|t| t.0 / 64 == 4));
        let taps = m.taps(&Vector3::new(0.1, -3.0, 1.0));
        assert!(taps.iter().all(|t| t.0 / 64 == 3));
    }
}
