//! Dynamic scene-graph 3D Gaussian splatting.
//!
//! A [`GaussianScene`] holds background Gaussians in world coordinates, one
//! [`ObjectNode`] per tracked object with Gaussians in the object's
//! canonical box frame, and a [`SkyCubemap`] for distant content. Rendering
//! warps object Gaussians to world space at the query time, projects every
//! Gaussian with the local-affine (EWA) approximation, sorts by camera depth
//! and alpha-composites front to back in 16x16 tiles; the sky fills the
//! remaining transmittance.
//!
//! [`render_backward`] returns analytic gradients for every parameter:
//! means, rotations, log-scales, opacity logits, SH coefficients, cubemap
//! texels and per-keyframe tracklet pose corrections.

mod backward;
pub mod checkpoint;
pub mod cubemap;
mod edit;
pub mod gradcheck;
mod project;
mod raster;
pub mod reference;
pub mod sh;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::exec::Parallelism;
use crate::geometry::{normalize_quat, quat_to_matrix, Se3Pose};
use crate::image::ImageBuf;
use crate::scene_io::{interpolate_box_pose, TrackedBox};
use crate::Result;

pub use backward::{render_backward, GaussianGrads, ObjectGrads, PoseCorrectionGrad, RenderGrad, SceneGrads};
pub use cubemap::SkyCubemap;
pub use edit::apply_edits;
pub use project::{
    apply_mip_filter, covariance_world, project_covariance, project_scene, warp_object, Projected, DEFAULT_MIP_DILATION,
};
pub use raster::{render, render_f32, render_projected};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A single Gaussian in parameter form.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub position: [f64; 3],
    /// `[w, x, y, z]`; normalized on use.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    /// `[coefficient][channel]`.
    pub sh: Vec<f64>,
}

impl Gaussian3D {
    /// Isotropic Gaussian with a constant color.
    pub fn isotropic(position: [f64; 3], scale: f64, opacity: f64, color: [f64; 3], sh_degree: u32) -> Self {
        let mut sh_coeffs = vec![0.0; sh::coeff_count(sh_degree) * 3];
        for c in 0..3 {
            sh_coeffs[c] = sh::rgb_to_dc(color[c]);
        }
        Gaussian3D {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [scale.ln(); 3],
            opacity_logit: logit(opacity),
            sh: sh_coeffs,
        }
    }
}

/// Structure-of-arrays Gaussian storage.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSet {
    pub sh_degree: u32,
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

impl GaussianSet {
    pub fn new(sh_degree: u32) -> Self {
        GaussianSet {
            sh_degree,
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
        }
    }

    pub fn from_gaussians(sh_degree: u32, gaussians: impl IntoIterator<Item = Gaussian3D>) -> Self {
        let mut s = Self::new(sh_degree);
        for g in gaussians {
            s.push(g);
        }
        s
    }

    /// Coefficients per Gaussian (all channels).
    pub fn sh_stride(&self) -> usize {
        sh::coeff_count(self.sh_degree) * 3
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, g: Gaussian3D) {
        let stride = self.sh_stride();
        assert!(
            g.sh.len() <= stride,
            "too many SH coefficients for degree {}",
            self.sh_degree
        );
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        let start = self.sh.len();
        self.sh.extend_from_slice(&g.sh);
        self.sh.resize(start + stride, 0.0);
    }

    pub fn get(&self, i: usize) -> Gaussian3D {
        Gaussian3D {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            sh: self.sh_of(i).to_vec(),
        }
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    /// Keeps the Gaussians for which `keep` is true, preserving order.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let stride = self.sh_stride();
        let mut k = keep.iter();
        self.positions.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.rotations.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.log_scales.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.opacity_logits.retain(|_| *k.next().unwrap());
        let sh = std::mem::take(&mut self.sh);
        self.sh = sh
            .chunks(stride)
            .zip(keep)
            .filter(|(_, k)| **k)
            .flat_map(|(c, _)| c.iter().copied())
            .collect();
    }

    /// Total opacity mass `Σ sigmoid(logit)`.
    pub fn opacity_mass(&self) -> f64 {
        self.opacity_logits.iter().map(|&o| sigmoid(o)).sum()
    }
}

/// Learnable correction applied on top of a tracklet keyframe pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseCorrection {
    pub translation: [f64; 3],
    /// `[w, x, y, z]`; normalized on use.
    pub rotation: [f64; 4],
}

impl Default for PoseCorrection {
    fn default() -> Self {
        PoseCorrection {
            translation: [0.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

/// Object pose at a query time, with the correction that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectPose {
    pub base: Se3Pose,
    pub correction: usize,
    pub pose: Se3Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub object_id: String,
    /// Canonical box frame.
    pub gaussians: GaussianSet,
    pub tracklet: TrackedBox,
    /// One per tracklet keyframe.
    pub corrections: Vec<PoseCorrection>,
}

impl ObjectNode {
    pub fn new(tracklet: TrackedBox, gaussians: GaussianSet) -> Self {
        ObjectNode {
            object_id: tracklet.object_id.clone(),
            corrections: vec![PoseCorrection::default(); tracklet.poses.len()],
            gaussians,
            tracklet,
        }
    }

    pub fn present_at(&self, t: f64) -> bool {
        self.tracklet.covers(t)
    }

    /// Keyframe whose correction applies at `t`: the nearest one, the
    /// earlier on ties.
    pub fn correction_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, p) in self.tracklet.poses.iter().enumerate() {
            let d = (p.timestamp - t).abs();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Interpolated keyframe pose composed with the learned correction:
    /// `R = R_base R(q_c)`, `t = t_base + δ`.
    pub fn pose_at(&self, t: f64) -> Result<ObjectPose> {
        let base = interpolate_box_pose(&self.tracklet, t)?;
        let k = self.correction_index(t);
        let c = &self.corrections[k];
        let pose = Se3Pose::new(
            base.rotation * quat_to_matrix(normalize_quat(c.rotation)),
            base.translation + Vector3::from(c.translation),
        );
        Ok(ObjectPose {
            base,
            correction: k,
            pose,
        })
    }

    /// Warns when canonical means stray beyond 1.5x the box extents.
    pub fn check_extents(&self) -> usize {
        let d = self.tracklet.dimensions;
        let outside = self
            .gaussians
            .positions
            .iter()
            .filter(|p| (0..3).any(|k| p[k].abs() > 0.75 * d[k]))
            .count();
        if outside > 0 {
            log::warn!(
                "object {}: {outside} Gaussians lie outside 1.5x the box extents",
                self.object_id
            );
        }
        outside
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub sh_degree: u32,
    pub background: GaussianSet,
    pub objects: Vec<ObjectNode>,
    pub sky: SkyCubemap,
}

impl GaussianScene {
    pub fn new(sh_degree: u32, sky: SkyCubemap) -> Self {
        GaussianScene {
            sh_degree,
            background: GaussianSet::new(sh_degree),
            objects: Vec::new(),
            sky,
        }
    }

    /// Background plus all object Gaussians.
    pub fn gaussian_count(&self) -> usize {
        self.background.len() + self.objects.iter().map(|o| o.gaussians.len()).sum::<usize>()
    }

    /// All Gaussian sets in global index order (background first).
    pub fn sets(&self) -> impl Iterator<Item = &GaussianSet> {
        std::iter::once(&self.background).chain(self.objects.iter().map(|o| &o.gaussians))
    }

    pub fn sets_mut(&mut self) -> impl Iterator<Item = &mut GaussianSet> {
        std::iter::once(&mut self.background).chain(self.objects.iter_mut().map(|o| &mut o.gaussians))
    }
}

/// Numerical guards and kernel options for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Minimum camera depth; nearer Gaussians are culled.
    pub near: f64,
    pub alpha_max: f64,
    /// Compositing stops once transmittance would drop below this.
    pub min_transmittance: f64,
    /// Contributions with smaller alpha are skipped.
    pub alpha_min: f64,
    /// Footprint cutoff as a Mahalanobis radius.
    pub extent_sigma: f64,
    pub mip_filter: bool,
    pub mip_dilation: f64,
    pub parallelism: Parallelism,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: 16,
            near: 0.01,
            alpha_max: 0.99,
            min_transmittance: 1e-4,
            alpha_min: 1.0 / 255.0,
            extent_sigma: 3.0,
            mip_filter: true,
            mip_dilation: DEFAULT_MIP_DILATION,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl RenderConfig {
    /// Footprint cutoff far enough out (8σ, no alpha floor, no early stop)
    /// that the rendered image is smooth to working precision in every
    /// parameter. Used for finite-difference gradient checks.
    pub fn smooth() -> Self {
        RenderConfig {
            alpha_min: 0.0,
            min_transmittance: 0.0,
            extent_sigma: 8.0,
            ..Default::default()
        }
    }

    pub fn with_parallelism(mut self, parallelism: Parallelism) -> Self {
        self.parallelism = parallelism;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Gaussian color composited over the sky.
    pub rgb: ImageBuf,
    /// Alpha-weighted depth `Σ w_i z_i` (not normalized by opacity).
    pub depth: Vec<f64>,
    /// Accumulated alpha `Σ w_i`.
    pub opacity: Vec<f64>,
    /// Accumulated alpha of object Gaussians only.
    pub object_alpha: Vec<f64>,
}

pub(crate) fn rotation_of(q: [f64; 4]) -> Matrix3<f64> {
    quat_to_matrix(normalize_quat(q))
}
