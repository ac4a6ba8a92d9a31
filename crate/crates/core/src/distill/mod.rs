//! Distillation trainer for the dynamic Gaussian scene.
//!
//! Each iteration samples either an input camera, supervised by the
//! recorded image, LiDAR depth and sky mask, or a lane-shifted novel camera,
//! supervised by a cached generator output. The cache is refreshed on a
//! fixed schedule with a noise scale that decreases linearly over training.
//! Gaussians are densified from accumulated view-space gradient norms and
//! tracklet pose corrections are optimized alongside.

mod densify;
mod generator;
mod init;
mod optim;
mod trainer;

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::PinholeCamera;
use crate::losses::{LossWeights, DEPTH_QUANTILE};
use crate::{Error, Result};

pub use densify::{densify_and_prune, DensifyOutcome, DensifyParams, DensifyReport};
pub use generator::{DirGenerator, GeneratorRequest, MockGenerator, NoisyGenerator, NovelViewGenerator};
pub use init::{init_from_lidar, knn_scales, voxel_dedup, InitConfig};
pub use optim::{Adam, Moments};
pub use trainer::{lidar_depth_map, mean_psnr, InputView, MetricsRecord, NovelCamera, StepReport, Trainer};

/// Lateral side of a lane shift relative to the direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// Adaptive density control settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Mean view-space gradient norm (NDC units) above which a Gaussian is
    /// cloned or split.
    pub threshold: f64,
    pub from: usize,
    pub until: usize,
    pub interval: usize,
    /// Clone when the largest scale is at most this fraction of the scene
    /// extent, split otherwise.
    pub dense_fraction: f64,
    pub prune_opacity: f64,
    /// Split children have their scales divided by this factor.
    pub split_factor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            threshold: 0.0006,
            from: 500,
            until: 15000,
            interval: 100,
            dense_fraction: 0.01,
            prune_opacity: 0.005,
            split_factor: 1.6,
        }
    }
}

/// Adam step sizes per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene extent; decays exponentially to
    /// `position_final`.
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scaling: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub sky: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scaling: 5e-3,
            opacity: 0.05,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            sky: 2.5e-3,
        }
    }
}

/// Tracklet pose-correction step sizes, decaying exponentially from
/// `*_init` to `*_final` over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackletRates {
    pub translation_init: f64,
    pub translation_final: f64,
    pub rotation_init: f64,
    pub rotation_final: f64,
}

impl Default for TrackletRates {
    fn default() -> Self {
        TrackletRates {
            translation_init: 5e-4,
            translation_final: 1e-5,
            rotation_init: 1e-5,
            rotation_final: 5e-6,
        }
    }
}

/// Trainer configuration, read from TOML. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Probability of sampling a novel camera once generated views exist.
    pub novel_ratio: f64,
    /// Lateral offset of the novel trajectories in meters.
    pub lane_shift: f64,
    pub lane_sides: Vec<Side>,
    pub noise_scale_max: f64,
    pub noise_scale_min: f64,
    /// Generator refreshes run at `generator_start`, then every
    /// `generator_interval` iterations up to `generator_end`. The noise
    /// scale falls linearly over the same span.
    pub generator_start: usize,
    pub generator_interval: usize,
    pub generator_end: usize,
    /// Generator resolution. Zero keeps the render resolution.
    pub model_height: usize,
    pub model_width: usize,
    /// Sign of the object-entropy term in the total loss.
    pub reg_sign: f64,
    pub depth_quantile: f64,
    /// Every n-th frame is held out of training and used for the PSNR
    /// column of the metrics log. Zero holds out nothing.
    pub holdout_every: usize,
    pub log_every: usize,
    /// Zero disables periodic checkpoints. Must be a multiple of
    /// `log_every`.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub densify: DensifyConfig,
    pub lr: LearningRates,
    pub tracklet_lr: TrackletRates,
    pub init: InitConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 30000,
            seed: 0,
            novel_ratio: 0.4,
            lane_shift: 3.0,
            lane_sides: vec![Side::Left, Side::Right],
            noise_scale_max: 0.7,
            noise_scale_min: 0.3,
            generator_start: 7000,
            generator_interval: 5000,
            generator_end: 22000,
            model_height: 576,
            model_width: 1024,
            reg_sign: 1.0,
            depth_quantile: DEPTH_QUANTILE,
            holdout_every: 0,
            log_every: 100,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            densify: DensifyConfig::default(),
            lr: LearningRates::default(),
            tracklet_lr: TrackletRates::default(),
            init: InitConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: DistillConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.novel_ratio) {
            return bad(format!("novel_ratio {} outside [0, 1]", self.novel_ratio));
        }
        let (lo, hi) = (self.noise_scale_min, self.noise_scale_max);
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("noise scales must satisfy 0 <= min ({lo}) <= max ({hi}) <= 1"));
        }
        if self.generator_interval == 0 || self.generator_start > self.generator_end {
            return bad("generator schedule needs interval > 0 and start <= end".into());
        }
        if !self.lane_shift.is_finite() {
            return bad("lane_shift must be finite".into());
        }
        if (self.model_height == 0) != (self.model_width == 0) {
            return bad("model_height and model_width must both be zero or both positive".into());
        }
        if self.log_every == 0 || self.densify.interval == 0 {
            return bad("log_every and densify.interval must be positive".into());
        }
        if !self.checkpoint_every.is_multiple_of(self.log_every) {
            return bad(format!(
                "checkpoint_every ({}) must be a multiple of log_every ({})",
                self.checkpoint_every, self.log_every
            ));
        }
        if !(self.depth_quantile > 0.0 && self.depth_quantile <= 1.0) {
            return bad(format!("depth_quantile {} outside (0, 1]", self.depth_quantile));
        }
        let d = &self.densify;
        if !(d.threshold > 0.0 && d.dense_fraction > 0.0 && d.split_factor > 0.0 && d.prune_opacity >= 0.0) {
            return bad(format!("invalid densify settings {d:?}"));
        }
        let l = &self.lr;
        let t = &self.tracklet_lr;
        let rates = [
            l.position_init,
            l.position_final,
            l.rotation,
            l.scaling,
            l.opacity,
            l.sh_dc,
            l.sh_rest,
            l.sky,
            t.translation_init,
            t.translation_final,
            t.rotation_init,
            t.rotation_final,
        ];
        if !rates.iter().all(|r| r.is_finite() && *r > 0.0) {
            return bad("all learning rates must be positive".into());
        }
        self.loss.validate()?;
        self.init.validate()
    }

    /// Iterations at which the generator cache is refreshed.
    pub fn generator_iters(&self) -> Vec<usize> {
        (self.generator_start..=self.generator_end)
            .step_by(self.generator_interval.max(1))
            .collect()
    }

    /// Scene-to-generator resize, or `None` at native resolution.
    pub fn model_size(&self) -> Option<(usize, usize)> {
        (self.model_height > 0).then_some((self.model_height, self.model_width))
    }
}

/// Noise scale at `iter`: `noise_scale_max` up to `generator_start`,
/// `noise_scale_min` from `generator_end`, linear in between.
pub fn noise_scale(iter: usize, cfg: &DistillConfig) -> f64 {
    let (a, b) = (cfg.generator_start, cfg.generator_end);
    if iter <= a {
        cfg.noise_scale_max
    } else if iter >= b {
        cfg.noise_scale_min
    } else {
        let r = (iter - a) as f64 / (b - a) as f64;
        cfg.noise_scale_max * (1.0 - r) + cfg.noise_scale_min * r
    }
}

/// Log-linear interpolation from `init` to `last` as `iter` goes from 0 to
/// `total`.
pub fn exp_decay(init: f64, last: f64, iter: usize, total: usize) -> f64 {
    let r = if total == 0 {
        1.0
    } else {
        (iter as f64 / total as f64).clamp(0.0, 1.0)
    };
    (init.ln() * (1.0 - r) + last.ln() * r).exp()
}

/// Translates every camera along the horizontal direction perpendicular to
/// travel. Left is `up × heading` with world up `+z`. Heading comes from
/// the next camera position; the last camera reuses the previous heading,
/// and coincident neighbors borrow the nearest usable segment.
pub fn lane_shift_trajectory(cameras: &[PinholeCamera], offset: f64, side: Side) -> Result<Vec<PinholeCamera>> {
    if cameras.len() < 2 {
        return Err(Error::DegenerateTrajectory(format!(
            "{} camera(s); at least two are needed to estimate heading",
            cameras.len()
        )));
    }
    let up = Vector3::z();
    let centers: Vec<Vector3<f64>> = cameras.iter().map(|c| c.center()).collect();
    let laterals: Vec<Option<Vector3<f64>>> = centers
        .windows(2)
        .map(|w| {
            let h = w[1] - w[0];
            let l = up.cross(&h);
            (l.norm() > 1e-9 * h.norm().max(1.0)).then(|| l.normalize())
        })
        .collect();
    if laterals.iter().all(Option::is_none) {
        return Err(Error::DegenerateTrajectory(
            "camera positions coincide or move only vertically".into(),
        ));
    }
    let nearest = |k: usize| -> Vector3<f64> {
        (0..laterals.len())
            .filter_map(|j| laterals[j].map(|l| (j.abs_diff(k), j, l)))
            .min_by_key(|(d, j, _)| (*d, *j))
            .map(|(_, _, l)| l)
            .expect("at least one usable segment")
    };
    let sign = match side {
        Side::Left => 1.0,
        Side::Right => -1.0,
    };
    Ok(cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            let seg = i.min(laterals.len() - 1);
            let d = nearest(seg) * (sign * offset);
            let mut out = *cam;
            out.world_to_camera.translation -= cam.world_to_camera.rotation * d;
            out
        })
        .collect())
}

/// Result of [`sample_camera`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CameraChoice {
    pub index: usize,
    pub novel: bool,
}

/// Picks a novel camera with probability `p` (0 when there are none),
/// otherwise an input camera, uniformly within the chosen list. Always
/// consumes the same number of draws so that runs with and without novel
/// views share the random stream.
pub fn sample_camera(rng: &mut impl Rng, n_input: usize, n_novel: usize, p: f64) -> CameraChoice {
    assert!(n_input > 0, "no input cameras to sample from");
    let u: f64 = rng.random();
    let k: u64 = rng.random();
    let novel = n_novel > 0 && u < p;
    let n = if novel { n_novel } else { n_input };
    CameraChoice {
        index: (k % n as u64) as usize,
        novel,
    }
}
