//! The training loop.

use std::collections::BTreeSet;

use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::densify::{densify_and_prune, DensifyParams, DensifyReport};
use super::generator::{GeneratorRequest, NovelViewGenerator};
use super::optim::{Adam, Moments};
use super::{exp_decay, lane_shift_trajectory, noise_scale, sample_camera, CameraChoice, DistillConfig};
use crate::condition::{crop_condition_for_model, rasterize_condition_with, CropResize, DEFAULT_RADIUS_NDC};
use crate::exec::Parallelism;
use crate::geometry::PinholeCamera;
use crate::gsplat::{render, render_backward, GaussianScene, GaussianSet, RenderConfig, SceneGrads};
use crate::image::ImageBuf;
use crate::losses::{input_view_loss, novel_view_loss, psnr, InputTargets, LossReport, PyramidGradientLoss};
use crate::pointcloud::{aggregate, decompose_scene, DEFAULT_WINDOW};
use crate::scene_io::Scene;
use crate::synthetic::rng;
use crate::{Error, Result};

/// A recorded camera with its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct InputView {
    pub camera: PinholeCamera,
    pub time: f64,
    pub rgb: ImageBuf,
    /// Per-pixel LiDAR depth and validity.
    pub lidar: Option<(Vec<f64>, Vec<bool>)>,
    /// 1 on sky pixels.
    pub sky: Option<Vec<f64>>,
}

impl InputView {
    pub fn from_scene(scene: &Scene, i: usize) -> Self {
        let f = &scene.frames()[i];
        InputView {
            camera: f.camera,
            time: f.timestamp,
            rgb: scene.image(i),
            lidar: Some(lidar_depth_map(&scene.lidar[i].world_points(), &f.camera)),
            sky: scene.sky_mask(i).map(|m| m.data),
        }
    }
}

/// A novel camera with its condition image at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelCamera {
    pub camera: PinholeCamera,
    pub time: f64,
    pub condition: ImageBuf,
}

/// Nearest-pixel z-buffer of world points seen by `camera`.
pub fn lidar_depth_map(points: &[Vector3<f64>], camera: &PinholeCamera) -> (Vec<f64>, Vec<bool>) {
    let (w, h) = (camera.width(), camera.height());
    let mut depth = vec![f64::INFINITY; w * h];
    for p in points {
        let Some((u, v, z)) = camera.project(p) else { continue };
        let (x, y) = (u.round(), v.round());
        if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
            let i = y as usize * w + x as usize;
            depth[i] = depth[i].min(z);
        }
    }
    let valid = depth.iter().map(|d| d.is_finite()).collect();
    depth.iter_mut().filter(|d| !d.is_finite()).for_each(|d| *d = 0.0);
    (depth, valid)
}

/// Mean PSNR of renders of `scene` against the views.
pub fn mean_psnr(scene: &GaussianScene, views: &[InputView], cfg: &RenderConfig) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::InvariantViolation("no views to evaluate".into()));
    }
    let mut sum = 0.0;
    for v in views {
        sum += psnr(&render(scene, &v.camera, v.time, cfg)?.rgb, &v.rgb)?;
    }
    Ok(sum / views.len() as f64)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub novel: bool,
    pub camera: usize,
    pub loss: LossReport,
    /// Mean total loss since the previous record.
    pub mean_total: f64,
    pub gaussians: usize,
    pub noise_scale: f64,
    pub cached_novel_views: usize,
    pub holdout_psnr: Option<f64>,
}

/// Outcome of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub choice: CameraChoice,
    pub loss: LossReport,
    pub densify: Option<DensifyReport>,
    pub refreshed: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct SetMoments {
    positions: Moments,
    rotations: Moments,
    log_scales: Moments,
    opacity: Moments,
    sh: Moments,
}

impl SetMoments {
    fn new(set: &GaussianSet) -> Self {
        let n = set.len();
        SetMoments {
            positions: Moments::zeros(3 * n),
            rotations: Moments::zeros(4 * n),
            log_scales: Moments::zeros(3 * n),
            opacity: Moments::zeros(n),
            sh: Moments::zeros(set.sh.len()),
        }
    }

    fn remap(&mut self, origin: &[Option<usize>], sh_stride: usize) {
        self.positions.remap(origin, 3);
        self.rotations.remap(origin, 4);
        self.log_scales.remap(origin, 3);
        self.opacity.remap(origin, 1);
        self.sh.remap(origin, sh_stride);
    }
}

#[derive(Debug, Clone, Copy)]
struct StepSizes {
    position: f64,
    rotation: f64,
    scaling: f64,
    opacity: f64,
    sh_dc: f64,
    sh_rest: f64,
}

pub struct Trainer {
    pub config: DistillConfig,
    pub scene: GaussianScene,
    pub render: RenderConfig,
    /// Completed iterations.
    pub iteration: usize,
    pub views: Vec<InputView>,
    pub holdout: Vec<InputView>,
    pub novel: Vec<NovelCamera>,
    /// Generated supervision per novel camera; empty before the first
    /// refresh.
    pub cache: Vec<ImageBuf>,
    /// Scene radius used to scale position steps and the clone/split size.
    pub extent: f64,
    reference: ImageBuf,
    accum: Vec<f64>,
    count: Vec<u32>,
    sets: Vec<SetMoments>,
    corr_t: Vec<Moments>,
    corr_r: Vec<Moments>,
    sky: Moments,
    adam: Adam,
    rng: ChaCha8Rng,
    perceptual: PyramidGradientLoss,
    generator_iters: BTreeSet<usize>,
    window: (f64, usize),
}

/// 1.1 times the largest distance of a camera center from their mean.
fn camera_extent(views: &[InputView]) -> f64 {
    let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.camera.center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len().max(1) as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max) * 1.1;
    if r > 1e-6 {
        r
    } else {
        1.0
    }
}

impl Trainer {
    /// Builds the trainer from a loaded scene: input views from its frames
    /// (every `holdout_every`-th held out), novel cameras by lane-shifting
    /// the training cameras, and condition images from the aggregated
    /// LiDAR cloud at each frame time.
    pub fn from_scene(init: GaussianScene, scene: &Scene, config: DistillConfig, par: Parallelism) -> Result<Self> {
        config.validate()?;
        let mut views = Vec::new();
        let mut holdout = Vec::new();
        for i in 0..scene.frames().len() {
            let v = InputView::from_scene(scene, i);
            if config.holdout_every > 0 && (i + 1) % config.holdout_every == 0 {
                holdout.push(v);
            } else {
                views.push(v);
            }
        }
        let mut novel = Vec::new();
        if config.novel_ratio > 0.0 && views.len() >= 2 {
            let cloud = decompose_scene(scene, par)?;
            let cams: Vec<PinholeCamera> = views.iter().map(|v| v.camera).collect();
            for side in &config.lane_sides {
                for (cam, v) in lane_shift_trajectory(&cams, config.lane_shift, *side)?
                    .into_iter()
                    .zip(&views)
                {
                    let agg = aggregate(&cloud, &scene.manifest.tracklets, v.time, DEFAULT_WINDOW, None)?;
                    let mut cond = rasterize_condition_with(&agg, &cam, DEFAULT_RADIUS_NDC, par);
                    if let Some((h, w)) = config.model_size() {
                        cond = crop_condition_for_model(&cond, h, w)?;
                    }
                    novel.push(NovelCamera {
                        camera: cam,
                        time: v.time,
                        condition: cond.rgb,
                    });
                }
            }
        }
        Self::new(init, views, holdout, novel, config, par)
    }

    pub fn new(
        init: GaussianScene,
        views: Vec<InputView>,
        holdout: Vec<InputView>,
        novel: Vec<NovelCamera>,
        config: DistillConfig,
        par: Parallelism,
    ) -> Result<Self> {
        config.validate()?;
        if views.is_empty() {
            return Err(Error::InvariantViolation("no training views".into()));
        }
        let reference = match config.model_size() {
            Some((h, w)) => CropResize::new(views[0].rgb.width, views[0].rgb.height, h, w)?.apply(&views[0].rgb),
            None => views[0].rgb.clone(),
        };
        let n = init.gaussian_count();
        Ok(Trainer {
            extent: camera_extent(&views),
            sets: init.sets().map(SetMoments::new).collect(),
            corr_t: init
                .objects
                .iter()
                .map(|o| Moments::zeros(3 * o.corrections.len()))
                .collect(),
            corr_r: init
                .objects
                .iter()
                .map(|o| Moments::zeros(4 * o.corrections.len()))
                .collect(),
            sky: Moments::zeros(init.sky.texels.len()),
            accum: vec![0.0; n],
            count: vec![0; n],
            rng: rng(config.seed),
            generator_iters: config.generator_iters().into_iter().collect(),
            render: RenderConfig::default().with_parallelism(par),
            adam: Adam::default(),
            perceptual: PyramidGradientLoss::default(),
            scene: init,
            iteration: 0,
            views,
            holdout,
            novel,
            cache: Vec::new(),
            reference,
            config,
            window: (0.0, 0),
        })
    }

    fn crop_for(&self, cam: &PinholeCamera) -> Result<Option<CropResize>> {
        self.config
            .model_size()
            .map(|(h, w)| CropResize::new(cam.width(), cam.height(), h, w))
            .transpose()
    }

    /// Re-renders every novel camera and replaces the cache with the
    /// generator's output.
    pub fn refresh(&mut self, generator: &mut dyn NovelViewGenerator) -> Result<()> {
        let s = noise_scale(self.iteration, &self.config);
        let mut renders = Vec::with_capacity(self.novel.len());
        for nv in &self.novel {
            let rgb = render(&self.scene, &nv.camera, nv.time, &self.render)?.rgb;
            renders.push(match self.crop_for(&nv.camera)? {
                Some(op) => op.apply(&rgb),
                None => rgb,
            });
        }
        let conditions: Vec<ImageBuf> = self.novel.iter().map(|n| n.condition.clone()).collect();
        let request = GeneratorRequest {
            iteration: self.iteration,
            noise_scale: s,
            renders: &renders,
            conditions: &conditions,
            reference: &self.reference,
        };
        let out = generator.generate(&request)?;
        if out.len() != renders.len() {
            return Err(Error::GeneratorFailure(format!(
                "{} returned {} frames for {} cameras",
                generator.name(),
                out.len(),
                renders.len()
            )));
        }
        for (o, r) in out.iter().zip(&renders) {
            if o.width != r.width || o.height != r.height || o.channels != 3 {
                return Err(Error::GeneratorFailure(format!(
                    "{} returned a {}x{}x{} frame, expected {}x{}x3",
                    generator.name(),
                    o.width,
                    o.height,
                    o.channels,
                    r.width,
                    r.height
                )));
            }
        }
        log::info!(
            "iteration {}: refreshed {} novel views with {} at noise scale {s}",
            self.iteration,
            out.len(),
            generator.name()
        );
        self.cache = out;
        Ok(())
    }

    fn step_sizes(&self) -> StepSizes {
        let lr = &self.config.lr;
        StepSizes {
            position: exp_decay(
                lr.position_init * self.extent,
                lr.position_final * self.extent,
                self.iteration,
                self.config.iterations,
            ),
            rotation: lr.rotation,
            scaling: lr.scaling,
            opacity: lr.opacity,
            sh_dc: lr.sh_dc,
            sh_rest: lr.sh_rest,
        }
    }

    fn apply_gradients(&mut self, grads: &SceneGrads) {
        let t = self.iteration as u64 + 1;
        let lr = self.step_sizes();
        let adam = self.adam;
        let set_grads = std::iter::once(&grads.background).chain(grads.objects.iter().map(|o| &o.gaussians));
        for ((set, g), m) in self.scene.sets_mut().zip(set_grads).zip(self.sets.iter_mut()) {
            let stride = set.sh_stride();
            m.positions.step(
                &adam,
                t,
                set.positions.as_flattened_mut(),
                g.positions.as_flattened(),
                |_| lr.position,
            );
            m.rotations.step(
                &adam,
                t,
                set.rotations.as_flattened_mut(),
                g.rotations.as_flattened(),
                |_| lr.rotation,
            );
            m.log_scales.step(
                &adam,
                t,
                set.log_scales.as_flattened_mut(),
                g.log_scales.as_flattened(),
                |_| lr.scaling,
            );
            m.opacity
                .step(&adam, t, &mut set.opacity_logits, &g.opacity_logits, |_| lr.opacity);
            m.sh.step(&adam, t, &mut set.sh, &g.sh, |i| {
                if i % stride < 3 {
                    lr.sh_dc
                } else {
                    lr.sh_rest
                }
            });
        }
        let tr = &self.config.tracklet_lr;
        let (n, it) = (self.config.iterations, self.iteration);
        let lr_t = exp_decay(tr.translation_init, tr.translation_final, it, n);
        let lr_r = exp_decay(tr.rotation_init, tr.rotation_final, it, n);
        for (k, obj) in self.scene.objects.iter_mut().enumerate() {
            let g = &grads.objects[k].corrections;
            let mut p_t: Vec<f64> = obj.corrections.iter().flat_map(|c| c.translation).collect();
            let mut p_r: Vec<f64> = obj.corrections.iter().flat_map(|c| c.rotation).collect();
            let g_t: Vec<f64> = g.iter().flat_map(|c| c.translation).collect();
            let g_r: Vec<f64> = g.iter().flat_map(|c| c.rotation).collect();
            self.corr_t[k].step(&adam, t, &mut p_t, &g_t, |_| lr_t);
            self.corr_r[k].step(&adam, t, &mut p_r, &g_r, |_| lr_r);
            for (j, c) in obj.corrections.iter_mut().enumerate() {
                c.translation.copy_from_slice(&p_t[3 * j..3 * j + 3]);
                c.rotation.copy_from_slice(&p_r[4 * j..4 * j + 4]);
            }
        }
        let sky_lr = self.config.lr.sky;
        self.sky
            .step(&adam, t, &mut self.scene.sky.texels, &grads.sky, |_| sky_lr);
        self.scene.sky.clamp_unit();
    }

    fn densify(&mut self) -> DensifyReport {
        let params = DensifyParams::new(&self.config.densify, self.extent);
        let out = densify_and_prune(&mut self.scene, &self.accum, &self.count, &params, &mut self.rng);
        for ((m, origin), set) in self.sets.iter_mut().zip(&out.origins).zip(self.scene.sets()) {
            m.remap(origin, set.sh_stride());
        }
        let n = self.scene.gaussian_count();
        self.accum = vec![0.0; n];
        self.count = vec![0; n];
        log::debug!("iteration {}: densify {:?}", self.iteration, out.report);
        out.report
    }

    /// Runs one iteration. The generator is invoked first when the current
    /// iteration is on the refresh schedule.
    pub fn step(&mut self, generator: Option<&mut dyn NovelViewGenerator>) -> Result<StepReport> {
        let mut refreshed = false;
        if let Some(g) = generator {
            if self.config.novel_ratio > 0.0 && !self.novel.is_empty() && self.generator_iters.contains(&self.iteration)
            {
                self.refresh(g)?;
                refreshed = true;
            }
        }
        let n_novel = if self.cache.is_empty() { 0 } else { self.novel.len() };
        let choice = sample_camera(&mut self.rng, self.views.len(), n_novel, self.config.novel_ratio);
        let (camera, time) = if choice.novel {
            (self.novel[choice.index].camera, self.novel[choice.index].time)
        } else {
            (self.views[choice.index].camera, self.views[choice.index].time)
        };
        let out = render(&self.scene, &camera, time, &self.render)?;
        let (report, upstream) = if choice.novel {
            let crop = self.crop_for(&camera)?;
            let pred = crop.map_or_else(|| out.rgb.clone(), |op| op.apply(&out.rgb));
            let (rep, g) = novel_view_loss(&self.config.loss, &self.perceptual, &pred, &self.cache[choice.index])?;
            let g_img = ImageBuf {
                width: pred.width,
                height: pred.height,
                channels: 3,
                data: g,
            };
            let mut up = crate::gsplat::RenderGrad::zeros(out.width, out.height);
            up.rgb = crop.map_or(g_img.clone(), |op| op.adjoint(&g_img)).data;
            (rep, up)
        } else {
            let v = &self.views[choice.index];
            let targets = InputTargets {
                rgb: &v.rgb,
                lidar_depth: v.lidar.as_ref().map(|(d, m)| (d.as_slice(), m.as_slice())),
                sky_mask: v.sky.as_deref(),
            };
            input_view_loss(
                &self.config.loss,
                &self.perceptual,
                &out,
                &targets,
                self.config.reg_sign,
                self.config.depth_quantile,
            )?
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!("camera {} (novel: {}): {report:?}", choice.index, choice.novel),
            });
        }
        let grads = render_backward(&self.scene, &camera, time, &self.render, &upstream)?;
        if !grads.max_abs().is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.iteration,
                detail: format!(
                    "non-finite gradient at camera {} (novel: {})",
                    choice.index, choice.novel
                ),
            });
        }
        if self.iteration < self.config.densify.until {
            for (i, (&vis, &g)) in grads.visible.iter().zip(&grads.view_grad_norm).enumerate() {
                if vis {
                    self.accum[i] += g;
                    self.count[i] += 1;
                }
            }
        }
        self.apply_gradients(&grads);
        self.iteration += 1;
        let d = &self.config.densify;
        let densify =
            (self.iteration >= d.from && self.iteration <= d.until && self.iteration.is_multiple_of(d.interval))
                .then(|| self.densify());
        Ok(StepReport {
            choice,
            loss: report,
            densify,
            refreshed,
        })
    }

    fn record(&mut self, step: &StepReport) -> Result<MetricsRecord> {
        let holdout_psnr = if self.holdout.is_empty() {
            None
        } else {
            Some(mean_psnr(&self.scene, &self.holdout, &self.render)?)
        };
        let (sum, n) = std::mem::take(&mut self.window);
        Ok(MetricsRecord {
            iteration: self.iteration,
            novel: step.choice.novel,
            camera: step.choice.index,
            loss: step.loss,
            mean_total: sum / n.max(1) as f64,
            gaussians: self.scene.gaussian_count(),
            noise_scale: noise_scale(self.iteration, &self.config),
            cached_novel_views: self.cache.len(),
            holdout_psnr,
        })
    }

    /// Trains to `config.iterations`, calling `sink` with a metrics record
    /// and the current scene every `log_every` iterations and at the end.
    pub fn run(
        &mut self,
        mut generator: Option<&mut dyn NovelViewGenerator>,
        sink: &mut dyn FnMut(&MetricsRecord, &GaussianScene) -> Result<()>,
    ) -> Result<()> {
        while self.iteration < self.config.iterations {
            let g = generator.as_mut().map(|g| &mut **g as &mut dyn NovelViewGenerator);
            let step = self.step(g)?;
            self.window.0 += step.loss.total;
            self.window.1 += 1;
            if self.iteration.is_multiple_of(self.config.log_every) || self.iteration == self.config.iterations {
                let rec = self.record(&step)?;
                sink(&rec, &self.scene)?;
            }
        }
        Ok(())
    }
}
