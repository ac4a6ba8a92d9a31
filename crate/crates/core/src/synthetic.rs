//! Seeded synthetic fixtures: random splat scenes, random point clouds and
//! a small street scene with ground-truth Gaussians, LiDAR and images.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distill::InputView;
use crate::geometry::{CameraIntrinsics, PinholeCamera, Se3Pose};
use crate::gsplat::{
    render, sh, Gaussian3D, GaussianScene, GaussianSet, ObjectNode, RenderConfig, RenderGrad, SkyCubemap,
};
use crate::image::ImageBuf;
use crate::scene_io::{
    default_paths, FrameRecord, FrameTag, LidarRef, LidarScan, Scene, SceneManifest, TimedPose, TrackedBox,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Forward-looking camera at the origin: optical axis along world `+x`,
/// image up along world `+z`.
pub fn forward_camera(width: u32, height: u32, focal: f64) -> PinholeCamera {
    PinholeCamera::look_at(
        CameraIntrinsics::centered(focal, width, height),
        Vector3::zeros(),
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
    )
}

/// Options for [`random_splat_scene`].
#[derive(Debug, Clone, Copy)]
pub struct SplatSceneOptions {
    pub background: usize,
    pub objects: usize,
    pub per_object: usize,
    pub sh_degree: u32,
    pub face_size: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub max_opacity: f64,
}

impl Default for SplatSceneOptions {
    fn default() -> Self {
        SplatSceneOptions {
            background: 20,
            objects: 1,
            per_object: 5,
            sh_degree: 3,
            face_size: 4,
            width: 32,
            height: 24,
            focal: 30.0,
            max_opacity: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplatFixture {
    pub scene: GaussianScene,
    pub camera: PinholeCamera,
    pub time: f64,
}

fn random_quat(r: &mut ChaCha8Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(r));
    // Deliberately unnormalized so the normalization path is exercised.
    let scale = r.random_range(0.5..2.0) / q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v * scale)
}

fn random_gaussian(r: &mut ChaCha8Rng, position: [f64; 3], sh_degree: u32, max_opacity: f64) -> Gaussian3D {
    let n = sh::coeff_count(sh_degree);
    let mut coeffs = vec![0.0; n * 3];
    for c in 0..3 {
        coeffs[c] = sh::rgb_to_dc(r.random_range(0.1..0.9));
    }
    for v in coeffs.iter_mut().skip(3) {
        *v = r.random_range(-0.3..0.3);
    }
    Gaussian3D {
        position,
        rotation: random_quat(r),
        log_scale: std::array::from_fn(|_| r.random_range(0.05f64..0.4).ln()),
        opacity_logit: crate::gsplat::logit(r.random_range(0.1..max_opacity)),
        sh: coeffs,
    }
}

/// Random point inside the forward camera's frustum at depth `[near, far]`.
fn in_frustum(r: &mut ChaCha8Rng, opts: &SplatSceneOptions, near: f64, far: f64) -> [f64; 3] {
    let depth = r.random_range(near..far);
    let half_w = 0.5 * opts.width as f64 / opts.focal * depth;
    let half_h = 0.5 * opts.height as f64 / opts.focal * depth;
    [depth, r.random_range(-half_w..half_w), r.random_range(-half_h..half_h)]
}

/// Random scene in front of [`forward_camera`], with moving objects whose
/// tracklets have keyframes at `t = 0, 1, 2` and query time 0.6.
pub fn random_splat_scene(seed: u64, opts: &SplatSceneOptions) -> SplatFixture {
    let mut r = rng(seed);
    let mut sky = SkyCubemap::uniform(opts.face_size, [0.0; 3]);
    sky.texels.iter_mut().for_each(|v| *v = r.random_range(0.0..1.0));
    let mut scene = GaussianScene::new(opts.sh_degree, sky);
    for _ in 0..opts.background {
        let p = in_frustum(&mut r, opts, 3.0, 9.0);
        scene
            .background
            .push(random_gaussian(&mut r, p, opts.sh_degree, opts.max_opacity));
    }
    for k in 0..opts.objects {
        let anchor = in_frustum(&mut r, opts, 4.0, 7.0);
        let dims = [2.0, 1.5, 1.2];
        let poses = (0..3)
            .map(|i| {
                let yaw = r.random_range(-0.4..0.4);
                let t = Vector3::new(anchor[0] + 0.2 * i as f64, anchor[1] - 0.1 * i as f64, anchor[2]);
                TimedPose {
                    timestamp: i as f64,
                    pose: Se3Pose::from_axis_angle(Vector3::z(), yaw, t),
                }
            })
            .collect();
        let tracklet = TrackedBox {
            object_id: format!("obj_{k}"),
            class_label: "car".into(),
            dimensions: dims,
            poses,
        };
        let mut set = GaussianSet::new(opts.sh_degree);
        for _ in 0..opts.per_object {
            let p = std::array::from_fn(|a| r.random_range(-0.4..0.4) * dims[a]);
            set.push(random_gaussian(&mut r, p, opts.sh_degree, opts.max_opacity));
        }
        let mut node = ObjectNode::new(tracklet, set);
        for c in node.corrections.iter_mut() {
            c.translation = std::array::from_fn(|_| r.random_range(-0.05..0.05));
            let q = UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| r.random_range(-0.05..0.05)));
            c.rotation = [q.w, q.i, q.j, q.k];
        }
        scene.objects.push(node);
    }
    SplatFixture {
        scene,
        camera: forward_camera(opts.width, opts.height, opts.focal),
        time: 0.6,
    }
}

/// Random upstream weights for every render output.
pub fn random_render_weights(seed: u64, width: usize, height: usize) -> RenderGrad {
    let mut r = rng(seed);
    let mut g = RenderGrad::zeros(width, height);
    for v in g.rgb.iter_mut().chain(&mut g.opacity).chain(&mut g.object_alpha) {
        *v = r.random_range(-1.0..1.0);
    }
    for v in g.depth.iter_mut() {
        *v = r.random_range(-0.1..0.1);
    }
    g
}

/// Options for [`street_scene`].
#[derive(Debug, Clone, Copy)]
pub struct StreetOptions {
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub frames: usize,
    /// Ego displacement along `+x` between frames, in meters.
    pub stride: f64,
    pub frame_dt: f64,
}

impl Default for StreetOptions {
    fn default() -> Self {
        StreetOptions {
            width: 64,
            height: 48,
            focal: 40.0,
            frames: 5,
            stride: 0.5,
            frame_dt: 0.1,
        }
    }
}

/// A street scene with known Gaussians, the recorded frames derived from
/// it, and held-out cameras halfway between consecutive frames.
#[derive(Debug, Clone)]
pub struct StreetFixture {
    pub scene: Scene,
    pub truth: GaussianScene,
    pub holdout: Vec<InputView>,
}

fn street_camera(opts: &StreetOptions, x: f64) -> PinholeCamera {
    PinholeCamera::look_at(
        CameraIntrinsics::centered(opts.focal, opts.width, opts.height),
        Vector3::new(x, 0.0, 1.5),
        Vector3::new(x + 10.0, 0.0, 1.0),
        Vector3::z(),
    )
}

fn flat_gaussian(position: [f64; 3], scale: [f64; 3], color: [f64; 3], opacity: f64) -> Gaussian3D {
    Gaussian3D {
        position,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: scale.map(f64::ln),
        opacity_logit: crate::gsplat::logit(opacity),
        sh: color.iter().map(|c| sh::rgb_to_dc(*c)).collect(),
    }
}

fn jitter(r: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + r.random_range(-amount..amount)).clamp(0.02, 0.98))
}

/// Ground truth of about 500 Gaussians: a road surface, two facades, a few
/// posts and one car driving along `+x`, under a sky with a vertical
/// gradient. Degree-0 SH throughout.
pub fn street_truth(seed: u64, opts: &StreetOptions) -> GaussianScene {
    let mut r = rng(seed);
    let face = 4;
    let mut sky = SkyCubemap::uniform(face, [0.0; 3]);
    for t in 0..sky.texel_count() {
        let row = (t % (face * face)) / face;
        let f = row as f64 / (face - 1) as f64;
        let c = [0.45 + 0.1 * f, 0.6 + 0.1 * f, 0.85];
        sky.texels[3 * t..3 * t + 3].copy_from_slice(&c);
    }
    let mut scene = GaussianScene::new(0, sky);
    for i in 0..19 {
        for j in 0..13 {
            let p = [3.0 + i as f64, -6.0 + j as f64, 0.0];
            let base = if j == 6 { [0.85, 0.85, 0.3] } else { [0.35, 0.35, 0.38] };
            let c = jitter(&mut r, base, 0.08);
            scene.background.push(flat_gaussian(p, [0.6, 0.6, 0.05], c, 0.9));
        }
    }
    for side in [-1.0, 1.0] {
        let base = if side < 0.0 {
            [0.7, 0.45, 0.35]
        } else {
            [0.55, 0.6, 0.5]
        };
        for i in 0..19 {
            for k in 0..4 {
                let p = [3.0 + i as f64, 6.5 * side, 0.5 + k as f64];
                let c = jitter(&mut r, base, 0.12);
                scene.background.push(flat_gaussian(p, [0.6, 0.05, 0.6], c, 0.9));
            }
        }
    }
    for i in 0..6 {
        for k in 0..4 {
            let p = [4.0 + 3.0 * i as f64, 4.5, 0.4 + 0.8 * k as f64];
            let c = jitter(&mut r, [0.2, 0.25, 0.2], 0.05);
            scene.background.push(flat_gaussian(p, [0.12, 0.12, 0.45], c, 0.95));
        }
    }

    let dims = [4.0, 2.0, 1.5];
    let poses = (0..opts.frames)
        .map(|f| TimedPose {
            timestamp: f as f64 * opts.frame_dt,
            pose: Se3Pose::from_translation(Vector3::new(8.0 + 0.8 * f as f64, -2.5, 0.75)),
        })
        .collect();
    let tracklet = TrackedBox {
        object_id: "car_0".into(),
        class_label: "car".into(),
        dimensions: dims,
        poses,
    };
    let mut car = GaussianSet::new(0);
    for i in 0..6 {
        for j in 0..3 {
            for k in 0..3 {
                let p = [-1.5 + 0.6 * i as f64, -0.6 + 0.6 * j as f64, -0.45 + 0.4 * k as f64];
                let c = jitter(&mut r, [0.75, 0.12, 0.1], 0.08);
                car.push(flat_gaussian(p, [0.35, 0.35, 0.25], c, 0.95));
            }
        }
    }
    scene.objects.push(ObjectNode::new(tracklet, car));
    scene
}

fn gt_view(truth: &GaussianScene, camera: PinholeCamera, time: f64) -> crate::Result<(ImageBuf, Vec<f64>)> {
    let out = render(truth, &camera, time, &RenderConfig::default())?;
    let mut rgb = out.rgb;
    rgb.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok((rgb, out.opacity))
}

/// Frames, LiDAR (the true Gaussian centers), sky masks and held-out views
/// of [`street_truth`].
pub fn street_scene(seed: u64, opts: &StreetOptions) -> crate::Result<StreetFixture> {
    let truth = street_truth(seed, opts);
    let mut frames = Vec::new();
    let mut lidar = Vec::new();
    let mut images = Vec::new();
    let mut sky_masks = Vec::new();
    for f in 0..opts.frames {
        let t = f as f64 * opts.frame_dt;
        let camera = street_camera(opts, f as f64 * opts.stride);
        let (rgb, opacity) = gt_view(&truth, camera, t)?;
        let mut points: Vec<[f32; 3]> = truth.background.positions.iter().map(|p| p.map(|v| v as f32)).collect();
        for obj in &truth.objects {
            let pose = obj.pose_at(t)?.pose;
            for p in &obj.gaussians.positions {
                let w = pose.transform_point(&Vector3::from(*p));
                points.push([w.x as f32, w.y as f32, w.z as f32]);
            }
        }
        let (image, lidar_path, sky_path) = default_paths(f as u32);
        frames.push(FrameRecord {
            index: f as u32,
            timestamp: t,
            image,
            camera,
            lidar: LidarRef {
                path: lidar_path,
                timestamp: t,
                frame: FrameTag::World,
                ego_to_world: None,
            },
            sky_mask: Some(sky_path),
        });
        lidar.push(LidarScan {
            timestamp: t,
            frame_tag: FrameTag::World,
            ego_to_world: None,
            points,
        });
        images.push(rgb.to_rgb8());
        let w = opts.width as usize;
        sky_masks.push(Some(image::GrayImage::from_fn(opts.width, opts.height, |x, y| {
            image::Luma([if opacity[y as usize * w + x as usize] < 0.02 {
                255
            } else {
                0
            }])
        })));
    }
    let manifest = SceneManifest {
        frames,
        tracklets: truth.objects.iter().map(|o| o.tracklet.clone()).collect(),
        ..Default::default()
    };
    let mut holdout = Vec::new();
    for f in 0..opts.frames.saturating_sub(1) {
        let t = (f as f64 + 0.5) * opts.frame_dt;
        let camera = street_camera(opts, (f as f64 + 0.5) * opts.stride);
        let (rgb, _) = gt_view(&truth, camera, t)?;
        holdout.push(InputView {
            camera,
            time: t,
            rgb,
            lidar: None,
            sky: None,
        });
    }
    Ok(StreetFixture {
        scene: Scene {
            manifest,
            lidar,
            images,
            sky_masks,
        },
        truth,
        holdout,
    })
}

/// Training schedule for [`street_scene`] at its default size: default
/// hyperparameters, 3000 iterations, the generator phase compressed tenfold
/// (refreshes at 700, 1200, 1700 and 2200), densification over iterations
/// 500 to 1000 and a 32×64 model resolution.
pub fn desk_distill_config() -> crate::distill::DistillConfig {
    let mut cfg = crate::distill::DistillConfig {
        iterations: 3000,
        generator_start: 700,
        generator_interval: 500,
        generator_end: 2200,
        model_height: 32,
        model_width: 64,
        log_every: 250,
        ..Default::default()
    };
    cfg.densify.from = 500;
    cfg.densify.until = 1000;
    cfg
}
