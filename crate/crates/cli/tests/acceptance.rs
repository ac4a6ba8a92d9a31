//! Acceptance run: every criterion executes in this one process, in order,
//! and prints a single PASS/FAIL line. Exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use rand::Rng;

use lidarsplat::condition::{rasterize_condition_with, ConditionImage};
use lidarsplat::diffusion::{
    decode_all, encode_all, forward_noise, inject_condition, sample, sample_long, standard_normal, Denoiser,
    IdentityCodec, Latent, NoiseSchedule, OracleDenoiser, SampleInit, SampleOptions, ZeroConvInjector,
};
use lidarsplat::distill::{
    init_from_lidar, lane_shift_trajectory, noise_scale, GeneratorRequest, MockGenerator, NovelViewGenerator, Side,
    Trainer,
};
use lidarsplat::gsplat::gradcheck::{all_params, check_gradients, Field, Param};
use lidarsplat::gsplat::reference::{pixel_contributions, render_reference};
use lidarsplat::gsplat::{project_scene, render, Projected, RenderConfig};
use lidarsplat::losses::{
    depth_loss, l1, psnr, reg_loss, sky_loss, ssim, ssim_loss, LossReport, LossValue, LossWeights, PerceptualLoss,
    PyramidGradientLoss, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW,
};
use lidarsplat::pointcloud::{aggregate, decompose_scene, AggregatedCloud, ColoredPoint, Edit, EditScript, Provenance};
use lidarsplat::synthetic::{
    forward_camera, random_render_weights, random_splat_scene, rng, SplatFixture, SplatSceneOptions,
};
use lidarsplat::{ImageBuf, Parallelism, PinholeCamera, Se3Pose};

use common::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_budget(start: Instant, budget: Duration) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure(start.elapsed() < budget, || {
        format!("took {secs:.1} s, budget {} s", budget.as_secs())
    })?;
    Ok(secs)
}

fn random_image(seed: u64, w: usize, h: usize, c: usize) -> ImageBuf {
    let mut r = rng(seed);
    ImageBuf::from_fn(w, h, c, |_, _, _| r.random_range(0.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn category(p: &Param) -> &'static str {
    match p {
        Param::Gaussian {
            field: Field::Position, ..
        } => "mean",
        Param::Gaussian {
            field: Field::Rotation, ..
        } => "rotation",
        Param::Gaussian {
            field: Field::LogScale, ..
        } => "scale",
        Param::Gaussian {
            field: Field::Opacity, ..
        } => "opacity",
        Param::Gaussian { field: Field::Sh, .. } => "sh",
        Param::SkyTexel(_) => "sky_texel",
        Param::CorrectionTranslation { .. } => "correction_translation",
        Param::CorrectionRotation { .. } => "correction_rotation",
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = RenderConfig::smooth();
    let mut per: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for seed in 0..20u64 {
        let opts = SplatSceneOptions {
            background: 20 + seed as usize,
            objects: 1,
            per_object: 6,
            sh_degree: (seed % 4) as u32,
            ..Default::default()
        };
        let f = random_splat_scene(1000 + seed, &opts);
        ensure(f.scene.gaussian_count() <= 50, || "scene too large".into())?;
        let w = random_render_weights(2000 + seed, f.camera.width(), f.camera.height());
        let params = all_params(&f.scene);
        let mut groups: BTreeMap<&str, Vec<Param>> = BTreeMap::new();
        for p in params {
            groups.entry(category(&p)).or_default().push(p);
        }
        for (name, ps) in groups {
            let rep =
                check_gradients(&f.scene, &f.camera, f.time, &cfg, &w, &ps, 1e-4, 1e-6).map_err(|e| e.to_string())?;
            let slot = per.entry(name).or_default();
            slot.0 += rep.checked;
            slot.1 = slot.1.max(rep.max_rel_err);
            ensure(rep.max_rel_err < 1e-3, || {
                format!("seed {seed} {name}: {:?}", rep.worst)
            })?;
        }
    }
    ensure(per.len() == 8 && per.values().all(|(n, _)| *n > 0), || {
        format!("unchecked parameter kinds: {per:?}")
    })?;
    let secs = within_budget(start, Duration::from_secs(60))?;
    let worst = per.values().map(|v| v.1).fold(0.0, f64::max);
    let total: usize = per.values().map(|v| v.0).sum();
    Ok(format!(
        "{total} gradients over 8 parameter kinds, max rel err {worst:.2e}, {secs:.1} s"
    ))
}

fn oracle_scene(seed: u64) -> SplatFixture {
    let opts = SplatSceneOptions {
        background: 100 + 4 * seed as usize,
        objects: 2,
        per_object: 10,
        width: 48,
        height: 36,
        focal: 36.0,
        ..Default::default()
    };
    random_splat_scene(3000 + seed, &opts)
}

fn random_cloud(seed: u64) -> (AggregatedCloud, PinholeCamera, f64) {
    let mut r = rng(4000 + seed);
    let camera = forward_camera(40, 30, 30.0);
    let n = 100 + 20 * seed as usize;
    let mut points: Vec<ColoredPoint> = Vec::with_capacity(n);
    while points.len() < n {
        let k = points.len() as u32;
        if k > 0 && r.random_bool(0.1) {
            // exact depth ties exercise the canonical tie-break
            let mut p = points[r.random_range(0..points.len())];
            p.color = [r.random(), r.random(), r.random()];
            p.source_frame = r.random_range(0..4);
            p.source_index = k;
            points.push(p);
            continue;
        }
        points.push(ColoredPoint {
            position: Vector3::new(
                r.random_range(-2.0..12.0),
                r.random_range(-8.0..8.0),
                r.random_range(-6.0..6.0),
            ),
            color: [r.random(), r.random(), r.random()],
            source_frame: r.random_range(0..4),
            source_index: k,
        });
    }
    let provenance = vec![Provenance::Background; points.len()];
    let cloud = AggregatedCloud {
        points,
        provenance,
        query_time: 0.0,
        window: 1.0,
    };
    (cloud, camera, 0.02 + 0.01 * (seed % 8) as f64)
}

/// Every pixel against every point; smallest `(depth, frame, index, slot)` wins.
fn condition_oracle(cloud: &AggregatedCloud, camera: &PinholeCamera, radius_ndc: f64) -> ConditionImage {
    let (w, h) = (camera.width(), camera.height());
    let r = radius_ndc * w.min(h) as f64 / 2.0;
    let mut img = ConditionImage::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<((f64, u32, u32, u32), usize)> = None;
            for (slot, p) in cloud.points.iter().enumerate() {
                let Some((u, v, z)) = camera.project(&p.position) else {
                    continue;
                };
                let (dx, dy) = (x as f64 - u, y as f64 - v);
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let key = (z, p.source_frame, p.source_index, slot as u32);
                if best.is_none_or(|(b, _)| key < b) {
                    best = Some((key, slot));
                }
            }
            if let Some(((z, ..), slot)) = best {
                let i = y * w + x;
                img.mask[i] = true;
                img.depth[i] = z;
                img.source[i] = slot as u32;
                for c in 0..3 {
                    img.rgb.set(x, y, c, cloud.points[slot].color[c]);
                }
            }
        }
    }
    img
}

fn bit_identical(a: &ConditionImage, b: &ConditionImage) -> bool {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.mask == b.mask
        && a.source == b.source
        && bits(&a.depth) == bits(&b.depth)
        && bits(&a.rgb.data) == bits(&b.rgb.data)
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let f = oracle_scene(seed);
        ensure(f.scene.gaussian_count() <= 200, || "scene too large".into())?;
        let cfg = RenderConfig::default();
        let a = render(&f.scene, &f.camera, f.time, &cfg).map_err(|e| e.to_string())?;
        let b = render_reference(&f.scene, &f.camera, f.time, &cfg).map_err(|e| e.to_string())?;
        let d = [
            max_abs_diff(&a.rgb.data, &b.rgb.data),
            max_abs_diff(&a.depth, &b.depth),
            max_abs_diff(&a.opacity, &b.opacity),
            max_abs_diff(&a.object_alpha, &b.object_alpha),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d < 1e-6, || format!("render seed {seed}: max diff {d:e}"))?;
        let serial = render(&f.scene, &f.camera, f.time, &cfg.with_parallelism(Parallelism::Serial))
            .map_err(|e| e.to_string())?;
        ensure(serial == a, || {
            format!("render seed {seed}: serial and parallel differ")
        })?;
    }
    let mut covered = 0;
    for seed in 0..20 {
        let (cloud, camera, radius) = random_cloud(seed);
        ensure(cloud.len() <= 500, || "cloud too large".into())?;
        let oracle = condition_oracle(&cloud, &camera, radius);
        for par in [Parallelism::Serial, Parallelism::Parallel] {
            let got = rasterize_condition_with(&cloud, &camera, radius, par);
            ensure(bit_identical(&got, &oracle), || {
                format!("condition seed {seed} ({par:?}) differs from the oracle")
            })?;
        }
        covered += oracle.covered();
    }
    let secs = within_budget(start, Duration::from_secs(60))?;
    Ok(format!(
        "20 renders within {worst:.1e}; 20 condition images bit-identical ({covered} covered pixels); {secs:.1} s"
    ))
}

fn compositing_invariants() -> Outcome {
    let mut pixels = 0usize;
    let mut contributions = 0usize;
    for seed in 0..20 {
        let f = oracle_scene(seed);
        let cfg = RenderConfig::default();
        let out = render(&f.scene, &f.camera, f.time, &cfg).map_err(|e| e.to_string())?;
        let reference = render_reference(&f.scene, &f.camera, f.time, &cfg).map_err(|e| e.to_string())?;
        let proj = project_scene(&f.scene, &f.camera, f.time, &cfg).map_err(|e| e.to_string())?;
        let mut sorted: Vec<&Projected> = proj.iter().collect();
        sorted.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.global.cmp(&b.global)));
        let w = f.camera.width();
        for y in 0..f.camera.height() {
            for x in 0..w {
                let i = y * w + x;
                let contrib = pixel_contributions(&sorted, x as f64, y as f64, &cfg);
                let mut sum = 0.0;
                let mut trans = 1.0;
                for c in &contrib {
                    ensure(c.weight >= 0.0, || {
                        format!("seed {seed} pixel ({x},{y}): negative weight")
                    })?;
                    sum += c.weight;
                    trans *= 1.0 - c.weight / trans;
                }
                ensure((0.0..=1.0).contains(&sum), || {
                    format!("seed {seed} pixel ({x},{y}): sum of weights {sum}")
                })?;
                ensure(reference.opacity[i].to_bits() == sum.to_bits(), || {
                    format!(
                        "seed {seed} pixel ({x},{y}): opacity {} != sum of weights {sum}",
                        reference.opacity[i]
                    )
                })?;
                ensure(
                    (out.opacity[i] - sum).abs() <= 1e-12 && (sum - (1.0 - trans)).abs() <= 1e-12,
                    || {
                        format!(
                            "seed {seed} pixel ({x},{y}): tiled opacity {} vs sum {sum}",
                            out.opacity[i]
                        )
                    },
                )?;
                let sky = f.scene.sky.sample(&f.camera.ray_direction(x as f64, y as f64));
                let mut colors: Vec<[f64; 3]> = contrib.iter().map(|c| c.color).collect();
                if 1.0 - sum > 0.0 {
                    colors.push(sky);
                }
                for ch in 0..3 {
                    let lo = colors.iter().map(|c| c[ch]).fold(f64::INFINITY, f64::min);
                    let hi = colors.iter().map(|c| c[ch]).fold(f64::NEG_INFINITY, f64::max);
                    let v = out.rgb.get(x, y, ch);
                    ensure(v >= lo - 1e-12 && v <= hi + 1e-12, || {
                        format!("seed {seed} pixel ({x},{y}) channel {ch}: {v} outside [{lo}, {hi}]")
                    })?;
                }
                pixels += 1;
                contributions += contrib.len();
            }
        }
    }
    Ok(format!(
        "{pixels} pixels, {contributions} contributions on the 20 oracle scenes"
    ))
}

struct Scaled;

impl Denoiser for Scaled {
    fn evaluate(
        &self,
        x: &Latent,
        _t: usize,
        _frames: Range<usize>,
        c_ref: Option<&[f64]>,
        c_p: Option<&Latent>,
    ) -> lidarsplat::Result<Latent> {
        let k = if c_ref.is_some() { 0.9 } else { 0.5 };
        Ok(match c_p {
            Some(c) => x * k + c * 0.1,
            None => x * k - 0.2,
        })
    }
}

fn max_frame_diff(a: &[ImageBuf], b: &[ImageBuf]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| max_abs_diff(&x.data, &y.data))
        .fold(0.0, f64::max)
}

fn random_frames(seed: u64, n: usize, w: usize, h: usize) -> Vec<ImageBuf> {
    (0..n).map(|k| random_image(seed * 1000 + k as u64, w, h, 3)).collect()
}

fn diffusion_math() -> Outcome {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let mut r = rng(5000);
    let n = 100_000;
    for (x0v, ab) in [(0.8, 0.36), (-0.4, sched.alpha_bar(500))] {
        let x0 = Latent::from_elem((n, 1, 1, 1), x0v);
        let eps = standard_normal([n, 1, 1, 1], &mut r);
        let xt = forward_noise(&x0, ab, &eps).map_err(|e| e.to_string())?;
        let mean = xt.mean().unwrap_or(f64::NAN);
        let var = xt.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let want_mean = ab.sqrt() * x0v;
        ensure((mean - want_mean).abs() < 0.01 * want_mean.abs(), || {
            format!("mean {mean} vs {want_mean}")
        })?;
        ensure((var - (1.0 - ab)).abs() < 0.01 * (1.0 - ab), || {
            format!("variance {var} vs {}", 1.0 - ab)
        })?;
    }

    let zt = standard_normal([2, 3, 6, 7], &mut r);
    let zc = standard_normal([2, 4, 6, 7], &mut r);
    let injected = inject_condition(&zt, &zc, &ZeroConvInjector::zeros(3, 4, 3)).map_err(|e| e.to_string())?;
    ensure(
        injected.iter().zip(zt.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        || "zero injector changed z_t".into(),
    )?;

    let gt = random_frames(51, 4, 8, 6);
    let conds = random_frames(52, 4, 8, 6);
    let oracle = OracleDenoiser {
        clean: encode_all(&IdentityCodec, &gt).map_err(|e| e.to_string())?,
    };
    let long_gt = random_frames(53, 45, 6, 4);
    let long_oracle = OracleDenoiser {
        clean: encode_all(&IdentityCodec, &long_gt).map_err(|e| e.to_string())?,
    };
    let mut worst: f64 = 0.0;
    for steps in [1, 50] {
        let opts = SampleOptions {
            steps,
            ..Default::default()
        };
        for init in [
            SampleInit::PureNoise,
            SampleInit::NoisyRender {
                images: conds.clone(),
                scale: 0.5,
            },
        ] {
            let out = sample(
                &oracle,
                &sched,
                &IdentityCodec,
                None,
                &conds,
                &init,
                &opts,
                &mut rng(54),
            )
            .map_err(|e| e.to_string())?;
            let d = max_frame_diff(&out, &gt);
            worst = worst.max(d);
            ensure(d < 1e-6, || format!("single chunk, {steps} steps: {d:e}"))?;
        }
        let out = sample_long(
            &long_oracle,
            &sched,
            &IdentityCodec,
            None,
            &long_gt,
            &SampleInit::PureNoise,
            &opts,
            25,
            5,
            &mut rng(55),
        )
        .map_err(|e| e.to_string())?;
        ensure(out.len() == 45, || {
            format!("chunked sampling returned {} frames", out.len())
        })?;
        let d = max_frame_diff(&out, &long_gt);
        worst = worst.max(d);
        ensure(d < 1e-6, || format!("45 frames chunked, {steps} steps: {d:e}"))?;
    }

    let conds = random_frames(56, 2, 6, 5);
    let zc = encode_all(&IdentityCodec, &conds).map_err(|e| e.to_string())?;
    let opts = SampleOptions {
        steps: 10,
        cfg_scale: 1.0,
        ..Default::default()
    };
    let guided = sample(
        &Scaled,
        &sched,
        &IdentityCodec,
        Some(&[1.0]),
        &conds,
        &SampleInit::PureNoise,
        &opts,
        &mut rng(57),
    )
    .map_err(|e| e.to_string())?;
    let mut r = rng(57);
    let mut x = standard_normal([2, 3, 5, 6], &mut r);
    for pair in sched.ladder(1000, 10).windows(2) {
        let (t, tp) = (pair[0], pair[1]);
        let x0 = Scaled
            .evaluate(&x, t, 0..2, Some(&[1.0]), Some(&zc))
            .map_err(|e| e.to_string())?;
        if tp == 0 {
            x = x0;
        } else {
            let (at, ap) = (sched.alpha_bar(t), sched.alpha_bar(tp));
            let eps = (&x - &(&x0 * at.sqrt())) / (1.0 - at).sqrt();
            x = &x0 * ap.sqrt() + &eps * (1.0 - ap).sqrt();
        }
    }
    let conditional = decode_all(&IdentityCodec, &x).map_err(|e| e.to_string())?;
    let d = max_frame_diff(&guided, &conditional);
    ensure(d < 1e-9, || {
        format!("cfg_scale 1 differs from the conditional branch by {d:e}")
    })?;

    let renders = random_frames(58, 3, 6, 5);
    let init = SampleInit::NoisyRender {
        images: renders.clone(),
        scale: 0.0,
    };
    let out = sample(
        &Scaled,
        &sched,
        &IdentityCodec,
        None,
        &renders,
        &init,
        &SampleOptions::default(),
        &mut rng(59),
    )
    .map_err(|e| e.to_string())?;
    ensure(out == renders, || "NoisyRender with s = 0 changed the renders".into())?;

    let secs = within_budget(start, Duration::from_secs(30))?;
    Ok(format!(
        "Monte Carlo within 1%, oracle recovery within {worst:.1e}, cfg 1 within {d:.1e}; {secs:.1} s"
    ))
}

fn fd_rel_err(f: impl Fn(&[f64]) -> LossValue, x: &[f64], h: f64) -> f64 {
    let g = f(x).grad;
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let o = probe[i];
        probe[i] = o + h;
        let lp = f(&probe).value;
        probe[i] = o - h;
        let lm = f(&probe).value;
        probe[i] = o;
        let n = (lp - lm) / (2.0 * h);
        if g[i].abs() > 1e-6 || n.abs() > 1e-6 {
            worst = worst.max((g[i] - n).abs() / g[i].abs().max(n.abs()));
        }
    }
    worst
}

fn with_data(like: &ImageBuf, data: &[f64]) -> ImageBuf {
    ImageBuf {
        data: data.to_vec(),
        ..like.clone()
    }
}

fn ssim_direct(a: &ImageBuf, b: &ImageBuf) -> f64 {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let norm: f64 = raw.iter().sum();
    let k: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..a.channels {
        for oy in 0..=a.height - SSIM_WINDOW {
            for ox in 0..=a.width - SSIM_WINDOW {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for v in 0..SSIM_WINDOW {
                    for u in 0..SSIM_WINDOW {
                        let w = k[u] * k[v];
                        let (p, q) = (a.get(ox + u, oy + v, c), b.get(ox + u, oy + v, c));
                        ma += w * p;
                        mb += w * q;
                        aa += w * p * p;
                        bb += w * q * q;
                        ab += w * p * q;
                    }
                }
                let (va, vb, cv) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                total += (2.0 * ma * mb + SSIM_C1) * (2.0 * cv + SSIM_C2)
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{name}: {got} vs {want}"))
}

fn loss_closed_forms() -> Outcome {
    let e = |e: lidarsplat::Error| e.to_string();
    let zero = ImageBuf::filled(8, 8, 3, 0.0);
    let one = ImageBuf::filled(8, 8, 3, 1.0);
    let a = random_image(61, 32, 32, 3);
    let b = random_image(62, 32, 32, 3);
    close("l1 identical", l1(&a, &a).map_err(e)?.value, 0.0, 1e-9)?;
    close("l1 zero vs one", l1(&zero, &one).map_err(e)?.value, 1.0, 1e-9)?;
    let direct = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
    close("l1 random pair", l1(&a, &b).map_err(e)?.value, direct, 1e-12)?;

    close("ssim identical", ssim_loss(&a, &a).map_err(e)?.value, 0.0, 1e-9)?;
    let gray = random_image(63, 16, 14, 1);
    let flipped = ImageBuf::from_fn(16, 14, 1, |x, y, _| 1.0 - gray.get(x, y, 0));
    let s = ssim(&gray, &flipped).map_err(e)?;
    close("ssim vs negative", s, ssim_direct(&gray, &flipped), 1e-9)?;
    ensure(s < 0.0, || format!("ssim of an image and its negative is {s}"))?;

    let perceptual = PyramidGradientLoss::default();
    close(
        "perceptual identical",
        perceptual.eval(&a, &a).map_err(e)?.value,
        0.0,
        1e-9,
    )?;
    let offset = ImageBuf::from_fn(32, 32, 3, |x, y, c| a.get(x, y, c) + 0.1);
    close(
        "perceptual constant offset",
        perceptual.eval(&a, &offset).map_err(e)?.value,
        0.1,
        1e-9,
    )?;

    let lidar = vec![10.0; 100];
    let mut d = vec![10.1; 100];
    d[37] = 110.0;
    close(
        "depth outlier",
        depth_loss(&d, &lidar, &[true; 100], 0.95).map_err(e)?.value,
        0.1,
        1e-9,
    )?;
    close(
        "depth exact",
        depth_loss(&lidar, &lidar, &[true; 100], 0.95).map_err(e)?.value,
        0.0,
        1e-9,
    )?;
    close(
        "depth quantile 1",
        depth_loss(&d, &lidar, &[true; 100], 1.0).map_err(e)?.value,
        1.099,
        1e-9,
    )?;

    let halves = vec![0.5; 64];
    let mask: Vec<f64> = (0..64).map(|i| (i % 3 == 0) as u8 as f64).collect();
    close(
        "sky at one half",
        sky_loss(&halves, &mask).map_err(e)?.value,
        2f64.ln(),
        1e-9,
    )?;
    close(
        "sky saturated",
        sky_loss(&[1.0; 16], &[0.0; 16]).map_err(e)?.value,
        0.0,
        1e-5,
    )?;
    close("reg at one half", reg_loss(&halves).value, 2f64.ln(), 1e-9)?;
    close("reg endpoints", reg_loss(&[0.0, 1.0, 0.0]).value, 0.0, 2e-5)?;

    close("psnr identical", psnr(&a, &a).map_err(e)?, 99.0, 0.01)?;
    let p3 = ImageBuf::filled(8, 8, 3, 0.3);
    let p4 = ImageBuf::filled(8, 8, 3, 0.4);
    close("psnr mse 0.01", psnr(&p3, &p4).map_err(e)?, 20.0, 0.01)?;
    let shifted = ImageBuf::from_fn(8, 8, 3, |x, y, c| 0.1 + 0.8 * a.get(x, y, c));
    let plus = ImageBuf::from_fn(8, 8, 3, |x, y, c| shifted.get(x, y, c) + 0.1);
    close("psnr +0.1 offset", psnr(&shifted, &plus).map_err(e)?, 20.0, 0.01)?;

    let rep = LossReport {
        l1: 0.3,
        ssim: 0.2,
        perceptual: 0.5,
        depth: 1.5,
        sky: 0.7,
        reg: 0.4,
        ..Default::default()
    };
    let w = LossWeights::default();
    let expect = w.l1 * 0.3 + w.ssim * 0.2 + w.lpips * 0.5 + w.depth * 1.5 + w.sky * 0.7 + w.reg * 0.4;
    close("weighted total", rep.weighted(&w, 1.0), expect, 1e-12)?;

    let mut r = rng(64);
    let gray_a = random_image(65, 32, 32, 1);
    let gray_b = random_image(66, 32, 32, 1);
    let opacity: Vec<f64> = (0..1024).map(|_| r.random_range(0.05..0.95)).collect();
    let sky_mask: Vec<f64> = (0..1024).map(|_| r.random_range(0.0..1.0f64).round()).collect();
    let depth: Vec<f64> = (0..1024).map(|_| r.random_range(1.0..20.0)).collect();
    let lidar_depth: Vec<f64> = (0..1024).map(|_| r.random_range(1.0..20.0)).collect();
    let valid: Vec<bool> = (0..1024).map(|_| r.random_bool(0.7)).collect();
    let checks: [(&str, f64); 6] = [
        ("l1", fd_rel_err(|x| l1(&with_data(&a, x), &b).unwrap(), &a.data, 1e-6)),
        (
            "ssim",
            fd_rel_err(
                |x| ssim_loss(&with_data(&gray_a, x), &gray_b).unwrap(),
                &gray_a.data,
                1e-5,
            ),
        ),
        (
            "perceptual",
            fd_rel_err(|x| perceptual.eval(&with_data(&a, x), &b).unwrap(), &a.data, 1e-6),
        ),
        (
            "depth",
            fd_rel_err(|x| depth_loss(x, &lidar_depth, &valid, 0.95).unwrap(), &depth, 1e-6),
        ),
        ("sky", fd_rel_err(|x| sky_loss(x, &sky_mask).unwrap(), &opacity, 1e-6)),
        ("reg", fd_rel_err(reg_loss, &opacity, 1e-6)),
    ];
    for (name, err) in checks {
        ensure(err < 1e-3, || format!("{name} gradient rel err {err:e}"))?;
    }
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(format!(
        "closed forms hold; 6 loss gradients match finite differences, max rel err {worst:.1e}"
    ))
}

/// Mock generator that records the noise scale of every request.
struct Recording {
    scales: Vec<(usize, f64)>,
}

impl NovelViewGenerator for Recording {
    fn name(&self) -> String {
        "mock".into()
    }

    fn generate(&mut self, request: &GeneratorRequest<'_>) -> lidarsplat::Result<Vec<ImageBuf>> {
        self.scales.push((request.iteration, request.noise_scale));
        MockGenerator.generate(request)
    }
}

fn desk_distillation() -> Outcome {
    let fixture = street_fixture();
    let config = lidarsplat::synthetic::desk_distill_config();
    ensure(config.novel_ratio == 0.4, || {
        format!("novel ratio {}", config.novel_ratio)
    })?;
    ensure(config.densify.threshold == 0.0006, || {
        format!("densify threshold {}", config.densify.threshold)
    })?;
    ensure(noise_scale(config.generator_start, &config) == 0.7, || {
        "noise scale does not start at 0.7".into()
    })?;
    ensure(noise_scale(config.generator_end, &config) == 0.3, || {
        "noise scale does not end at 0.3".into()
    })?;
    ensure(noise_scale(config.iterations, &config) == 0.3, || {
        "noise scale leaves 0.3 after the last refresh".into()
    })?;

    let start = Instant::now();
    let par = Parallelism::Parallel;
    let init = init_from_lidar(&fixture.scene, &config.init, par).map_err(|e| e.to_string())?;
    let initial = init.gaussian_count();
    let mut trainer = Trainer::from_scene(init, &fixture.scene, config.clone(), par).map_err(|e| e.to_string())?;
    trainer.holdout = fixture.holdout.clone();
    let mut generator = Recording { scales: Vec::new() };
    let mut novel_steps = 0usize;
    let mut densified = 0usize;
    while trainer.iteration < config.iterations {
        let step = trainer.step(Some(&mut generator)).map_err(|e| e.to_string())?;
        novel_steps += step.choice.novel as usize;
        densified += step.densify.is_some() as usize;
    }
    let holdout =
        lidarsplat::distill::mean_psnr(&trainer.scene, &trainer.holdout, &trainer.render).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    let scales = &generator.scales;
    ensure(scales.first().map(|s| s.1) == Some(0.7), || {
        format!("first refresh scale {scales:?}")
    })?;
    ensure(scales.last().map(|s| s.1) == Some(0.3), || {
        format!("last refresh scale {scales:?}")
    })?;
    let share = novel_steps as f64 / (config.iterations - config.generator_start) as f64;
    ensure((share - 0.4).abs() < 0.05, || {
        format!("novel views drawn on {share:.3} of generator-phase steps")
    })?;
    ensure(densified > 0, || "densification never ran".into())?;
    ensure(holdout > 35.0, || {
        format!("held-out PSNR {holdout:.2} dB in {secs:.1} s")
    })?;
    ensure(secs < 120.0, || {
        format!("held-out PSNR {holdout:.2} dB but took {secs:.1} s")
    })?;
    Ok(format!(
        "held-out PSNR {holdout:.2} dB in {secs:.1} s; {} refreshes from 0.7 to 0.3; novel share {share:.3}; Gaussians {initial} -> {}",
        scales.len(),
        trainer.scene.gaussian_count()
    ))
}

fn projected_mean(cloud: &AggregatedCloud, id: &str, camera: &PinholeCamera) -> Option<(f64, f64)> {
    let mut sum = (0.0, 0.0);
    let mut n = 0;
    for (p, prov) in cloud.points.iter().zip(&cloud.provenance) {
        if *prov == Provenance::Object(id.into()) {
            let (u, v, _) = camera.project(&p.position)?;
            sum = (sum.0 + u, sum.1 + v);
            n += 1;
        }
    }
    (n > 0).then(|| (sum.0 / n as f64, sum.1 / n as f64))
}

fn geometry_and_editing() -> Outcome {
    let e = |e: lidarsplat::Error| e.to_string();
    let mut r = rng(70);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let axis = Vector3::new(
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            r.random_range(-50.0..50.0),
            r.random_range(-50.0..50.0),
            r.random_range(-5.0..5.0),
        );
        let pose = Se3Pose::from_axis_angle(axis, r.random_range(-3.1..3.1), t);
        let p = Vector3::new(
            r.random_range(-30.0..30.0),
            r.random_range(-30.0..30.0),
            r.random_range(-3.0..3.0),
        );
        let back = pose.inverse().transform_point(&pose.transform_point(&p));
        let id = pose.compose(&pose.inverse());
        worst = worst
            .max((back - p).norm())
            .max((id.rotation - nalgebra::Matrix3::identity()).abs().max())
            .max(id.translation.norm());
    }
    ensure(worst < 1e-9, || format!("SE(3) round trip error {worst:e}"))?;

    let fixture = street_fixture();
    let scene = &fixture.scene;
    let cams: Vec<PinholeCamera> = scene.frames().iter().map(|f| f.camera).collect();
    let left = lane_shift_trajectory(&cams, 3.0, Side::Left).map_err(e)?;
    let back = lane_shift_trajectory(&left, 3.0, Side::Right).map_err(e)?;
    let mut lane: f64 = 0.0;
    for ((a, b), l) in cams.iter().zip(&back).zip(&left) {
        lane = lane
            .max((a.center() - b.center()).norm())
            .max((a.world_to_camera.rotation - b.world_to_camera.rotation).abs().max());
        ensure(((l.center() - a.center()).norm() - 3.0).abs() < 1e-9, || {
            "left shift is not 3 m".into()
        })?;
    }
    ensure(lane < 1e-9, || format!("lane shift round trip error {lane:e}"))?;

    let cloud = decompose_scene(scene, Parallelism::Parallel).map_err(e)?;
    let frame = &scene.frames()[2];
    let car = "car_0";
    let plain = aggregate(&cloud, &scene.manifest.tracklets, frame.timestamp, 1.0, None).map_err(e)?;
    let removed_script = EditScript {
        edits: vec![Edit::Remove { object_id: car.into() }],
    };
    let removed = aggregate(
        &cloud,
        &scene.manifest.tracklets,
        frame.timestamp,
        1.0,
        Some(&removed_script),
    )
    .map_err(e)?;
    let car_pixels = |c: &AggregatedCloud| {
        let img = rasterize_condition_with(c, &frame.camera, 0.03, Parallelism::Parallel);
        img.source
            .iter()
            .filter(|&&s| s != lidarsplat::condition::NO_POINT)
            .filter(|&&s| c.provenance[s as usize] == Provenance::Object(car.into()))
            .count()
    };
    let before = car_pixels(&plain);
    ensure(before > 0, || "the car is not visible before removal".into())?;
    ensure(car_pixels(&removed) == 0, || {
        "removed car still has condition pixels".into()
    })?;
    ensure(!removed.provenance.contains(&Provenance::Object(car.into())), || {
        "removed car still has points".into()
    })?;

    let delta = Vector3::new(0.0, 1.0, 0.0);
    let moved_script = EditScript {
        edits: vec![Edit::Translate {
            object_id: car.into(),
            delta: Se3Pose::from_translation(delta),
        }],
    };
    let moved = aggregate(
        &cloud,
        &scene.manifest.tracklets,
        frame.timestamp,
        1.0,
        Some(&moved_script),
    )
    .map_err(e)?;
    let m0 = projected_mean(&plain, car, &frame.camera).ok_or("car not in view")?;
    let m1 = projected_mean(&moved, car, &frame.camera).ok_or("moved car not in view")?;
    let pts: Vec<Vector3<f64>> = plain
        .points
        .iter()
        .zip(&plain.provenance)
        .filter(|(_, p)| **p == Provenance::Object(car.into()))
        .map(|(p, _)| p.position)
        .collect();
    let centroid = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let (u0, v0, _) = frame.camera.project(&centroid).ok_or("centroid behind camera")?;
    let (u1, v1, _) = frame
        .camera
        .project(&(centroid + delta))
        .ok_or("moved centroid behind camera")?;
    let err = ((m1.0 - m0.0) - (u1 - u0)).hypot((m1.1 - m0.1) - (v1 - v0));
    ensure(err < 0.5, || format!("translated centroid off by {err:.3} px"))?;
    Ok(format!(
        "SE(3) {worst:.1e}, lane shift {lane:.1e}; Remove clears {before} car pixels; Translate centroid moved {:.2} px, off by {err:.3} px",
        (m1.0 - m0.0).hypot(m1.1 - m0.1)
    ))
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get().max(4));
    let runs = [("first", 1), ("second", 1), ("threaded", threads)];
    for (dir, t) in runs {
        run_pipeline(&tmp.path().join(dir), 11, t)?;
    }
    let base = tmp.path().join("first");
    let files = tree(&base).len();
    for other in ["second", "threaded"] {
        let diff = tree_diff(&base, &tmp.path().join(other));
        ensure(diff.is_empty(), || format!("{other} run differs in {diff:?}"))?;
    }
    Ok(format!(
        "7 subcommands, {files} artifacts byte-identical across 2 runs and 1 vs {threads} threads"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("renderer and condition oracle equivalence", oracle_equivalence),
        ("compositing invariants", compositing_invariants),
        ("diffusion math", diffusion_math),
        ("loss closed forms", loss_closed_forms),
        ("desk-scale distillation", desk_distillation),
        ("geometry and editing", geometry_and_editing),
        ("CLI determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
