use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use lidarsplat::condition::{crop_condition_for_model, rasterize_condition_with, ConditionImage};
use lidarsplat::diffusion::{
    encode_all, sample, sample_long, Denoiser, IdentityCodec, NoiseSchedule, OracleDenoiser, SampleInit, SampleOptions,
    TinyCheckpoint, TinyDenoiser,
};
use lidarsplat::distill::{
    init_from_lidar, lane_shift_trajectory, DirGenerator, DistillConfig, MockGenerator, NoisyGenerator,
    NovelViewGenerator, Side, Trainer,
};
use lidarsplat::gsplat::{apply_edits, checkpoint, render, GaussianScene, RenderConfig};
use lidarsplat::losses::{psnr, ssim};
use lidarsplat::pointcloud::{aggregate, decompose_scene, AggregatedCloud, DecomposedCloud, EditScript, Provenance};
use lidarsplat::scene_io::{load_scene, Scene};
use lidarsplat::synthetic::rng;
use lidarsplat::{Error, ImageBuf, Parallelism, PinholeCamera};

use crate::args::{
    BuildConditionArgs, Command, ConditionArgs, DenoiserArg, DistillArgs, EditArgs, EvalArgs, GeneratorArg, GlobalArgs,
    RenderArgs, SampleArgs, SideArg, ViewArgs,
};
use crate::UsageError;

/// Kernels run on the ambient rayon pool; results do not depend on its size.
const PAR: Parallelism = Parallelism::Parallel;

pub fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Validate { .. } => "validate",
        Command::BuildCondition(_) => "build-condition",
        Command::Render(_) => "render",
        Command::Edit(_) => "edit",
        Command::Distill(_) => "distill",
        Command::Sample(_) => "sample",
        Command::Eval(_) => "eval",
    }
}

pub fn dispatch(cmd: &Command, global: &GlobalArgs) -> Result<Value> {
    match cmd {
        Command::Validate { scene } => validate(scene),
        Command::BuildCondition(a) => build_condition(a),
        Command::Render(a) => render_view(a),
        Command::Edit(a) => edit(a),
        Command::Distill(a) => distill(a, global),
        Command::Sample(a) => sample_frames(a, global),
        Command::Eval(a) => eval(a),
    }
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn output_file(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn output_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn side(s: SideArg) -> Side {
    match s {
        SideArg::Left => Side::Left,
        SideArg::Right => Side::Right,
    }
}

fn load_valid_scene(root: &Path) -> Result<Scene> {
    let scene = load_scene(root)?;
    scene.validate()?;
    Ok(scene)
}

fn check_frame(scene: &Scene, frame: usize) -> Result<()> {
    let n = scene.frames().len();
    if frame < n {
        Ok(())
    } else {
        Err(usage(format!("frame {frame} out of range; the scene has {n} frames")))
    }
}

/// Cameras of every frame, lane-shifted when `lane_shift` is non-zero.
fn trajectory(scene: &Scene, lane_shift: f64, s: SideArg) -> Result<Vec<PinholeCamera>> {
    let cams: Vec<PinholeCamera> = scene.frames().iter().map(|f| f.camera).collect();
    if lane_shift == 0.0 {
        Ok(cams)
    } else {
        Ok(lane_shift_trajectory(&cams, lane_shift, side(s))?)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingAsset(path.to_path_buf()))?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{what} {}: {e}", path.display())))?)
}

fn load_camera(path: &Path) -> Result<PinholeCamera> {
    let camera: PinholeCamera = read_json(path, "camera pose file")?;
    camera.validate()?;
    Ok(camera)
}

/// The `--camera` pose if given, otherwise the (lane-shifted) frame camera.
fn view_camera(scene: &Scene, view: &ViewArgs) -> Result<PinholeCamera> {
    match &view.camera {
        Some(p) => load_camera(p),
        None => Ok(trajectory(scene, view.lane_shift, view.side)?[view.frame]),
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryEntry {
    timestamp: f64,
    camera: PinholeCamera,
}

fn query_time(scene: &Scene, view: &ViewArgs) -> f64 {
    view.time.unwrap_or(scene.frames()[view.frame].timestamp)
}

fn provenance_counts(cloud: &AggregatedCloud) -> Value {
    let mut background = 0usize;
    let mut objects: BTreeMap<String, usize> = BTreeMap::new();
    for p in &cloud.provenance {
        match p {
            Provenance::Background => background += 1,
            Provenance::Object(id) => *objects.entry(id.clone()).or_default() += 1,
        }
    }
    json!({ "background": background, "objects": objects })
}

fn condition_for(
    scene: &Scene,
    cloud: &DecomposedCloud,
    camera: &PinholeCamera,
    time: f64,
    args: &ConditionArgs,
    edits: Option<&EditScript>,
) -> Result<(AggregatedCloud, ConditionImage)> {
    let agg = aggregate(cloud, &scene.manifest.tracklets, time, args.window, edits)?;
    let mut cond = rasterize_condition_with(&agg, camera, args.radius, PAR);
    if let Some((h, w)) = args.model_size {
        cond = crop_condition_for_model(&cond, h, w)?;
    }
    Ok((agg, cond))
}

fn check_condition_args(args: &ConditionArgs) -> Result<()> {
    if args.window.is_nan() || args.window < 0.0 {
        return Err(usage(format!("--window must be non-negative, got {}", args.window)));
    }
    if args.radius.is_nan() || args.radius <= 0.0 {
        return Err(usage(format!("--radius must be positive, got {}", args.radius)));
    }
    Ok(())
}

/// Depth scaled by its maximum into a one-channel image.
fn normalized_depth(depth: &[f64], width: usize, height: usize) -> ImageBuf {
    let max = depth.iter().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    ImageBuf {
        width,
        height,
        channels: 1,
        data: depth
            .iter()
            .map(|d| if d.is_finite() { d * scale } else { 0.0 })
            .collect(),
    }
}

fn validate(root: &Path) -> Result<Value> {
    require_dir(root, "scene")?;
    let scene = load_valid_scene(root)?;
    let frames = scene.frames();
    let points: usize = scene.lidar.iter().map(|s| s.points.len()).sum();
    let first = &frames[0];
    Ok(json!({
        "scene": display(root),
        "frames": frames.len(),
        "tracklets": scene.manifest.tracklets.len(),
        "lidar_points": points,
        "width": first.camera.width(),
        "height": first.camera.height(),
        "start_time": first.timestamp,
        "end_time": frames[frames.len() - 1].timestamp,
        "sky_masks": scene.sky_masks.iter().filter(|m| m.is_some()).count(),
    }))
}

fn require_view(view: &ViewArgs) -> Result<()> {
    require_dir(&view.scene, "scene")?;
    if let Some(c) = &view.camera {
        require(c, "camera pose file")?;
    }
    Ok(())
}

fn build_condition(a: &BuildConditionArgs) -> Result<Value> {
    require_view(&a.view)?;
    if let Some(e) = &a.edit {
        require(e, "edit script")?;
    }
    check_condition_args(&a.condition)?;
    output_file(&a.out)?;
    if let Some(d) = &a.depth_out {
        output_file(d)?;
    }
    let scene = load_valid_scene(&a.view.scene)?;
    check_frame(&scene, a.view.frame)?;
    let edits = a.edit.as_deref().map(EditScript::load).transpose()?;
    let camera = view_camera(&scene, &a.view)?;
    let cloud = decompose_scene(&scene, PAR)?;
    let time = query_time(&scene, &a.view);
    let (agg, cond) = condition_for(&scene, &cloud, &camera, time, &a.condition, edits.as_ref())?;
    cond.rgb.save_png(&a.out)?;
    if let Some(d) = &a.depth_out {
        normalized_depth(&cond.depth, cond.width, cond.height).save_png(d)?;
    }
    Ok(json!({
        "out": display(&a.out),
        "width": cond.width,
        "height": cond.height,
        "time": time,
        "points": agg.len(),
        "covered_pixels": cond.covered(),
        "provenance": provenance_counts(&agg),
    }))
}

fn render_view(a: &RenderArgs) -> Result<Value> {
    require_view(&a.view)?;
    require(&a.checkpoint, "checkpoint")?;
    if let Some(e) = &a.edit {
        require(e, "edit script")?;
    }
    output_file(&a.out)?;
    if let Some(d) = &a.depth_out {
        output_file(d)?;
    }
    let scene = load_valid_scene(&a.view.scene)?;
    check_frame(&scene, a.view.frame)?;
    let mut gs = checkpoint::load(&a.checkpoint)?;
    if let Some(e) = &a.edit {
        gs = apply_edits(&gs, &EditScript::load(e)?)?;
    }
    let camera = view_camera(&scene, &a.view)?;
    let time = query_time(&scene, &a.view);
    let out = render(&gs, &camera, time, &RenderConfig::default().with_parallelism(PAR))?;
    out.rgb.save_png(&a.out)?;
    if let Some(d) = &a.depth_out {
        normalized_depth(&out.depth, out.width, out.height).save_png(d)?;
    }
    let coverage = out.opacity.iter().sum::<f64>() / out.opacity.len().max(1) as f64;
    Ok(json!({
        "out": display(&a.out),
        "width": out.width,
        "height": out.height,
        "time": time,
        "gaussians": gs.gaussian_count(),
        "objects": gs.objects.len(),
        "mean_opacity": coverage,
    }))
}

fn edit(a: &EditArgs) -> Result<Value> {
    require_dir(&a.scene, "scene")?;
    require(&a.edit, "edit script")?;
    if let Some(c) = &a.checkpoint {
        require(c, "checkpoint")?;
    }
    check_condition_args(&a.condition)?;
    output_dir(&a.out)?;
    if let Some(c) = &a.checkpoint_out {
        output_file(c)?;
    }
    let scene = load_valid_scene(&a.scene)?;
    let script = EditScript::load(&a.edit)?;
    let cams = trajectory(&scene, a.lane_shift, a.side)?;
    let cloud = decompose_scene(&scene, PAR)?;
    let mut frames = Vec::new();
    for (i, (frame, cam)) in scene.frames().iter().zip(&cams).enumerate() {
        let (agg, cond) = condition_for(&scene, &cloud, cam, frame.timestamp, &a.condition, Some(&script))?;
        let path = a.out.join(format!("{i:04}.png"));
        cond.rgb.save_png(&path)?;
        frames.push(json!({
            "frame": i,
            "out": display(&path),
            "covered_pixels": cond.covered(),
            "provenance": provenance_counts(&agg),
        }));
    }
    let mut report = json!({
        "edits": script.edits.len(),
        "frames": frames,
    });
    if let (Some(src), Some(dst)) = (&a.checkpoint, &a.checkpoint_out) {
        let edited = apply_edits(&checkpoint::load(src)?, &script)?;
        checkpoint::save(&edited, dst)?;
        report["checkpoint_out"] = json!(display(dst));
        report["objects"] = json!(edited.objects.len());
        report["gaussians"] = json!(edited.gaussian_count());
    }
    Ok(report)
}

fn make_generator(g: &GeneratorArg, seed: u64) -> Option<Box<dyn NovelViewGenerator>> {
    match g {
        GeneratorArg::None => None,
        GeneratorArg::Mock => Some(Box::new(MockGenerator)),
        GeneratorArg::Noisy => Some(Box::new(NoisyGenerator::new(seed))),
        GeneratorArg::Dir(p) => Some(Box::new(DirGenerator::new(p))),
    }
}

fn distill(a: &DistillArgs, global: &GlobalArgs) -> Result<Value> {
    require_dir(&a.scene, "scene")?;
    if let Some(c) = &a.config {
        require(c, "config")?;
    }
    if let Some(i) = &a.init {
        require(i, "initial checkpoint")?;
    }
    if let GeneratorArg::Dir(p) = &a.generator {
        require_dir(p, "generator directory")?;
    }
    let mut config = match &a.config {
        Some(p) => DistillConfig::load(p)?,
        None => DistillConfig::default(),
    };
    if let Some(s) = global.seed {
        config.seed = s;
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    config.validate()?;
    let ckpt_dir = a.out.join("checkpoints");
    output_dir(&a.out)?;
    if config.checkpoint_every > 0 {
        output_dir(&ckpt_dir)?;
    }
    std::fs::write(a.out.join("config.toml"), config.to_toml()).context("writing config.toml")?;

    let scene = load_valid_scene(&a.scene)?;
    let init = match &a.init {
        Some(p) => checkpoint::load(p)?,
        None => init_from_lidar(&scene, &config.init, PAR)?,
    };
    let initial = init.gaussian_count();
    let mut trainer = Trainer::from_scene(init, &scene, config.clone(), PAR)?;
    let mut generator = make_generator(&a.generator, config.seed);
    let gen_name = generator.as_ref().map_or_else(|| "none".to_string(), |g| g.name());

    let metrics_path = a.out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).context("creating metrics.jsonl")?);
    let mut last = None;
    let every = config.checkpoint_every;
    let outcome = trainer.run(
        generator.as_mut().map(|g| &mut **g as &mut dyn NovelViewGenerator),
        &mut |rec, gs: &GaussianScene| {
            let line = serde_json::to_string(rec).map_err(|e| Error::Schema(e.to_string()))?;
            writeln!(metrics, "{line}").map_err(|e| Error::Schema(format!("writing metrics: {e}")))?;
            if every > 0 && rec.iteration % every == 0 {
                checkpoint::save(gs, &ckpt_dir.join(format!("iter_{:06}.lsgs", rec.iteration)))?;
            }
            last = Some(rec.clone());
            Ok(())
        },
    );
    metrics.flush().context("writing metrics.jsonl")?;
    if let Err(e) = outcome {
        if matches!(e, Error::NonFiniteLoss { .. }) {
            let dump = a.out.join("failure.lsgs");
            checkpoint::save(&trainer.scene, &dump)?;
            return Err(anyhow::Error::new(e).context(format!("scene state saved to {}", dump.display())));
        }
        return Err(e.into());
    }
    let final_path = a.out.join("final.lsgs");
    checkpoint::save(&trainer.scene, &final_path)?;
    let last = last.expect("run reports the final iteration");
    Ok(json!({
        "out": display(&a.out),
        "checkpoint": display(&final_path),
        "metrics": display(&metrics_path),
        "generator": gen_name,
        "seed": config.seed,
        "iterations": trainer.iteration,
        "training_views": trainer.views.len(),
        "holdout_views": trainer.holdout.len(),
        "novel_cameras": trainer.novel.len(),
        "initial_gaussians": initial,
        "gaussians": trainer.scene.gaussian_count(),
        "final_mean_loss": last.mean_total,
        "holdout_psnr": last.holdout_psnr,
    }))
}

/// PNG files of `dir` in file-name order.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn load_pngs(dir: &Path) -> Result<Vec<ImageBuf>> {
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(usage(format!("no PNG files in {}", dir.display())));
    }
    files.iter().map(|p| Ok(ImageBuf::load_rgb(p)?)).collect()
}

/// Condition images of `root` along the recorded cameras or a trajectory file.
fn scene_conditions(root: &Path, traj: Option<&Path>, args: &ConditionArgs) -> Result<Vec<ImageBuf>> {
    let scene = load_valid_scene(root)?;
    let views: Vec<(f64, PinholeCamera)> = match traj {
        Some(p) => {
            let entries: Vec<TrajectoryEntry> = read_json(p, "trajectory")?;
            for e in &entries {
                e.camera.validate()?;
            }
            entries.into_iter().map(|e| (e.timestamp, e.camera)).collect()
        }
        None => scene.frames().iter().map(|f| (f.timestamp, f.camera)).collect(),
    };
    if views.is_empty() {
        return Err(usage("the trajectory has no cameras".into()));
    }
    let cloud = decompose_scene(&scene, PAR)?;
    views
        .iter()
        .map(|(t, cam)| Ok(condition_for(&scene, &cloud, cam, *t, args, None)?.1.rgb))
        .collect()
}

fn sample_frames(a: &SampleArgs, global: &GlobalArgs) -> Result<Value> {
    if let Some(c) = &a.conditions {
        require_dir(c, "conditions directory")?;
    }
    if let Some(s) = &a.scene {
        require_dir(s, "scene")?;
        check_condition_args(&a.condition)?;
    }
    if let Some(t) = &a.trajectory {
        require(t, "trajectory")?;
    }
    if let Some(r) = &a.renders {
        require_dir(r, "renders directory")?;
    }
    if let Some(r) = &a.reference {
        require(r, "reference image")?;
    }
    match &a.denoiser {
        DenoiserArg::Tiny(Some(p)) => require(p, "denoiser checkpoint")?,
        DenoiserArg::Oracle(p) => require_dir(p, "oracle directory")?,
        DenoiserArg::Tiny(None) => {}
    }
    if a.steps == 0 {
        return Err(usage("--steps must be positive".into()));
    }
    output_dir(&a.out)?;

    let conditions = match (&a.conditions, &a.scene) {
        (Some(dir), _) => load_pngs(dir)?,
        (None, Some(root)) => scene_conditions(root, a.trajectory.as_deref(), &a.condition)?,
        (None, None) => return Err(usage("one of --conditions or --scene is required".into())),
    };
    let (tiny, injector) = match &a.denoiser {
        DenoiserArg::Tiny(Some(p)) => {
            let ck = TinyCheckpoint::load(p)?;
            (Some(ck.denoiser), Some(ck.injector))
        }
        DenoiserArg::Tiny(None) => (Some(TinyDenoiser::new(3)), None),
        DenoiserArg::Oracle(_) => (None, None),
    };
    let oracle = match &a.denoiser {
        DenoiserArg::Oracle(p) => Some(OracleDenoiser {
            clean: encode_all(&IdentityCodec, &load_pngs(p)?)?,
        }),
        _ => None,
    };
    let denoiser: &dyn Denoiser = match (&tiny, &oracle) {
        (Some(t), _) => t,
        (None, Some(o)) => o,
        (None, None) => unreachable!("one denoiser is always built"),
    };
    let init = match (&a.renders, a.noise_scale) {
        (Some(dir), Some(scale)) => SampleInit::NoisyRender {
            images: load_pngs(dir)?,
            scale,
        },
        _ => SampleInit::PureNoise,
    };
    let reference: Option<Vec<f64>> = a
        .reference
        .as_deref()
        .map(|p| -> Result<Vec<f64>> {
            let img = ImageBuf::load_rgb(p)?;
            let n = (img.width * img.height).max(1) as f64;
            Ok((0..3)
                .map(|c| img.data.iter().skip(c).step_by(3).sum::<f64>() / n)
                .collect())
        })
        .transpose()?;
    let options = SampleOptions {
        steps: a.steps,
        cfg_scale: a.cfg_scale,
        injector,
        ..Default::default()
    };
    let schedule = NoiseSchedule::default();
    let mut r = rng(global.seed.unwrap_or(0));
    let frames = conditions.len();
    let chunked = frames > a.chunk;
    let out = if chunked {
        sample_long(
            denoiser,
            &schedule,
            &IdentityCodec,
            reference.as_deref(),
            &conditions,
            &init,
            &options,
            a.chunk,
            a.overlap,
            &mut r,
        )?
    } else {
        sample(
            denoiser,
            &schedule,
            &IdentityCodec,
            reference.as_deref(),
            &conditions,
            &init,
            &options,
            &mut r,
        )?
    };
    for (k, img) in out.iter().enumerate() {
        img.save_png(&a.out.join(format!("{k:04}.png")))?;
    }
    Ok(json!({
        "out": display(&a.out),
        "frames": frames,
        "width": out[0].width,
        "height": out[0].height,
        "steps": a.steps,
        "cfg_scale": a.cfg_scale,
        "chunked": chunked,
        "init": if a.renders.is_some() { "noisy_render" } else { "pure_noise" },
    }))
}

fn eval(a: &EvalArgs) -> Result<Value> {
    require_dir(&a.pred, "prediction directory")?;
    require_dir(&a.gt, "ground-truth directory")?;
    let preds = png_files(&a.pred)?;
    if preds.is_empty() {
        return Err(usage(format!("no PNG files in {}", a.pred.display())));
    }
    let mut frames = Vec::new();
    let (mut sum_psnr, mut sum_ssim) = (0.0, 0.0);
    for p in &preds {
        let name = p.file_name().expect("listed files have names");
        let g = a.gt.join(name);
        if !g.is_file() {
            return Err(Error::MissingAsset(g).into());
        }
        let (pi, gi) = (ImageBuf::load_rgb(p)?, ImageBuf::load_rgb(&g)?);
        let (ps, ss) = (psnr(&pi, &gi)?, ssim(&pi, &gi)?);
        sum_psnr += ps;
        sum_ssim += ss;
        frames.push(json!({ "frame": name.to_string_lossy(), "psnr": ps, "ssim": ss }));
    }
    let n = preds.len() as f64;
    Ok(json!({
        "frames": frames,
        "count": preds.len(),
        "mean_psnr": sum_psnr / n,
        "mean_ssim": sum_ssim / n,
    }))
}
