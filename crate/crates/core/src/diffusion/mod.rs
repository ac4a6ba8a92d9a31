//! Network-agnostic video-diffusion mathematics: forward noising, zero-
//! initialized condition injection, the conditional training objective,
//! guided DDIM sampling with optional noisy-render initialization, and
//! chunked long-sequence sampling with overlap clamping.
//!
//! The denoiser predicts the clean latent `x̂0`. An ε-predicting network
//! plugs in through `x̂0 = (x_t - sqrt(1 - ᾱ_t) ε̂) / sqrt(ᾱ_t)`.

mod tiny;

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::image::ImageBuf;
use crate::{Error, Result};

pub use tiny::{TinyCheckpoint, TinyDenoiser};

/// `frames x channels x height x width`.
pub type Latent = Array4<f64>;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CFG_SCALE: f64 = 2.5;
pub const DEFAULT_CHUNK: usize = 25;
pub const DEFAULT_OVERLAP: usize = 5;
pub const DEFAULT_DROPOUT: f64 = 0.15;

/// Discrete cosine `ᾱ` schedule. `alpha_bar[0] = 1` (clean) and
/// `alpha_bar[t]` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with offset `s = 0.008` and betas clipped at 0.999.
    pub fn cosine(steps: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| {
            (((t / steps as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2)
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..=steps {
            let beta = (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(0.999);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        NoiseSchedule { steps, alpha_bar }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Noise scale `s ∈ [0, 1]` to timestep `round(s·T)`.
    pub fn timestep_for_scale(&self, scale: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&scale) {
            return Err(Error::InvalidScale(scale));
        }
        Ok((scale * self.steps as f64).round() as usize)
    }

    /// Descending ladder from `t_start` to 0 with `ceil(n·t_start/T)`
    /// intervals for an `n`-step full-range sampler.
    pub fn ladder(&self, t_start: usize, steps: usize) -> Vec<usize> {
        if t_start == 0 {
            return vec![0];
        }
        let n = ((steps.max(1) * t_start) as f64 / self.steps as f64).ceil().max(1.0) as usize;
        let mut out: Vec<usize> = (0..=n)
            .map(|i| ((t_start as f64) * (n - i) as f64 / n as f64).round() as usize)
            .collect();
        out.dedup();
        out
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(1000)
    }
}

fn check_shape(a: &Latent, b: &Latent, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Standard normal latent drawn sequentially from `rng`.
pub fn standard_normal(shape: [usize; 4], rng: &mut impl Rng) -> Latent {
    Array4::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) ε`.
pub fn forward_noise(x0: &Latent, alpha_bar: f64, eps: &Latent) -> Result<Latent> {
    check_shape(x0, eps, "forward_noise")?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(ndarray::Zip::from(x0).and(eps).map_collect(|x, e| a * x + b * e))
}

/// `k x k` convolution over condition channels with zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroConvInjector {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    /// `[out][in][ky][kx]`, flattened.
    pub weights: Vec<f64>,
}

impl ZeroConvInjector {
    /// All-zero kernel: injection is an exact no-op.
    pub fn zeros(out_channels: usize, in_channels: usize, kernel_size: usize) -> Self {
        assert!(kernel_size % 2 == 1, "kernel size must be odd");
        ZeroConvInjector {
            out_channels,
            in_channels,
            kernel_size,
            weights: vec![0.0; out_channels * in_channels * kernel_size * kernel_size],
        }
    }

    /// Center tap 1 on the matching channel: output = input channels.
    pub fn identity(channels: usize, kernel_size: usize) -> Self {
        let mut z = Self::zeros(channels, channels, kernel_size);
        let c = kernel_size / 2;
        for ch in 0..channels {
            let i = z.index(ch, ch, c, c);
            z.weights[i] = 1.0;
        }
        z
    }

    pub fn index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_size + ky) * self.kernel_size + kx
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| *w == 0.0)
    }

    /// Convolves every frame of `z_c`.
    pub fn apply(&self, z_c: &Latent) -> Result<Latent> {
        let (f, c, h, w) = z_c.dim();
        if c != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "injector expects {} condition channels, got {c}",
                self.in_channels
            )));
        }
        let mut out = Array4::zeros((f, self.out_channels, h, w));
        let r = (self.kernel_size / 2) as isize;
        for fi in 0..f {
            for o in 0..self.out_channels {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for i in 0..c {
                            for ky in 0..self.kernel_size {
                                let yy = y as isize + ky as isize - r;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for kx in 0..self.kernel_size {
                                    let xx = x as isize + kx as isize - r;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    acc +=
                                        self.weights[self.index(o, i, ky, kx)] * z_c[[fi, i, yy as usize, xx as usize]];
                                }
                            }
                        }
                        out[[fi, o, y, x]] = acc;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `ẑ = z_t + Z(z_c)`. A zero kernel returns `z_t` unchanged.
pub fn inject_condition(z_t: &Latent, z_c: &Latent, injector: &ZeroConvInjector) -> Result<Latent> {
    let (f, _, h, w) = z_t.dim();
    let (fc, _, hc, wc) = z_c.dim();
    if (f, h, w) != (fc, hc, wc) {
        return Err(Error::ShapeMismatch(format!(
            "condition latent {:?} vs noisy latent {:?}",
            z_c.shape(),
            z_t.shape()
        )));
    }
    if injector.out_channels != z_t.dim().1 {
        return Err(Error::ShapeMismatch(format!(
            "injector emits {} channels, latent has {}",
            injector.out_channels,
            z_t.dim().1
        )));
    }
    if injector.is_zero() {
        return Ok(z_t.clone());
    }
    Ok(z_t + &injector.apply(z_c)?)
}

/// Predicts the clean latent.
pub trait Denoiser: Sync {
    /// `frames` gives the absolute frame indices of `x_t` within the
    /// sequence being sampled. `None` conditioning means null (dropped).
    fn evaluate(
        &self,
        x_t: &Latent,
        t: usize,
        frames: Range<usize>,
        c_ref: Option<&[f64]>,
        c_p: Option<&Latent>,
    ) -> Result<Latent>;
}

/// Maps images to latents and back.
pub trait Codec: Sync {
    fn encode(&self, image: &ImageBuf) -> Result<Array3<f64>>;
    fn decode(&self, latent: ArrayView3<'_, f64>) -> Result<ImageBuf>;
}

/// Latent = image, channel-first.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, image: &ImageBuf) -> Result<Array3<f64>> {
        Ok(Array3::from_shape_fn(
            (image.channels, image.height, image.width),
            |(c, y, x)| image.get(x, y, c),
        ))
    }

    fn decode(&self, latent: ArrayView3<'_, f64>) -> Result<ImageBuf> {
        let (c, h, w) = latent.dim();
        Ok(ImageBuf::from_fn(w, h, c, |x, y, ch| latent[[ch, y, x]]))
    }
}

pub fn encode_all(codec: &dyn Codec, images: &[ImageBuf]) -> Result<Latent> {
    let frames = images.iter().map(|i| codec.encode(i)).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    if views.is_empty() {
        return Err(Error::ShapeMismatch("no frames to encode".into()));
    }
    ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn decode_all(codec: &dyn Codec, latent: &Latent) -> Result<Vec<ImageBuf>> {
    latent.outer_iter().map(|f| codec.decode(f)).collect()
}

/// Returns fixed clean latents regardless of its input.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub clean: Latent,
}

impl Denoiser for OracleDenoiser {
    fn evaluate(
        &self,
        x_t: &Latent,
        _t: usize,
        frames: Range<usize>,
        _c_ref: Option<&[f64]>,
        _c_p: Option<&Latent>,
    ) -> Result<Latent> {
        if frames.end > self.clean.dim().0 {
            return Err(Error::ShapeMismatch(format!(
                "oracle holds {} frames, asked for {frames:?}",
                self.clean.dim().0
            )));
        }
        let out = self.clean.slice(s![frames, .., .., ..]).to_owned();
        check_shape(&out, x_t, "oracle output")?;
        Ok(out)
    }
}

/// Outcome of one draw of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingDraw {
    pub t: usize,
    pub dropped_ref: bool,
    pub dropped_cond: bool,
    pub loss: f64,
}

/// Draws `t`, noise and condition dropout, and returns the squared error
/// of the denoiser's prediction of `z`.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    injector: &ZeroConvInjector,
    z: &Latent,
    z_c: &Latent,
    c_ref: &[f64],
    dropout: f64,
    rng: &mut impl Rng,
) -> Result<TrainingDraw> {
    let t = rng.random_range(1..=schedule.steps);
    let eps = standard_normal(dim4(z), rng);
    let dropped_ref = rng.random_bool(dropout);
    let dropped_cond = rng.random_bool(dropout);
    let z_t = forward_noise(z, schedule.alpha_bar(t), &eps)?;
    let input = if dropped_cond {
        z_t
    } else {
        inject_condition(&z_t, z_c, injector)?
    };
    let pred = denoiser.evaluate(
        &input,
        t,
        0..z.dim().0,
        (!dropped_ref).then_some(c_ref),
        (!dropped_cond).then_some(z_c),
    )?;
    check_shape(&pred, z, "denoiser output")?;
    let loss = (&pred - z).mapv(|v| v * v).mean().unwrap_or(0.0);
    Ok(TrainingDraw {
        t,
        dropped_ref,
        dropped_cond,
        loss,
    })
}

fn dim4(z: &Latent) -> [usize; 4] {
    let (a, b, c, d) = z.dim();
    [a, b, c, d]
}

/// Where sampling starts.
#[derive(Debug, Clone)]
pub enum SampleInit {
    PureNoise,
    /// Encoded renders noised to timestep `round(s·T)`.
    NoisyRender {
        images: Vec<ImageBuf>,
        scale: f64,
    },
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub injector: Option<ZeroConvInjector>,
    /// Frame index (within this call) to clean latent `C x H x W`; these
    /// frames' `x̂0` are overwritten at every step.
    pub clamp_frames: BTreeMap<usize, Array3<f64>>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            steps: DEFAULT_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            injector: None,
            clamp_frames: BTreeMap::new(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sample_latent(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    codec: &dyn Codec,
    c_ref: Option<&[f64]>,
    z_c: &Latent,
    init: &SampleInit,
    opts: &SampleOptions,
    frames: Range<usize>,
    rng: &mut impl Rng,
) -> Result<Latent> {
    let shape_for = |x: &Latent| -> Result<()> {
        if x.dim().0 != z_c.dim().0 || x.dim().2 != z_c.dim().2 || x.dim().3 != z_c.dim().3 {
            return Err(Error::ShapeMismatch(format!(
                "init latent {:?} vs conditions {:?}",
                x.shape(),
                z_c.shape()
            )));
        }
        Ok(())
    };
    let (mut x, t_start) = match init {
        SampleInit::PureNoise => {
            let c = opts.injector.as_ref().map_or(z_c.dim().1, |i| i.out_channels);
            let (f, _, h, w) = z_c.dim();
            (standard_normal([f, c, h, w], rng), schedule.steps)
        }
        SampleInit::NoisyRender { images, scale } => {
            let t = schedule.timestep_for_scale(*scale)?;
            let x0 = encode_all(codec, images)?;
            shape_for(&x0)?;
            if t == 0 {
                let mut x0 = x0;
                for (k, clean) in &opts.clamp_frames {
                    if *k >= x0.dim().0 || clean.shape() != &x0.shape()[1..] {
                        return Err(Error::ShapeMismatch(format!(
                            "clamp frame {k} has shape {:?}",
                            clean.shape()
                        )));
                    }
                    x0.slice_mut(s![*k, .., .., ..]).assign(clean);
                }
                return Ok(x0);
            }
            let eps = standard_normal(dim4(&x0), rng);
            (forward_noise(&x0, schedule.alpha_bar(t), &eps)?, t)
        }
    };
    for (k, clean) in &opts.clamp_frames {
        if *k >= x.dim().0 || clean.shape() != &x.shape()[1..] {
            return Err(Error::ShapeMismatch(format!(
                "clamp frame {k} has shape {:?}",
                clean.shape()
            )));
        }
    }
    let ladder = schedule.ladder(t_start, opts.steps);
    for pair in ladder.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let input = match &opts.injector {
            Some(inj) => inject_condition(&x, z_c, inj)?,
            None => x.clone(),
        };
        let cond = denoiser.evaluate(&input, t, frames.clone(), c_ref, Some(z_c))?;
        check_shape(&cond, &x, "denoiser output")?;
        let mut x0 = if opts.cfg_scale == 1.0 {
            cond
        } else {
            let null = denoiser.evaluate(&x, t, frames.clone(), None, None)?;
            check_shape(&null, &x, "denoiser output")?;
            &null + &((&cond - &null) * opts.cfg_scale)
        };
        for (k, clean) in &opts.clamp_frames {
            x0.slice_mut(s![*k, .., .., ..]).assign(clean);
        }
        let (a_t, a_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        if t_prev == 0 {
            x = x0;
        } else {
            let (sa, sb) = (a_t.sqrt(), (1.0 - a_t).sqrt());
            let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
            x = ndarray::Zip::from(&x0).and(&x).map_collect(|x0, xt| {
                let eps = (xt - sa * x0) / sb;
                pa * x0 + pb * eps
            });
        }
    }
    Ok(x)
}

/// Guided DDIM (η = 0) sampling of one chunk of frames.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    codec: &dyn Codec,
    c_ref: Option<&[f64]>,
    conditions: &[ImageBuf],
    init: &SampleInit,
    opts: &SampleOptions,
    rng: &mut impl Rng,
) -> Result<Vec<ImageBuf>> {
    let z_c = encode_all(codec, conditions)?;
    let frames = 0..conditions.len();
    let x = sample_latent(denoiser, schedule, codec, c_ref, &z_c, init, opts, frames, rng)?;
    decode_all(codec, &x)
}

/// Start frames of each chunk. The last chunk is aligned to end at `total`.
pub fn chunk_starts(total: usize, chunk: usize, overlap: usize) -> Result<Vec<usize>> {
    if chunk == 0 || overlap >= chunk || total < chunk {
        return Err(Error::InvalidChunking(format!(
            "{total} frames with chunk {chunk} and overlap {overlap}"
        )));
    }
    let mut starts = vec![0];
    while starts.last().unwrap() + chunk < total {
        let next = starts.last().unwrap() + chunk - overlap;
        starts.push(next.min(total - chunk));
    }
    Ok(starts)
}

/// Samples `conditions.len()` frames in overlapping chunks. Frames shared
/// with the previous chunk are clamped to its results.
#[allow(clippy::too_many_arguments)]
pub fn sample_long(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    codec: &dyn Codec,
    c_ref: Option<&[f64]>,
    conditions: &[ImageBuf],
    init: &SampleInit,
    opts: &SampleOptions,
    chunk: usize,
    overlap: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ImageBuf>> {
    let total = conditions.len();
    let starts = chunk_starts(total, chunk, overlap)?;
    let z_c = encode_all(codec, conditions)?;
    let mut done: Vec<Array3<f64>> = Vec::with_capacity(total);
    for s0 in starts {
        let range = s0..s0 + chunk;
        let mut chunk_opts = opts.clone();
        chunk_opts.clamp_frames = opts
            .clamp_frames
            .iter()
            .filter(|(k, _)| range.contains(k))
            .map(|(k, v)| (k - s0, v.clone()))
            .collect();
        for k in s0..done.len() {
            chunk_opts.clamp_frames.insert(k - s0, done[k].clone());
        }
        let chunk_init = match init {
            SampleInit::PureNoise => SampleInit::PureNoise,
            SampleInit::NoisyRender { images, scale } => {
                if images.len() != total {
                    return Err(Error::ShapeMismatch(format!(
                        "{} renders for {total} conditions",
                        images.len()
                    )));
                }
                SampleInit::NoisyRender {
                    images: images[range.clone()].to_vec(),
                    scale: *scale,
                }
            }
        };
        let zc = z_c.slice(s![range.clone(), .., .., ..]).to_owned();
        let x = sample_latent(
            denoiser,
            schedule,
            codec,
            c_ref,
            &zc,
            &chunk_init,
            &chunk_opts,
            range,
            rng,
        )?;
        let have = done.len();
        for (k, frame) in x.outer_iter().enumerate() {
            if s0 + k >= have {
                done.push(frame.to_owned());
            }
        }
    }
    done.iter().map(|f| codec.decode(f.view())).collect()
}
