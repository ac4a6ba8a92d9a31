//! Novel-view generators: the source of supervision for novel cameras.

use std::path::PathBuf;

use crate::diffusion::{
    encode_all, sample, sample_long, IdentityCodec, NoiseSchedule, OracleDenoiser, SampleInit, SampleOptions,
    DEFAULT_CHUNK, DEFAULT_OVERLAP,
};
use crate::image::ImageBuf;
use crate::synthetic::rng;
use crate::{Error, Result};

/// Inputs of one cache refresh. All images are at model resolution and
/// `renders[k]`, `conditions[k]` belong to novel camera `k`.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorRequest<'a> {
    pub iteration: usize,
    pub noise_scale: f64,
    pub renders: &'a [ImageBuf],
    pub conditions: &'a [ImageBuf],
    pub reference: &'a ImageBuf,
}

/// Produces one image per novel camera, at the resolution of the renders.
pub trait NovelViewGenerator {
    fn name(&self) -> String;
    fn generate(&mut self, request: &GeneratorRequest<'_>) -> Result<Vec<ImageBuf>>;
}

/// Returns the renders unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockGenerator;

impl NovelViewGenerator for MockGenerator {
    fn name(&self) -> String {
        "mock".into()
    }

    fn generate(&mut self, request: &GeneratorRequest<'_>) -> Result<Vec<ImageBuf>> {
        Ok(request.renders.to_vec())
    }
}

/// Reads frames produced offline. For a refresh at iteration `i` it looks
/// for `<root>/iter_<i>/<k>.png` (zero-padded to 6 and 4 digits) and falls
/// back to `<root>/<k>.png`.
#[derive(Debug, Clone)]
pub struct DirGenerator {
    pub root: PathBuf,
}

impl DirGenerator {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirGenerator { root: root.into() }
    }

    fn frame_path(&self, iteration: usize, k: usize) -> PathBuf {
        let per_iter = self.root.join(format!("iter_{iteration:06}"));
        let dir = if per_iter.is_dir() { per_iter } else { self.root.clone() };
        dir.join(format!("{k:04}.png"))
    }
}

impl NovelViewGenerator for DirGenerator {
    fn name(&self) -> String {
        format!("dir:{}", self.root.display())
    }

    fn generate(&mut self, request: &GeneratorRequest<'_>) -> Result<Vec<ImageBuf>> {
        (0..request.renders.len())
            .map(|k| {
                let path = self.frame_path(request.iteration, k);
                ImageBuf::load_rgb(&path).map_err(|e| Error::GeneratorFailure(e.to_string()))
            })
            .collect()
    }
}

/// Noises the renders to the requested scale and denoises them with the
/// guided sampler, using an oracle denoiser that predicts the renders.
/// Exercises the full sampling path; the output equals the renders up to
/// rounding.
#[derive(Debug, Clone)]
pub struct NoisyGenerator {
    pub schedule: NoiseSchedule,
    pub options: SampleOptions,
    pub chunk: usize,
    pub overlap: usize,
    pub seed: u64,
}

impl NoisyGenerator {
    pub fn new(seed: u64) -> Self {
        NoisyGenerator {
            schedule: NoiseSchedule::default(),
            options: SampleOptions::default(),
            chunk: DEFAULT_CHUNK,
            overlap: DEFAULT_OVERLAP,
            seed,
        }
    }
}

impl NovelViewGenerator for NoisyGenerator {
    fn name(&self) -> String {
        "noisy".into()
    }

    fn generate(&mut self, request: &GeneratorRequest<'_>) -> Result<Vec<ImageBuf>> {
        let fail = |e: Error| Error::GeneratorFailure(e.to_string());
        let renders = request.renders;
        let denoiser = OracleDenoiser {
            clean: encode_all(&IdentityCodec, renders).map_err(fail)?,
        };
        let init = SampleInit::NoisyRender {
            images: renders.to_vec(),
            scale: request.noise_scale,
        };
        let mut r = rng(self.seed ^ request.iteration as u64);
        let reference = [request.reference.data.iter().sum::<f64>() / request.reference.len().max(1) as f64];
        let out = if renders.len() <= self.chunk {
            sample(
                &denoiser,
                &self.schedule,
                &IdentityCodec,
                Some(&reference),
                request.conditions,
                &init,
                &self.options,
                &mut r,
            )
        } else {
            sample_long(
                &denoiser,
                &self.schedule,
                &IdentityCodec,
                Some(&reference),
                request.conditions,
                &init,
                &self.options,
                self.chunk,
                self.overlap,
                &mut r,
            )
        };
        out.map_err(fail)
    }
}
