//! A small trainable denoiser: `x̂0 = sqrt(ᾱ_t) · (W ⊛ ẑ) + b` with a 3x3
//! zero-padded convolution `W` over latent channels and per-channel bias.
//! Trained jointly with the condition injector by plain gradient descent.

use std::ops::Range;
use std::path::Path;

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{forward_noise, inject_condition, standard_normal, Denoiser, Latent, NoiseSchedule, ZeroConvInjector};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyDenoiser {
    pub conv: ZeroConvInjector,
    pub bias: Vec<f64>,
    #[serde(skip, default)]
    pub schedule: NoiseSchedule,
}

/// Denoiser and injector weights, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyCheckpoint {
    pub denoiser: TinyDenoiser,
    pub injector: ZeroConvInjector,
}

impl TinyCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(path.to_path_buf()));
        }
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// Gradient of `<g, conv(input)>` with respect to the kernel.
fn conv_weight_grad(conv: &ZeroConvInjector, input: &Latent, g: &Latent) -> Vec<f64> {
    let (f, c, h, w) = input.dim();
    let k = conv.kernel_size;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; conv.weights.len()];
    for o in 0..conv.out_channels {
        for i in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for fi in 0..f {
                        for y in 0..h {
                            let yy = y as isize + ky as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for x in 0..w {
                                let xx = x as isize + kx as isize - r;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += g[[fi, o, y, x]] * input[[fi, i, yy as usize, xx as usize]];
                            }
                        }
                    }
                    out[conv.index(o, i, ky, kx)] = acc;
                }
            }
        }
    }
    out
}

/// Gradient of `<g, conv(input)>` with respect to the input.
fn conv_input_grad(conv: &ZeroConvInjector, shape: (usize, usize, usize, usize), g: &Latent) -> Latent {
    let (f, c, h, w) = shape;
    let k = conv.kernel_size;
    let r = (k / 2) as isize;
    let mut out = Array4::zeros(shape);
    for fi in 0..f {
        for o in 0..conv.out_channels {
            for y in 0..h {
                for x in 0..w {
                    let gv = g[[fi, o, y, x]];
                    for i in 0..c {
                        for ky in 0..k {
                            let yy = y as isize + ky as isize - r;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let xx = x as isize + kx as isize - r;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                out[[fi, i, yy as usize, xx as usize]] += conv.weights[conv.index(o, i, ky, kx)] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl TinyDenoiser {
    /// Identity-initialized kernel and zero bias.
    pub fn new(channels: usize) -> Self {
        TinyDenoiser {
            conv: ZeroConvInjector::identity(channels, 3),
            bias: vec![0.0; channels],
            schedule: NoiseSchedule::default(),
        }
    }

    fn predict(&self, x: &Latent, alpha_bar: f64) -> Result<Latent> {
        let mut y = self.conv.apply(x)? * alpha_bar.sqrt();
        for (c, b) in self.bias.iter().enumerate() {
            y.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| v + b);
        }
        Ok(y)
    }

    /// One gradient-descent step on a single draw of the training
    /// objective, updating this denoiser and `injector`. Returns the loss
    /// before the update.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        injector: &mut ZeroConvInjector,
        schedule: &NoiseSchedule,
        z: &Latent,
        z_c: &Latent,
        dropout: f64,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let t = rng.random_range(1..=schedule.steps);
        let (a, b, c, d) = z.dim();
        let eps = standard_normal([a, b, c, d], rng);
        let dropped_cond = rng.random_bool(dropout);
        let ab = schedule.alpha_bar(t);
        let z_t = forward_noise(z, ab, &eps)?;
        let input = if dropped_cond {
            z_t
        } else {
            inject_condition(&z_t, z_c, injector)?
        };
        let pred = self.predict(&input, ab)?;
        let diff = &pred - z;
        let n = diff.len() as f64;
        let loss = diff.mapv(|v| v * v).sum() / n;
        let g_pred = diff * (2.0 / n);
        let g_conv_out = &g_pred * ab.sqrt();
        let gw = conv_weight_grad(&self.conv, &input, &g_conv_out);
        let gb: Vec<f64> = (0..self.bias.len())
            .map(|ch| g_pred.index_axis(ndarray::Axis(1), ch).sum())
            .collect();
        if !dropped_cond {
            let g_input = conv_input_grad(&self.conv, input.dim(), &g_conv_out);
            let gi = conv_weight_grad(injector, z_c, &g_input);
            injector.weights.iter_mut().zip(&gi).for_each(|(w, g)| *w -= lr * g);
        }
        self.conv.weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
        self.bias.iter_mut().zip(&gb).for_each(|(w, g)| *w -= lr * g);
        Ok(loss)
    }
}

impl Denoiser for TinyDenoiser {
    fn evaluate(
        &self,
        x_t: &Latent,
        t: usize,
        _frames: Range<usize>,
        _c_ref: Option<&[f64]>,
        _c_p: Option<&Latent>,
    ) -> Result<Latent> {
        let ab = self.schedule.alpha_bar(t);
        self.predict(x_t, ab)
    }
}
