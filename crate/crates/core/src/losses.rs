//! Photometric, geometric and regularization losses, each returning its
//! value and the gradient with respect to the first (predicted) argument,
//! plus PSNR and SSIM metrics.
//!
//! The perceptual term is pluggable through [`PerceptualLoss`]. The
//! built-in [`PyramidGradientLoss`] stands in for a learned metric:
//!
//! `L = mean|a - b| + Σ_{l=0..2} mean|m_l(a) - m_l(b)|`
//!
//! where level `l` is the image after `l` rounds of 2x2 average pooling and
//! `m_l = sqrt(dx² + dy² + ε²)` is its forward-difference gradient
//! magnitude per channel, `ε = 1e-3`, evaluated on the `(H-1) x (W-1)`
//! grid.

use serde::{Deserialize, Serialize};

use crate::gsplat::{RenderGrad, RenderOutput};
use crate::image::ImageBuf;
use crate::{Error, Result};

/// Clamp used by the cross-entropy style terms.
pub const PROB_EPS: f64 = 1e-6;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const DEPTH_QUANTILE: f64 = 0.95;

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("{what}: {a} vs {b} elements")));
    }
    Ok(())
}

pub fn l1(a: &ImageBuf, b: &ImageBuf) -> Result<LossValue> {
    a.check_same_shape(b)?;
    Ok(l1_slices(&a.data, &b.data))
}

fn l1_slices(a: &[f64], b: &[f64]) -> LossValue {
    let n = a.len().max(1) as f64;
    let value = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let grad = a.iter().zip(b).map(|(x, y)| sign(x - y) / n).collect();
    LossValue { value, grad }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" correlation of a `h x w` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Transpose of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for i in 0..n {
                rows[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn plane(img: &ImageBuf, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

struct SsimMaps {
    /// Per channel: SSIM map and `dS/dμa`, `dS/dm_aa`, `dS/dm_ab` maps.
    s: Vec<Vec<f64>>,
    d_mu: Vec<Vec<f64>>,
    d_aa: Vec<Vec<f64>>,
    d_ab: Vec<Vec<f64>>,
}

fn ssim_maps(a: &ImageBuf, b: &ImageBuf) -> Result<SsimMaps> {
    a.check_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::TooSmall(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        )));
    }
    let k = gaussian_kernel();
    let (w, h) = (a.width, a.height);
    let mut maps = SsimMaps {
        s: vec![],
        d_mu: vec![],
        d_aa: vec![],
        d_ab: vec![],
    };
    for c in 0..a.channels {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let m_aa = filter_valid(&sq(&pa, &pa), w, h, &k);
        let m_bb = filter_valid(&sq(&pb, &pb), w, h, &k);
        let m_ab = filter_valid(&sq(&pa, &pb), w, h, &k);
        let n = mu_a.len();
        let (mut s, mut d_mu, mut d_aa, mut d_ab) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = va + vb + SSIM_C2;
            let si = a1 * a2 / (b1 * b2);
            s[i] = si;
            d_mu[i] = 2.0 * mb * (a2 - a1) / (b1 * b2) - 2.0 * ma * si / b1 + 2.0 * ma * si / b2;
            d_aa[i] = -si / b2;
            d_ab[i] = 2.0 * a1 / (b1 * b2);
        }
        maps.s.push(s);
        maps.d_mu.push(d_mu);
        maps.d_aa.push(d_aa);
        maps.d_ab.push(d_ab);
    }
    Ok(maps)
}

/// Mean SSIM over valid 11x11 windows and all channels.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    let m = ssim_maps(a, b)?;
    let n: usize = m.s.iter().map(Vec::len).sum();
    Ok(m.s.iter().flatten().sum::<f64>() / n as f64)
}

/// `1 - SSIM` and its gradient with respect to `a`.
pub fn ssim_loss(a: &ImageBuf, b: &ImageBuf) -> Result<LossValue> {
    let m = ssim_maps(a, b)?;
    let k = gaussian_kernel();
    let (w, h, ch) = (a.width, a.height, a.channels);
    let n: usize = m.s.iter().map(Vec::len).sum();
    let scale = -1.0 / n as f64;
    let mut grad = vec![0.0; a.data.len()];
    for c in 0..ch {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let g_mu = filter_valid_adjoint(&m.d_mu[c], w, h, &k);
        let g_aa = filter_valid_adjoint(&m.d_aa[c], w, h, &k);
        let g_ab = filter_valid_adjoint(&m.d_ab[c], w, h, &k);
        for i in 0..w * h {
            grad[i * ch + c] = scale * (g_mu[i] + 2.0 * pa[i] * g_aa[i] + pb[i] * g_ab[i]);
        }
    }
    let value = 1.0 - m.s.iter().flatten().sum::<f64>() / n as f64;
    Ok(LossValue { value, grad })
}

/// Pluggable perceptual distance.
pub trait PerceptualLoss: Send + Sync {
    fn name(&self) -> &str;
    fn eval(&self, a: &ImageBuf, b: &ImageBuf) -> Result<LossValue>;
}

/// Multi-scale gradient-magnitude L1 (see the module docs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PyramidGradientLoss {
    pub levels: usize,
    pub eps: f64,
}

impl Default for PyramidGradientLoss {
    fn default() -> Self {
        PyramidGradientLoss { levels: 3, eps: 1e-3 }
    }
}

fn downsample(img: &ImageBuf) -> ImageBuf {
    let (w, h) = (img.width / 2, img.height / 2);
    ImageBuf::from_fn(w, h, img.channels, |x, y, c| {
        0.25 * (img.get(2 * x, 2 * y, c)
            + img.get(2 * x + 1, 2 * y, c)
            + img.get(2 * x, 2 * y + 1, c)
            + img.get(2 * x + 1, 2 * y + 1, c))
    })
}

fn downsample_adjoint(g: &ImageBuf, w: usize, h: usize) -> ImageBuf {
    let mut out = ImageBuf::new(w, h, g.channels);
    for y in 0..g.height {
        for x in 0..g.width {
            for c in 0..g.channels {
                let v = 0.25 * g.get(x, y, c);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = out.index(2 * x + dx, 2 * y + dy, c);
                    out.data[i] += v;
                }
            }
        }
    }
    out
}

/// Gradient magnitude on the `(H-1) x (W-1)` grid, with its partials.
fn grad_mag(img: &ImageBuf, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h, ch) = (img.width, img.height, img.channels);
    let n = (w - 1) * (h - 1) * ch;
    let (mut m, mut gx, mut gy) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            for c in 0..ch {
                let p = img.get(x, y, c);
                let dx = img.get(x + 1, y, c) - p;
                let dy = img.get(x, y + 1, c) - p;
                let v = (dx * dx + dy * dy + eps * eps).sqrt();
                m.push(v);
                gx.push(dx / v);
                gy.push(dy / v);
            }
        }
    }
    (m, gx, gy)
}

impl PerceptualLoss for PyramidGradientLoss {
    fn name(&self) -> &str {
        "pyramid-gradient"
    }

    fn eval(&self, a: &ImageBuf, b: &ImageBuf) -> Result<LossValue> {
        a.check_same_shape(b)?;
        let LossValue { mut value, grad } = l1_slices(&a.data, &b.data);
        let mut levels_a = vec![a.clone()];
        let mut levels_b = vec![b.clone()];
        while levels_a.len() < self.levels {
            let (la, lb) = (levels_a.last().unwrap(), levels_b.last().unwrap());
            if la.width < 4 || la.height < 4 {
                break;
            }
            let (da, db) = (downsample(la), downsample(lb));
            levels_a.push(da);
            levels_b.push(db);
        }
        // Gradient at each level, pulled back from the coarsest.
        let mut carry: Option<ImageBuf> = None;
        for l in (0..levels_a.len()).rev() {
            let la = &levels_a[l];
            let mut g = match carry.take() {
                Some(c) => downsample_adjoint(&c, la.width, la.height),
                None => ImageBuf::new(la.width, la.height, la.channels),
            };
            if la.width >= 2 && la.height >= 2 {
                let (ma, gx, gy) = grad_mag(la, self.eps);
                let (mb, _, _) = grad_mag(&levels_b[l], self.eps);
                let n = ma.len() as f64;
                value += ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
                let ch = la.channels;
                let mut k = 0;
                for y in 0..la.height - 1 {
                    for x in 0..la.width - 1 {
                        for c in 0..ch {
                            let s = sign(ma[k] - mb[k]) / n;
                            let (sx, sy) = (s * gx[k], s * gy[k]);
                            let i0 = g.index(x, y, c);
                            let ix = g.index(x + 1, y, c);
                            let iy = g.index(x, y + 1, c);
                            g.data[ix] += sx;
                            g.data[iy] += sy;
                            g.data[i0] -= sx + sy;
                            k += 1;
                        }
                    }
                }
            }
            carry = Some(g);
        }
        let mut grad = grad;
        for (d, s) in grad.iter_mut().zip(&carry.unwrap().data) {
            *d += s;
        }
        Ok(LossValue { value, grad })
    }
}

/// Depth L1 over the `ceil(q·n)` valid pixels with the smallest absolute
/// error (ties broken by pixel index), averaged over the kept pixels.
pub fn depth_loss(depth: &[f64], lidar: &[f64], valid: &[bool], quantile: f64) -> Result<LossValue> {
    check_len(depth.len(), lidar.len(), "depth vs lidar depth")?;
    check_len(depth.len(), valid.len(), "depth vs validity mask")?;
    let mut idx: Vec<usize> = (0..depth.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let err = |i: usize| (depth[i] - lidar[i]).abs();
    idx.sort_by(|&i, &j| err(i).total_cmp(&err(j)).then(i.cmp(&j)));
    let keep = ((quantile.clamp(0.0, 1.0) * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
    let mut grad = vec![0.0; depth.len()];
    let mut value = 0.0;
    for &i in &idx[..keep] {
        value += err(i);
        grad[i] = sign(depth[i] - lidar[i]) / keep as f64;
    }
    Ok(LossValue {
        value: value / keep as f64,
        grad,
    })
}

/// `-mean[(1-M) log O + M log(1-O)]` with `O` clamped to `[ε, 1-ε]`.
pub fn sky_loss(opacity: &[f64], sky_mask: &[f64]) -> Result<LossValue> {
    check_len(opacity.len(), sky_mask.len(), "opacity vs sky mask")?;
    let n = opacity.len().max(1) as f64;
    let mut value = 0.0;
    let grad = opacity
        .iter()
        .zip(sky_mask)
        .map(|(&o, &m)| {
            let oc = o.clamp(PROB_EPS, 1.0 - PROB_EPS);
            value -= (1.0 - m) * oc.ln() + m * (1.0 - oc).ln();
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&o) {
                0.0
            } else {
                -((1.0 - m) / oc - m / (1.0 - oc)) / n
            }
        })
        .collect();
    Ok(LossValue { value: value / n, grad })
}

/// `-mean[O log O + (1-O) log(1-O)]` with `O` clamped to `[ε, 1-ε]`: the
/// binary entropy, minimal (zero) when every pixel is 0 or 1.
pub fn reg_loss(object_alpha: &[f64]) -> LossValue {
    let n = object_alpha.len().max(1) as f64;
    let mut value = 0.0;
    let grad = object_alpha
        .iter()
        .map(|&o| {
            let oc = o.clamp(PROB_EPS, 1.0 - PROB_EPS);
            value -= oc * oc.ln() + (1.0 - oc) * (1.0 - oc).ln();
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&o) {
                0.0
            } else {
                -(oc.ln() - (1.0 - oc).ln()) / n
            }
        })
        .collect();
    LossValue { value: value / n, grad }
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len().max(1) as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub novel: f64,
    pub depth: f64,
    pub sky: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 0.2,
            ssim: 0.8,
            lpips: 0.5,
            novel: 0.1,
            depth: 0.01,
            sky: 0.05,
            reg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.l1, self.ssim, self.lpips, self.novel, self.depth, self.sky, self.reg,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvariantViolation(format!(
                "loss weights must be nonnegative: {self:?}"
            )))
        }
    }
}

/// Per-term values of one view's loss. Terms that do not apply are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub novel: bool,
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub depth: f64,
    pub sky: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossReport {
    /// Weighted sum of the terms, with `reg_sign` applied to the reg term.
    pub fn weighted(&self, w: &LossWeights, reg_sign: f64) -> f64 {
        if self.novel {
            w.novel * self.perceptual
        } else {
            w.l1 * self.l1
                + w.ssim * self.ssim
                + w.lpips * self.perceptual
                + w.depth * self.depth
                + w.sky * self.sky
                + reg_sign * w.reg * self.reg
        }
    }
}

/// Supervision available for an input view.
#[derive(Debug, Clone, Copy)]
pub struct InputTargets<'a> {
    pub rgb: &'a ImageBuf,
    /// LiDAR depth and its validity mask.
    pub lidar_depth: Option<(&'a [f64], &'a [bool])>,
    /// 1 on sky pixels.
    pub sky_mask: Option<&'a [f64]>,
}

/// Input-view loss `λ1 L1 + λssim Lssim + λlpips Lperc + Lg` and its
/// gradient with respect to every render output.
pub fn input_view_loss(
    weights: &LossWeights,
    perceptual: &dyn PerceptualLoss,
    render: &RenderOutput,
    targets: &InputTargets<'_>,
    reg_sign: f64,
    depth_quantile: f64,
) -> Result<(LossReport, RenderGrad)> {
    let pred = &render.rgb;
    let mut grad = RenderGrad::zeros(render.width, render.height);
    let mut rep = LossReport::default();
    let add = |dst: &mut [f64], g: &[f64], w: f64| dst.iter_mut().zip(g).for_each(|(d, v)| *d += w * v);

    let t = l1(pred, targets.rgb)?;
    rep.l1 = t.value;
    add(&mut grad.rgb, &t.grad, weights.l1);
    if weights.ssim > 0.0 {
        let t = ssim_loss(pred, targets.rgb)?;
        rep.ssim = t.value;
        add(&mut grad.rgb, &t.grad, weights.ssim);
    }
    if weights.lpips > 0.0 {
        let t = perceptual.eval(pred, targets.rgb)?;
        rep.perceptual = t.value;
        add(&mut grad.rgb, &t.grad, weights.lpips);
    }
    if let Some((d, valid)) = targets.lidar_depth {
        match depth_loss(&render.depth, d, valid, depth_quantile) {
            Ok(t) => {
                rep.depth = t.value;
                add(&mut grad.depth, &t.grad, weights.depth);
            }
            Err(Error::NoValidPixels) => {}
            Err(e) => return Err(e),
        }
    }
    if let Some(m) = targets.sky_mask {
        let t = sky_loss(&render.opacity, m)?;
        rep.sky = t.value;
        add(&mut grad.opacity, &t.grad, weights.sky);
    }
    let t = reg_loss(&render.object_alpha);
    rep.reg = t.value;
    add(&mut grad.object_alpha, &t.grad, reg_sign * weights.reg);
    rep.total = rep.weighted(weights, reg_sign);
    Ok((rep, grad))
}

/// Novel-view loss `λnovel Lperc` and its gradient with respect to `pred`.
pub fn novel_view_loss(
    weights: &LossWeights,
    perceptual: &dyn PerceptualLoss,
    pred: &ImageBuf,
    target: &ImageBuf,
) -> Result<(LossReport, Vec<f64>)> {
    let t = perceptual.eval(pred, target)?;
    let rep = LossReport {
        novel: true,
        perceptual: t.value,
        total: weights.novel * t.value,
        ..Default::default()
    };
    Ok((rep, t.grad.iter().map(|g| g * weights.novel).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::rng;
    use rand::Rng;

    fn random_image(seed: u64, w: usize, h: usize, c: usize) -> ImageBuf {
        let mut r = rng(seed);
        ImageBuf::from_fn(w, h, c, |_, _, _| r.random_range(0.0..1.0))
    }

    fn fd_check(f: impl Fn(&ImageBuf) -> LossValue, a: &ImageBuf, h: f64) -> f64 {
        let g = f(a).grad;
        let mut worst: f64 = 0.0;
        let mut probe = a.clone();
        for i in 0..a.data.len() {
            let o = probe.data[i];
            probe.data[i] = o + h;
            let lp = f(&probe).value;
            probe.data[i] = o - h;
            let lm = f(&probe).value;
            probe.data[i] = o;
            let n = (lp - lm) / (2.0 * h);
            if g[i].abs() > 1e-6 || n.abs() > 1e-6 {
                worst = worst.max((g[i] - n).abs() / g[i].abs().max(n.abs()));
            }
        }
        worst
    }

    #[test]
    fn l1_closed_forms() {
        let z = ImageBuf::filled(4, 3, 3, 0.0);
        let o = ImageBuf::filled(4, 3, 3, 1.0);
        assert_eq!(l1(&z, &z).unwrap().value, 0.0);
        assert_eq!(l1(&z, &o).unwrap().value, 1.0);
        let a = random_image(1, 7, 5, 3);
        let b = random_image(2, 7, 5, 3);
        let mut s = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                for c in 0..3 {
                    s += (a.get(x, y, c) - b.get(x, y, c)).abs();
                }
            }
        }
        assert!((l1(&a, &b).unwrap().value - s / 105.0).abs() < 1e-12);
        assert!(matches!(l1(&a, &z), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn ssim_identity_and_errors() {
        let a = random_image(3, 16, 12, 3);
        assert!(ssim_loss(&a, &a).unwrap().value.abs() < 1e-12);
        let small = random_image(3, 10, 12, 3);
        assert!(matches!(ssim(&small, &small), Err(Error::TooSmall(_))));
    }

    #[test]
    fn ssim_matches_direct_window_formula() {
        let a = random_image(4, 13, 12, 1);
        let b = ImageBuf::from_fn(13, 12, 1, |x, y, _| 1.0 - a.get(x, y, 0));
        let k = gaussian_kernel();
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..2 {
            for ox in 0..3 {
                let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for v in 0..11 {
                    for u in 0..11 {
                        let w = k[u] * k[v];
                        let (p, q) = (a.get(ox + u, oy + v, 0), b.get(ox + u, oy + v, 0));
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
        let s = ssim(&a, &b).unwrap();
        assert!((s - total / count as f64).abs() < 1e-12);
        assert!(s < 0.0);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = random_image(5, 32, 32, 1);
        let b = random_image(6, 32, 32, 1);
        assert!(fd_check(|x| ssim_loss(x, &b).unwrap(), &a, 1e-5) < 1e-3);
    }

    #[test]
    fn perceptual_proxy_closed_forms_and_gradient() {
        let p = PyramidGradientLoss::default();
        let a = random_image(7, 32, 32, 3);
        assert_eq!(p.eval(&a, &a).unwrap().value, 0.0);
        let shifted = ImageBuf::from_fn(32, 32, 3, |x, y, c| a.get(x, y, c) + 0.1);
        assert!((p.eval(&a, &shifted).unwrap().value - 0.1).abs() < 1e-12);
        let b = random_image(8, 32, 32, 3);
        let ab = p.eval(&a, &b).unwrap().value;
        assert!((ab - p.eval(&b, &a).unwrap().value).abs() < 1e-12);
        assert!(fd_check(|x| p.eval(x, &b).unwrap(), &a, 1e-6) < 1e-3);
    }

    #[test]
    fn depth_quantile_excludes_outlier() {
        let lidar = vec![10.0; 100];
        let mut d: Vec<f64> = vec![10.1; 100];
        d[37] = 110.0;
        let v = depth_loss(&d, &lidar, &[true; 100], 0.95).unwrap();
        assert!((v.value - 0.1).abs() < 1e-9);
        assert_eq!(v.grad[37], 0.0);
        let plain = depth_loss(&d, &lidar, &[true; 100], 1.0).unwrap();
        assert!((plain.value - (99.0 * 0.1 + 100.0) / 100.0).abs() < 1e-9);
        assert_eq!(depth_loss(&lidar, &lidar, &[true; 100], 0.95).unwrap().value, 0.0);
        assert!(matches!(
            depth_loss(&d, &lidar, &[false; 100], 0.95),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn sky_and_reg_closed_forms() {
        let half = vec![0.5; 10];
        let mask: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        assert!((sky_loss(&half, &mask).unwrap().value - 2f64.ln()).abs() < 1e-12);
        assert!(sky_loss(&[1.0; 4], &[0.0; 4]).unwrap().value < 1e-5);
        assert!((reg_loss(&half).value - 2f64.ln()).abs() < 1e-12);
        assert!(reg_loss(&[0.0, 1.0]).value < 2e-5);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_image(9, 8, 8, 3);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let z = ImageBuf::filled(8, 8, 3, 0.3);
        let o = ImageBuf::filled(8, 8, 3, 0.4);
        assert!((psnr(&z, &o).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn report_total_is_weighted_sum() {
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
        let expect = 0.2 * 0.3 + 0.8 * 0.2 + 0.5 * 0.5 + 0.01 * 1.5 + 0.05 * 0.7 + 0.1 * 0.4;
        assert!((rep.weighted(&w, 1.0) - expect).abs() < 1e-12);
    }
}
