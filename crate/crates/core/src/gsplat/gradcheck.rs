//! Central finite-difference oracle for [`super::render_backward`].
//!
//! The loss is linear in the render outputs, `L = <W, render(θ)>`, so the
//! upstream gradient is `W` itself and every parameter can be probed by
//! two forward renders.

use super::backward::{render_backward, RenderGrad, SceneGrads};
use super::{render, GaussianScene, GaussianSet, RenderConfig};
use crate::geometry::PinholeCamera;
use crate::Result;

/// Which field of a Gaussian set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Position,
    Rotation,
    LogScale,
    Opacity,
    Sh,
}

/// One scalar parameter of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    /// `set` 0 is the background, `k + 1` is object `k`.
    Gaussian {
        set: usize,
        index: usize,
        field: Field,
        component: usize,
    },
    CorrectionTranslation {
        object: usize,
        key: usize,
        component: usize,
    },
    CorrectionRotation {
        object: usize,
        key: usize,
        component: usize,
    },
    SkyTexel(usize),
}

fn set_params(set: &GaussianSet, s: usize, out: &mut Vec<Param>) {
    let stride = set.sh_stride();
    for index in 0..set.len() {
        for (field, n) in [
            (Field::Position, 3),
            (Field::Rotation, 4),
            (Field::LogScale, 3),
            (Field::Opacity, 1),
            (Field::Sh, stride),
        ] {
            for component in 0..n {
                out.push(Param::Gaussian {
                    set: s,
                    index,
                    field,
                    component,
                });
            }
        }
    }
}

/// Every scalar parameter, in a fixed order.
pub fn all_params(scene: &GaussianScene) -> Vec<Param> {
    let mut out = Vec::new();
    for (s, set) in scene.sets().enumerate() {
        set_params(set, s, &mut out);
    }
    for (object, o) in scene.objects.iter().enumerate() {
        for key in 0..o.corrections.len() {
            for component in 0..3 {
                out.push(Param::CorrectionTranslation { object, key, component });
            }
            for component in 0..4 {
                out.push(Param::CorrectionRotation { object, key, component });
            }
        }
    }
    out.extend((0..scene.sky.texels.len()).map(Param::SkyTexel));
    out
}

fn set_mut(scene: &mut GaussianScene, s: usize) -> &mut GaussianSet {
    if s == 0 {
        &mut scene.background
    } else {
        &mut scene.objects[s - 1].gaussians
    }
}

fn slot(scene: &mut GaussianScene, p: Param) -> &mut f64 {
    match p {
        Param::Gaussian {
            set,
            index,
            field,
            component,
        } => {
            let g = set_mut(scene, set);
            match field {
                Field::Position => &mut g.positions[index][component],
                Field::Rotation => &mut g.rotations[index][component],
                Field::LogScale => &mut g.log_scales[index][component],
                Field::Opacity => &mut g.opacity_logits[index],
                Field::Sh => {
                    let stride = g.sh_stride();
                    &mut g.sh[index * stride + component]
                }
            }
        }
        Param::CorrectionTranslation { object, key, component } => {
            &mut scene.objects[object].corrections[key].translation[component]
        }
        Param::CorrectionRotation { object, key, component } => {
            &mut scene.objects[object].corrections[key].rotation[component]
        }
        Param::SkyTexel(i) => &mut scene.sky.texels[i],
    }
}

/// Analytic gradient entry for `p`.
pub fn grad_of(grads: &SceneGrads, p: Param) -> f64 {
    match p {
        Param::Gaussian {
            set,
            index,
            field,
            component,
        } => {
            let g = if set == 0 {
                &grads.background
            } else {
                &grads.objects[set - 1].gaussians
            };
            match field {
                Field::Position => g.positions[index][component],
                Field::Rotation => g.rotations[index][component],
                Field::LogScale => g.log_scales[index][component],
                Field::Opacity => g.opacity_logits[index],
                Field::Sh => {
                    let stride = g.sh.len() / g.len().max(1);
                    g.sh[index * stride + component]
                }
            }
        }
        Param::CorrectionTranslation { object, key, component } => {
            grads.objects[object].corrections[key].translation[component]
        }
        Param::CorrectionRotation { object, key, component } => {
            grads.objects[object].corrections[key].rotation[component]
        }
        Param::SkyTexel(i) => grads.sky[i],
    }
}

/// `<W, render(scene)>`.
pub fn linear_loss(
    scene: &GaussianScene,
    camera: &PinholeCamera,
    t: f64,
    cfg: &RenderConfig,
    w: &RenderGrad,
) -> Result<f64> {
    let out = render(scene, camera, t, cfg)?;
    let mut l = 0.0;
    l += out.rgb.data.iter().zip(&w.rgb).map(|(a, b)| a * b).sum::<f64>();
    l += out.depth.iter().zip(&w.depth).map(|(a, b)| a * b).sum::<f64>();
    l += out.opacity.iter().zip(&w.opacity).map(|(a, b)| a * b).sum::<f64>();
    l += out
        .object_alpha
        .iter()
        .zip(&w.object_alpha)
        .map(|(a, b)| a * b)
        .sum::<f64>();
    Ok(l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Parameters whose analytic gradient exceeded the magnitude floor.
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

/// Compares analytic and central-difference gradients for `params`.
/// Elements whose analytic and numeric magnitudes are both at most `floor`
/// are skipped.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    scene: &GaussianScene,
    camera: &PinholeCamera,
    t: f64,
    cfg: &RenderConfig,
    weights: &RenderGrad,
    params: &[Param],
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let grads = render_backward(scene, camera, t, cfg, weights)?;
    let mut probe = scene.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for &p in params {
        let orig = *slot(&mut probe, p);
        *slot(&mut probe, p) = orig + h;
        let lp = linear_loss(&probe, camera, t, cfg, weights)?;
        *slot(&mut probe, p) = orig - h;
        let lm = linear_loss(&probe, camera, t, cfg, weights)?;
        *slot(&mut probe, p) = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grad_of(&grads, p);
        if analytic.abs() <= floor && numeric.abs() <= floor {
            continue;
        }
        report.checked += 1;
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(Mismatch {
                param: p,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    Ok(report)
}
