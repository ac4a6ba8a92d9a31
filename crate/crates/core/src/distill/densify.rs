//! Gradient-driven clone/split and low-opacity pruning. Large Gaussians
//! are never pruned for their world-space size.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DensifyConfig;
use crate::gsplat::{rotation_of, sigmoid, GaussianScene, GaussianSet};

/// Absolute thresholds for one densification event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyParams {
    pub threshold: f64,
    /// Largest world-space scale that is cloned rather than split.
    pub max_clone_scale: f64,
    pub prune_opacity: f64,
    pub split_factor: f64,
}

impl DensifyParams {
    pub fn new(cfg: &DensifyConfig, extent: f64) -> Self {
        DensifyParams {
            threshold: cfg.threshold,
            max_clone_scale: cfg.dense_fraction * extent,
            prune_opacity: cfg.prune_opacity,
            split_factor: cfg.split_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// Total `Σ sigmoid(opacity)` before and after.
    pub mass_before: f64,
    pub mass_after: f64,
    pub pruned_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyOutcome {
    pub report: DensifyReport,
    /// Per Gaussian set (background first), the source row of every new
    /// row, or `None` for a newly created Gaussian.
    pub origins: Vec<Vec<Option<usize>>>,
}

fn densify_set(
    set: &GaussianSet,
    mean_grad: &[f64],
    p: &DensifyParams,
    rng: &mut impl Rng,
    report: &mut DensifyReport,
) -> (GaussianSet, Vec<Option<usize>>) {
    let n = set.len();
    let mut keep = vec![true; n];
    let mut clones = Vec::new();
    let mut children = Vec::new();
    for i in 0..n {
        let o = sigmoid(set.opacity_logits[i]);
        if o < p.prune_opacity {
            keep[i] = false;
            report.pruned += 1;
            report.pruned_mass += o;
            continue;
        }
        if !(mean_grad[i] > p.threshold) {
            continue;
        }
        let ls = set.log_scales[i];
        let max_scale = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= p.max_clone_scale {
            clones.push(set.get(i));
            report.cloned += 1;
        } else {
            keep[i] = false;
            report.split += 1;
            let r = rotation_of(set.rotations[i]);
            let mu = Vector3::from(set.positions[i]);
            let shrink = p.split_factor.ln();
            for _ in 0..2 {
                let z = Vector3::from_fn(|k, _| {
                    let n: f64 = StandardNormal.sample(rng);
                    ls[k].exp() * n
                });
                let mut g = set.get(i);
                g.position = (mu + r * z).into();
                g.log_scale = ls.map(|v| v - shrink);
                children.push(g);
            }
        }
    }
    let mut out = GaussianSet::new(set.sh_degree);
    let mut origin = Vec::with_capacity(n + clones.len() + children.len());
    for i in (0..n).filter(|&i| keep[i]) {
        out.push(set.get(i));
        origin.push(Some(i));
    }
    for g in clones.into_iter().chain(children) {
        out.push(g);
        origin.push(None);
    }
    (out, origin)
}

/// Clones or splits every Gaussian whose mean accumulated view-space
/// gradient norm `accum / count` exceeds the threshold and prunes those
/// with opacity below `prune_opacity`. Pruned Gaussians are not densified.
/// `accum` and `count` are indexed by global Gaussian index.
pub fn densify_and_prune(
    scene: &mut GaussianScene,
    accum: &[f64],
    count: &[u32],
    params: &DensifyParams,
    rng: &mut impl Rng,
) -> DensifyOutcome {
    assert_eq!(accum.len(), scene.gaussian_count());
    assert_eq!(count.len(), scene.gaussian_count());
    let mean: Vec<f64> = accum
        .iter()
        .zip(count)
        .map(|(a, &c)| if c > 0 { a / c as f64 } else { 0.0 })
        .collect();
    let mut report = DensifyReport {
        mass_before: scene.sets().map(GaussianSet::opacity_mass).sum(),
        ..Default::default()
    };
    let mut origins = Vec::new();
    let mut offset = 0;
    for set in scene.sets_mut() {
        let n = set.len();
        let (next, origin) = densify_set(set, &mean[offset..offset + n], params, rng, &mut report);
        *set = next;
        origins.push(origin);
        offset += n;
    }
    report.mass_after = scene.sets().map(GaussianSet::opacity_mass).sum();
    DensifyOutcome { report, origins }
}
