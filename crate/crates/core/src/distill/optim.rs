//! Adam with per-group step sizes and moment buffers that follow the
//! Gaussians through densification.

/// Adam hyperparameters shared by every group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moment estimates of one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update at step `t` (1-based). `lr(i)` gives the
    /// step size of element `i`.
    pub fn step(&mut self, adam: &Adam, t: u64, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let b1t = 1.0 - adam.beta1.powf(t as f64);
        let b2t = 1.0 - adam.beta2.powf(t as f64);
        for (i, ((p, g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            let mh = *m / b1t;
            let vh = *v / b2t;
            *p -= lr(i) * mh / (vh.sqrt() + adam.eps);
        }
    }

    /// Rebuilds the buffers for a resized group. `origin[k]` is the old
    /// row of new row `k`, or `None` for a fresh row with zero moments.
    pub fn remap(&mut self, origin: &[Option<usize>], stride: usize) {
        let pick = |src: &[f64]| -> Vec<f64> {
            origin
                .iter()
                .flat_map(|o| match o {
                    Some(i) => src[i * stride..(i + 1) * stride].to_vec(),
                    None => vec![0.0; stride],
                })
                .collect()
        };
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }
}
