use crate::diffcore::{ParamStore, Real};

/// Adam with bias correction. Moments are kept in `f64` whatever the
/// parameter type.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update; `grads` is indexed by parameter id and `None` counts as zero.
    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, grads: &[Option<Vec<F>>]) {
        if self.m.is_empty() {
            self.m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let g = grads.get(k).and_then(|g| g.as_deref());
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = store.get_mut(id).data_mut();
            for (e, x) in data.iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[e].to64());
                m[e] = self.beta1 * m[e] + (1.0 - self.beta1) * gi;
                v[e] = self.beta2 * v[e] + (1.0 - self.beta2) * gi * gi;
                let mh = m[e] / c1;
                let vh = v[e] / c2;
                let upd = self.lr * mh / (vh.sqrt() + self.eps);
                if upd != 0.0 {
                    *x = F::of(x.to64() - upd);
                }
            }
        }
    }
}

/// Global L2 norm over all present gradients.
pub fn global_norm<F: Real>(grads: &[Option<Vec<F>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x.to64() * x.to64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max`; returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Option<Vec<F>>], max: f64) -> f64 {
    let norm = global_norm(grads);
    if max > 0.0 && norm > max {
        let s = F::of(max / norm);
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}
