use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. A parameter without a gradient is stepped with a zero gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |p: &crate::numerics::Parameter| Tensor::zeros(p.tensor.shape());
        Self {
            config,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&Tensor, &Tensor) {
        (&self.m[index], &self.v[index])
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let grad = p.grad.as_ref().map(|g| g.data());
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = grad.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let k = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}
