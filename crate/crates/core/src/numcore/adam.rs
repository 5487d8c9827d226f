use super::params::ParamTree;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first step.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, ..Default::default() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every leaf for which `trainable(name)` holds.
    pub fn step<Tr>(&mut self, params: &mut Tr, grads: &Tr, lr: f64, trainable: impl Fn(&str) -> bool)
    where
        Tr: ParamTree<Tensor>,
    {
        let grads = grads.leaves();
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut leaf = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut("", &mut |name, p| {
            let i = leaf;
            leaf += 1;
            if !trainable(name) {
                return;
            }
            let g = grads[i].data();
            let (m, v) = (&mut first[i], &mut second[i]);
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv as f64;
                let mn = beta1 * *mv as f64 + (1.0 - beta1) * gv;
                let vn = beta2 * *vv as f64 + (1.0 - beta2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        });
    }
}
