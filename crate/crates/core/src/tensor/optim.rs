//! Adaptive-moment (Adam) optimizer.

use super::Real;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment accumulators for a fixed list of parameter buffers.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        Adam { cfg, m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to `params` and zero `grads`.
    ///
    /// # Panics
    /// If the buffer sizes differ from those the optimizer was created with.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &mut [Vec<T>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let bias1 = T::lit(1.0 - self.cfg.beta1.powi(t));
        let bias2 = T::lit(1.0 - self.cfg.beta2.powi(t));
        let lr = T::lit(self.cfg.lr);
        let eps = T::lit(self.cfg.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter_mut()).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), m.len(), "parameter size");
            assert_eq!(g.len(), m.len(), "gradient size");
            for i in 0..m.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + c1 * gi;
                v[i] = b2 * v[i] + c2 * gi * gi;
                let mhat = m[i] / bias1;
                let vhat = v[i] / bias2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
                g[i] = T::zero();
            }
        }
    }
}
