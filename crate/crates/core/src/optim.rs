//! Adam optimizer and the step-decay learning-rate schedule.

use ndarray::ArrayD;

use crate::autodiff::{c, Real};

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step so the optimizer can be constructed before the model.
#[derive(Clone)]
pub struct Adam<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update with the given learning rate; `grads` must align with
    /// `params`.
    pub fn step(&mut self, params: &mut [ArrayD<F>], grads: &[ArrayD<F>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        self.t += 1;
        let b1 = c::<F>(self.beta1);
        let b2 = c::<F>(self.beta2);
        let one = F::one();
        let eps = c::<F>(self.eps);
        let corr1 = c::<F>(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = c::<F>(1.0 - self.beta2.powi(self.t as i32));
        let lr = c::<F>(lr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / corr1;
                    let vhat = *v / corr2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

impl<F: Real> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Step-decay schedule: base * 0.5^(epoch / halve_every).
pub fn scheduled_lr(base: f64, epoch: usize, halve_every: usize) -> f64 {
    base * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}
