//! Adam optimizer over a [`ParamStore`].

use crate::params::ParamStore;

/// Adam with bias correction. Moments are addressed by parameter index,
/// so the optimizer state can be checkpointed alongside the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Completed steps.
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            m,
            v,
            t: 0,
        }
    }

    /// One update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let tensor = store.value_mut(id);
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            let data = tensor.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in grad.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
