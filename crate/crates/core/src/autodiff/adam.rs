use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and follow the store's registration order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, idx: usize) -> Option<&[f64]> {
        self.m.get(idx).map(Vec::as_slice)
    }

    pub fn second_moment(&self, idx: usize) -> Option<&[f64]> {
        self.v.get(idx).map(Vec::as_slice)
    }

    /// Applies one update from the gradients in `store`, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, name, _)) = store.iter().find(|(_, _, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let tensor = store.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.clear_grad();
        Ok(())
    }
}
