use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Gradients};
use crate::models::{Binding, ParamStore};

use super::GanError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a store's trainable parameters.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Array>>,
    v: Vec<Option<Array>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let moments: Vec<Option<Array>> = store
            .params()
            .iter()
            .map(|p| p.trainable.then(|| Array::zeros(p.value.shape())))
            .collect();
        Adam {
            cfg,
            m: moments.clone(),
            v: moments,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn reset(&mut self) {
        for slot in self.m.iter_mut().chain(self.v.iter_mut()).flatten() {
            slot.data_mut().fill(0.0);
        }
        self.t = 0;
    }

    /// Applies one update from the gradients of `binding`'s handles. Nothing
    /// is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, binding: &Binding, grads: &Gradients) -> Result<(), GanError> {
        let mut updates = Vec::new();
        for (id, t) in binding.handles() {
            let Some(g) = grads.get(t) else { continue };
            if !g.all_finite() {
                let name = &store.params()[id.0].name;
                return Err(GanError::NonFinite(format!("gradient of `{name}`")));
            }
            updates.push((id, g));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in updates {
            let m = self.m[id.0].as_mut().expect("trainable parameter");
            let v = self.v[id.0].as_mut().expect("trainable parameter");
            let p = store.get_mut(id).data_mut();
            for (((pi, mi), vi), &gi) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
