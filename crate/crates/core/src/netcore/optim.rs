use ndarray::Array2;

use super::params::{Gradients, ParameterStore};

/// Adam with decoupled weight decay. Decay applies only to parameters whose
/// path ends in `/w` (dense weight matrices); biases, scale offsets and
/// calibration are never decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParameterStore, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect(),
            v: store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect(),
            decay: store.iter().map(|(_, name, _)| name.ends_with("/w")).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let decay = if self.decay[k] { lr * self.weight_decay } else { 0.0 };
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= decay * *p + lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement of the monitored loss, never going below `min_lr`.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    lr: f64,
    best: f64,
    stale: usize,
}

impl ReduceOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        assert!(factor > 0.0 && factor < 1.0, "plateau factor must lie in (0, 1)");
        ReduceOnPlateau {
            factor,
            patience,
            min_lr,
            lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records an epoch loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr.min(self.lr));
                self.stale = 0;
            }
        }
        self.lr
    }
}
