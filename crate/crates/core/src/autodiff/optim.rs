//! Adam with gradient-norm clipping.

use super::params::ParamStore;

/// How the gradient threshold is applied before each update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    /// Each parameter array is rescaled to L2 norm at most `clip_norm`.
    PerArray,
    /// The concatenation of all gradients is rescaled as one vector.
    Global,
    Off,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub clip: ClipMode,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() })
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            clip: ClipMode::PerArray,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is indexed like the store; parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        let global_scale = match self.clip {
            ClipMode::Global => {
                let norm = grads
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| self.m[*i].len() > 0)
                    .flat_map(|(_, g)| g.iter().flatten())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                clip_scale(norm, self.clip_norm)
            }
            _ => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if self.m[i].is_empty() {
                continue;
            }
            let Some(g) = grads.get(i).and_then(|g| g.as_deref()) else {
                continue_zero(&mut self.m[i], &mut self.v[i], self.beta1, self.beta2);
                let (m, v) = (&self.m[i], &self.v[i]);
                for ((p, m), v) in store.value_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                    *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.epsilon);
                }
                continue;
            };
            let scale = match self.clip {
                ClipMode::PerArray => {
                    clip_scale(g.iter().map(|g| g * g).sum::<f64>().sqrt(), self.clip_norm)
                }
                ClipMode::Global => global_scale,
                ClipMode::Off => 1.0,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = store.value_mut(id).data_mut();
            for j in 0..data.len() {
                let gj = g[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                data[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.epsilon);
            }
        }
    }
}

fn clip_scale(norm: f64, limit: f64) -> f64 {
    if norm > limit {
        limit / norm
    } else {
        1.0
    }
}

fn continue_zero(m: &mut [f64], v: &mut [f64], b1: f64, b2: f64) {
    m.iter_mut().for_each(|m| *m *= b1);
    v.iter_mut().for_each(|v| *v *= b2);
}
