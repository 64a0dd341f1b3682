use crate::model::OptimizerState;
use crate::tensor::Tensor;

/// Bias-corrected adaptive-moment optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            state: OptimizerState {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        let st = &mut self.state;
        st.step += 1;
        let t = st.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(st.m.iter_mut().zip(st.v.iter_mut())) {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, &g), (m, v)) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                let delta = self.lr * mhat / (vhat.sqrt() + self.eps);
                // Skipping zero steps keeps a -0.0 parameter from flipping sign.
                if delta != 0.0 {
                    *p -= delta;
                }
            }
        }
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
