/// Adam with decoupled weight decay. Moments live in `f32`, matching the
/// training parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1,
            beta2,
            eps,
        }
    }

    /// Update number `t` (1-based). Decay is applied to the weights before
    /// the adaptive step and is independent of the gradient.
    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, weight_decay: f64, t: u64) {
        assert_eq!(params.len(), grads.len());
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (lr * weight_decay) as f32;
        let eps = self.eps as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= decay * params[i];
            params[i] -= step * self.m[i] / ((self.v[i] * inv_bc2).sqrt() + eps);
        }
    }
}

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            *g *= s;
        }
    }
    norm
}
