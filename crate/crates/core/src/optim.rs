//! Adam over flat parameter groups.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// First and second moments for one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Keeps the moments of retained elements; `stride` values per element.
    pub fn retain(&mut self, keep: &[bool], stride: usize) {
        for buf in [&mut self.m, &mut self.v] {
            let kept: Vec<f64> = buf
                .chunks_exact(stride)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect();
            *buf = kept;
        }
    }

    pub fn extend_zeros(&mut self, n: usize) {
        self.m.extend(std::iter::repeat_n(0.0, n));
        self.v.extend(std::iter::repeat_n(0.0, n));
    }
}

/// One Adam update; `step` is 1-based (for bias correction).
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut Moments, lr: f64, step: u64, hp: &AdamParams) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), moments.m.len());
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.m.iter_mut().zip(moments.v.iter_mut()))
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}
