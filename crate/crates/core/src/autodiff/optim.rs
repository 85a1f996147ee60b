//! Adam with linear warmup.

use crate::tensor::Tensor;

/// Optimizer state for a flat list of parameters.
///
/// `step` counts calls to [`adam_step`] and drives the warmup ramp. Bias
/// correction uses a per-parameter count of updates actually received, so a
/// parameter that joins the optimizer late (see encoder freezing) starts with
/// the same effective step size as one trained from the beginning.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub updates: Vec<u64>,
    pub lr_base: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr_base: f64, warmup_steps: u64) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            step: 0,
            v: m.clone(),
            updates: vec![0; m.len()],
            m,
            lr_base,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Learning rate used by the update at (1-based) step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr_base
        } else {
            self.lr_base * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// One Adam update. `grads[i] == None` leaves parameter `i` and its moments untouched.
pub fn adam_step(params: &mut [Tensor], grads: &[Option<Tensor>], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.step += 1;
    let lr = state.lr_at(state.step);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        state.updates[i] += 1;
        let t = state.updates[i] as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
