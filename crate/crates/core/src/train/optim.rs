use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdadeltaParams {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdadeltaParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            rho: 0.95,
            eps: 1e-6,
            weight_decay: 1e-9,
        }
    }
}

/// Running averages of squared gradients and squared updates for one tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdadeltaState {
    pub sq_grad: Vec<f64>,
    pub sq_update: Vec<f64>,
}

impl AdadeltaState {
    pub fn new(len: usize) -> Self {
        Self {
            sq_grad: vec![0.0; len],
            sq_update: vec![0.0; len],
        }
    }
}

/// One Adadelta step with decoupled weight decay:
///
/// ```text
/// E[g²] ← ρ E[g²] + (1 − ρ) g²
/// Δ     = −√(E[Δ²] + ε) / √(E[g²] + ε) · g
/// E[Δ²] ← ρ E[Δ²] + (1 − ρ) Δ²
/// θ     ← θ + lr · Δ − lr · wd · θ
/// ```
pub fn adadelta_step(theta: &mut [f64], grad: &[f64], state: &mut AdadeltaState, p: &AdadeltaParams) -> Result<()> {
    let n = theta.len();
    if grad.len() != n || state.sq_grad.len() != n || state.sq_update.len() != n {
        return Err(Error::shape(&[n], &[grad.len()]));
    }
    for i in 0..n {
        let g = grad[i];
        let eg = p.rho * state.sq_grad[i] + (1.0 - p.rho) * g * g;
        state.sq_grad[i] = eg;
        let delta = -((state.sq_update[i] + p.eps).sqrt() / (eg + p.eps).sqrt()) * g;
        state.sq_update[i] = p.rho * state.sq_update[i] + (1.0 - p.rho) * delta * delta;
        theta[i] += p.lr * delta - p.lr * p.weight_decay * theta[i];
    }
    Ok(())
}
