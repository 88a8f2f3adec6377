//! Adam optimizer with bias correction.

use ndarray::Array2;

use super::DiffError;

/// Adam hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators, one pair per parameter array.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Array2<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One in-place Adam update. Deterministic; rejects non-finite gradients.
pub fn adam_step(
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), DiffError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    assert!(cfg.lr > 0.0, "adam lr must be positive");
    for (index, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFiniteAdamGrad { index });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for i in 0..params.len() {
        let (m, v, p, g) = (&mut state.m[i], &mut state.v[i], &mut params[i], &grads[i]);
        m.zip_mut_with(g, |mv, &gv| *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv);
        v.zip_mut_with(g, |vv, &gv| *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv);
        for ((pv, &mv), &vv) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
