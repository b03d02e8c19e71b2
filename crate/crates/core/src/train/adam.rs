use serde::{Deserialize, Serialize};

use crate::arch::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Optimizer state: step count and per-parameter moments, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let moments =
            params.iter().map(|(n, p)| (n.to_string(), Tensor::zeros(p.shape()), Tensor::zeros(p.shape()))).collect();
        AdamState { t: 0, moments }
    }
}

/// One bias-corrected Adam update,
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
///
/// `grads` must name every parameter, in any order.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    let lookup: std::collections::HashMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    // validate everything before touching any state
    for (name, p) in params.iter() {
        match lookup.get(name) {
            None => return Err(Error::Contract(format!("no gradient for parameter `{name}`"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::Contract(format!("gradient for `{name}` has shape {:?}", g.shape())))
            }
            _ => {}
        }
    }
    if state.moments.len() != params.len() || state.moments.iter().zip(params.names()).any(|(m, n)| m.0 != n) {
        return Err(Error::Contract("optimizer state does not match the parameter set".into()));
    }

    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for ((name, p), (_, m, v)) in params.iter_mut().zip(state.moments.iter_mut()) {
        let g = lookup[name];
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
