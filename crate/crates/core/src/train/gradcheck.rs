use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{mse_loss, LossReduction};
use crate::arch::{ctnet_forward_graph, BoundParams, ModelConfig, ModelParams};
use crate::error::Result;
use crate::tensor::{finite_diff_check, GradCheckReport, Tensor};

/// Random weights with random biases, positional tables and layer-norm
/// affines, so that no path of the network is trivially inactive.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (name, t) in p.iter_mut() {
        let role = name.rsplit('.').next().unwrap_or_default();
        match role {
            "b" | "pos" | "beta" => t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2)),
            "gamma" => t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
            _ => {}
        }
    }
    p
}

/// Result of an end-to-end gradient check, with the parameter name of every
/// checked coordinate.
pub struct ModelGradCheck {
    pub report: GradCheckReport,
    pub names: Vec<String>,
}

impl ModelGradCheck {
    pub fn name_of(&self, input: usize) -> &str {
        &self.names[input]
    }
}

/// Central finite differences of `loss(ctnet(noisy), clean)` against the
/// analytic gradient at `coords` random parameter coordinates.
///
/// Key-projection biases are never sampled: adding a constant to every key
/// score of a query leaves the softmax unchanged, so their true gradient is
/// exactly zero and a relative error would only measure roundoff.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64, coords: usize, h: f64, tolerance: f64) -> Result<ModelGradCheck> {
    cfg.validate()?;
    let params = perturbed_params(cfg, seed);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let side = cfg.spatial_multiple() * 2;
    let shape = [2, cfg.image_channels, side, side];
    let noisy = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
    let clean = Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));

    let eligible: Vec<usize> = (0..names.len()).filter(|&i| !names[i].ends_with(".k.b")).collect();
    let point: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let picks: Vec<(usize, usize)> = (0..coords)
        .map(|_| {
            let i = eligible[rng.random_range(0..eligible.len())];
            (i, rng.random_range(0..point[i].len()))
        })
        .collect();

    let report = finite_diff_check(
        |g, vars| {
            let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().cloned()));
            let x = g.constant(noisy.clone());
            let y = g.constant(clean.clone());
            let (pred, _) = ctnet_forward_graph(g, &bound, cfg, &x, false)?;
            mse_loss(g, &pred, &y, LossReduction::PerSample)
        },
        &point,
        Some(&picks),
        h,
        tolerance,
    )?;
    Ok(ModelGradCheck { report, names })
}
