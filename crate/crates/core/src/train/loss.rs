use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Normalization of the summed squared error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `1 / (2n)` with `n` the number of samples in the batch.
    #[default]
    PerSample,
    /// `1 / (2m)` with `m` the number of values in the batch.
    PerPixel,
}

/// Half squared error over `[N, ...]` batches.
pub fn mse_loss(g: &mut Graph, pred: &Var, target: &Var, reduction: LossReduction) -> Result<Var> {
    if pred.shape() != target.shape() || pred.shape().is_empty() {
        return Err(Error::shape(format!("loss inputs {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = match reduction {
        LossReduction::PerSample => pred.shape()[0],
        LossReduction::PerPixel => pred.value().len(),
    };
    let d = g.sub(pred, target)?;
    let sq = g.mul(&d, &d)?;
    let s = g.sum(&sq);
    Ok(g.scale(&s, 0.5 / n as f64))
}
