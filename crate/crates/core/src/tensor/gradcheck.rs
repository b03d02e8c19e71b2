use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Result for one perturbed coordinate.
#[derive(Clone, Debug)]
pub struct CoordCheck {
    /// Index into the list of checked tensors.
    pub input: usize,
    /// Flat element index within that tensor.
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// The ±h probes straddle a ReLU kink, so the central difference says
    /// nothing about the analytic gradient there.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn checked(&self) -> impl Iterator<Item = &CoordCheck> {
        self.coords.iter().filter(|c| !c.skipped)
    }

    pub fn num_checked(&self) -> usize {
        self.checked().count()
    }

    pub fn num_skipped(&self) -> usize {
        self.coords.len() - self.num_checked()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checked().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        let tol = self.tolerance;
        self.checked().filter(move |c| !(c.rel_err < tol))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`.
///
/// `coords` selects `(tensor index, flat element)` pairs; `None` checks every
/// element of every tensor. Coordinates whose probes cross a ReLU kink are
/// reported as skipped rather than failed.
pub fn finite_diff_check<F>(
    f: F,
    point: &[Tensor],
    coords: Option<&[(usize, usize)]>,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.track_kinks();
    let vars: Vec<Var> = point.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if loss.value().len() != 1 {
        return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
    }
    let base_kinks = g.kink_fingerprint();
    g.backward(&loss)?;
    let grads: Vec<Option<Tensor>> = vars.iter().map(|v| g.grad(v)).collect();
    drop(g);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = point.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
            &all
        }
    };

    let eval = |input: usize, index: usize, delta: f64| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::no_grad();
        g.track_kinks();
        let vars: Vec<Var> = point
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == input {
                    let mut t = t.clone();
                    t.data_mut()[index] += delta;
                    g.constant(t)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let y = f(&mut g, &vars)?.value().item()?;
        Ok((y, g.kink_fingerprint()))
    };

    let mut out = Vec::with_capacity(coords.len());
    for &(input, index) in coords {
        if input >= point.len() || index >= point[input].len() {
            return Err(Error::Contract(format!("coordinate ({input}, {index}) out of range")));
        }
        let analytic = grads[input].as_ref().map_or(0.0, |t| t.data()[index]);
        let (fp, kp) = eval(input, index, h)?;
        let (fm, km) = eval(input, index, -h)?;
        let numeric = (fp - fm) / (2.0 * h);
        let skipped = kp != km || kp != base_kinks;
        out.push(CoordCheck { input, index, analytic, numeric, rel_err: relative_error(analytic, numeric), skipped });
    }
    Ok(GradCheckReport { coords: out, tolerance, step: h })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new([4], vec![0.3, -1.2, 2.0, 0.01]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let sq = g.mul(&v[0], &v[0])?;
                let s = g.sum(&sq);
                Ok(g.scale(&s, 1.5))
            },
            &[x],
            None,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert_eq!(report.num_checked(), 4);
        assert!(report.max_rel_err() < 1e-9, "{report:?}");
    }

    #[test]
    fn relu_at_zero_is_skipped() {
        let x = Tensor::new([3], vec![0.0, 1.0, -1.0]).unwrap();
        let report = finite_diff_check(
            |g, v| {
                let r = g.relu(&v[0]);
                Ok(g.sum(&r))
            },
            &[x],
            None,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.coords[0].skipped);
        assert!(!report.coords[1].skipped && !report.coords[2].skipped);
        assert!(report.passed());
    }

    #[test]
    fn two_layer_conv_net_passes() {
        let mut s = 0x1234_5678u64;
        let mut rnd = |shape: &[usize]| {
            Tensor::from_fn(shape.to_vec(), |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.8
            })
        };
        let point = vec![
            rnd(&[2, 1, 5, 5]),
            rnd(&[3, 1, 3, 3]),
            rnd(&[3]),
            rnd(&[2, 3, 3, 3]),
            rnd(&[2]),
        ];
        let report = finite_diff_check(
            |g, v| {
                let h = g.conv2d(&v[0], &v[1], &v[2])?;
                let h = g.relu(&h);
                let y = g.conv2d(&h, &v[3], &v[4])?;
                let sq = g.mul(&y, &y)?;
                Ok(g.sum(&sq))
            },
            &point,
            None,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(report.num_checked() > 0);
        assert!(report.passed(), "max rel err {}", report.max_rel_err());
    }
}
