use rayon::prelude::*;

use crate::arch::{ctnet_forward, ModelConfig, ModelParams};
use crate::data::{add_awgn, stream_rng, ImageBuffer, NoiseSpec, Stream};
use crate::error::{Error, Result};

/// `10 log10(peak^2 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    if !a.same_geometry(b) {
        return Err(Error::shape(format!(
            "psnr of {}x{}x{} and {}x{}x{} images",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// Decibels for reports: four decimals, or `inf`.
pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Runs the network on one image of any size.
pub fn denoise(params: &ModelParams, cfg: &ModelConfig, noisy: &ImageBuffer) -> Result<ImageBuffer> {
    let (y, _) = ctnet_forward(&noisy.to_tensor(), params, cfg, false)?;
    ImageBuffer::from_tensor(&y, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub dataset: String,
    pub sigma: f64,
    pub image: String,
    /// PSNR of the 8-bit quantized model output against the clean image.
    pub psnr: f64,
    /// PSNR of the 8-bit quantized noisy input (the identity denoiser).
    pub noisy_psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

pub const EVAL_HEADER: &str = "dataset,sigma,image,psnr";

impl EvalTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.dataset, r.sigma, r.image, format_db(r.psnr)));
        }
        s
    }

    /// `(dataset, sigma, mean psnr, mean noisy psnr)` in first-seen order.
    pub fn averages(&self) -> Vec<(String, f64, f64, f64)> {
        let mut keys: Vec<(String, f64)> = Vec::new();
        for r in &self.rows {
            if !keys.iter().any(|(d, s)| *d == r.dataset && *s == r.sigma) {
                keys.push((r.dataset.clone(), r.sigma));
            }
        }
        keys.into_iter()
            .map(|(d, s)| {
                let sel: Vec<&EvalRow> = self.rows.iter().filter(|r| r.dataset == d && r.sigma == s).collect();
                let n = sel.len() as f64;
                let p = sel.iter().map(|r| r.psnr).sum::<f64>() / n;
                let q = sel.iter().map(|r| r.noisy_psnr).sum::<f64>() / n;
                (d, s, p, q)
            })
            .collect()
    }
}

/// Stream key of a noise level, so the noise does not depend on list order.
fn sigma_key(sigma: f64) -> u64 {
    (sigma * 1000.0).round() as u64
}

/// PSNR of the denoised output for every `(sigma, image)` pair. Noise for
/// image `i` at level `sigma` is fixed by `(seed, i, sigma)`.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelConfig,
    dataset: &str,
    images: &[(String, ImageBuffer)],
    sigmas: &[f64],
    seed: u64,
) -> Result<EvalTable> {
    if images.is_empty() {
        return Err(Error::Data(format!("dataset `{dataset}` has no images")));
    }
    let jobs: Vec<(f64, usize)> = sigmas.iter().flat_map(|&s| (0..images.len()).map(move |i| (s, i))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(sigma, i)| {
            let (name, clean) = &images[i];
            let spec = NoiseSpec::fixed(sigma, seed);
            let mut rng = stream_rng(seed, Stream::Eval, i as u64, sigma_key(sigma));
            let (noisy, _) = add_awgn(clean, &spec, &mut rng);
            let out = denoise(params, cfg, &noisy)?.quantized();
            Ok(EvalRow {
                dataset: dataset.to_string(),
                sigma,
                image: name.clone(),
                psnr: psnr(&out, clean, 1.0)?,
                noisy_psnr: psnr(&noisy.quantized(), clean, 1.0)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_image;

    fn flat(v: f64) -> ImageBuffer {
        ImageBuffer::new(4, 4, 1, vec![v; 16]).unwrap()
    }

    #[test]
    fn closed_forms() {
        assert_eq!(psnr(&flat(0.3), &flat(0.3), 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format_db(f64::INFINITY), "inf");
        let v = psnr(&flat(0.0), &flat(16.0 / 255.0), 1.0).unwrap();
        // independent form: 20 log10(255 / 16)
        assert!((v - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-12);
        assert!((v - 24.0487).abs() < 1e-3);
        assert_eq!(psnr(&flat(0.0), &flat(1.0), 1.0).unwrap(), 0.0);
        assert!(psnr(&flat(0.0), &ImageBuffer::zeros(2, 2, 1), 1.0).is_err());
    }

    #[test]
    fn zero_model_scores_the_noisy_input() {
        let cfg = ModelConfig::tiny(1);
        let params = ModelParams::zeros(&cfg);
        let imgs: Vec<_> = (0..2).map(|i| (format!("im{i}"), synth_image(12, 9, 1, i))).collect();
        let t = evaluate(&params, &cfg, "toy", &imgs, &[25.0, 15.0], 4).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!((t.rows[0].sigma, t.rows[2].sigma), (25.0, 15.0));
        assert!(t.rows.iter().all(|r| r.psnr == r.noisy_psnr));
        assert!(t.to_csv().starts_with("dataset,sigma,image,psnr\ntoy,25,im0,"));
        assert_eq!(t, evaluate(&params, &cfg, "toy", &imgs, &[25.0, 15.0], 4).unwrap());
        // noise per (image, sigma) does not depend on list order
        let u = evaluate(&params, &cfg, "toy", &imgs, &[15.0], 4).unwrap();
        assert_eq!(u.rows[1], t.rows[3]);
        assert!(evaluate(&params, &cfg, "toy", &[], &[25.0], 4).is_err());
    }
}
