use rayon::prelude::*;

use crate::arch::{ctnet_forward, ModelConfig, ModelParams};
use crate::data::{save_image, ImageBuffer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layers whose CKA with another layer is below this count as dissimilar.
pub const CKA_THRESHOLD: f64 = 0.6;

/// Column-centered copy of a `[samples, features]` matrix.
fn centered(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let s = x.shape();
    if s.len() != 2 || s[0] < 2 {
        return Err(Error::shape(format!("cka needs a [samples >= 2, features] matrix, got {s:?}")));
    }
    let (n, p) = (s[0], s[1]);
    let mut d = x.data().to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| d[i * p + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| d[i * p + j] -= mean);
    }
    Ok((n, p, d))
}

/// `A^T B` for row-major `[n, p]` and `[n, q]`.
fn cross(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    for i in 0..n {
        let (ra, rb) = (&a[i * p..(i + 1) * p], &b[i * q..(i + 1) * q]);
        for (j, &va) in ra.iter().enumerate() {
            let row = &mut out[j * q..(j + 1) * q];
            row.iter_mut().zip(rb).for_each(|(o, &vb)| *o += va * vb);
        }
    }
    out
}

fn frob2(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Centered activations with the Frobenius norm of their Gram matrix.
struct Summary {
    n: usize,
    p: usize,
    data: Vec<f64>,
    self_norm: f64,
}

fn summarize(x: &Tensor, what: &str) -> Result<Summary> {
    let (n, p, data) = centered(x)?;
    let self_norm = frob2(&cross(&data, p, &data, p, n)).sqrt();
    if self_norm == 0.0 {
        return Err(Error::UndefinedSimilarity(format!("{what} has zero variance")));
    }
    Ok(Summary { n, p, data, self_norm })
}

fn cka_of(a: &Summary, b: &Summary) -> f64 {
    frob2(&cross(&b.data, b.p, &a.data, a.p, a.n)) / (a.self_norm * b.self_norm)
}

/// Linear CKA `||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)` of two
/// `[samples, features]` matrices over the same samples.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::shape(format!("cka inputs {:?} and {:?} need the same sample count", x.shape(), y.shape())));
    }
    Ok(cka_of(&summarize(x, "first input")?, &summarize(y, "second input")?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkaProfile {
    pub layers: Vec<String>,
    /// Row-major `L x L`.
    pub matrix: Vec<f64>,
    /// Fraction of the other `L - 1` layers with CKA below the threshold.
    pub ratios: Vec<f64>,
    /// Traced layers left out because their activations are constant.
    pub zero_variance: Vec<String>,
}

/// Share of off-diagonal entries per row below [`CKA_THRESHOLD`].
pub fn dissimilarity_ratios(matrix: &[f64], l: usize) -> Vec<f64> {
    (0..l)
        .map(|i| (0..l).filter(|&j| j != i && matrix[i * l + j] < CKA_THRESHOLD).count() as f64 / (l - 1) as f64)
        .collect()
}

/// `[N, C, H, W]` activations as `[N*H*W, C]` rows, one per pixel.
fn pixel_rows(t: &Tensor) -> (usize, Vec<f64>) {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![0.0; n * hw * c];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hw {
                out[(b * hw + i) * c + ch] = t.data()[(b * c + ch) * hw + i];
            }
        }
    }
    (c, out)
}

/// Pairwise linear CKA between every traced layer, with pixels of all probe
/// images as samples and channels as features.
pub fn cka_profile(params: &ModelParams, cfg: &ModelConfig, probes: &[ImageBuffer]) -> Result<CkaProfile> {
    if probes.is_empty() {
        return Err(Error::Data("cka needs at least one probe image".into()));
    }
    let traces = probes
        .iter()
        .map(|img| {
            let (_, trace) = ctnet_forward(&img.to_tensor(), params, cfg, true)?;
            Ok(trace.expect("tracing enabled"))
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = traces[0].names().map(String::from).collect();

    let mut layers = Vec::new();
    let mut summaries = Vec::new();
    let mut zero_variance = Vec::new();
    for (li, name) in names.iter().enumerate() {
        let mut rows = Vec::new();
        let mut width = 0;
        for tr in &traces {
            let (c, r) = pixel_rows(&tr.iter().nth(li).expect("same trace layout").1);
            width = c;
            rows.extend(r);
        }
        let m = Tensor::new([rows.len() / width, width], rows)?;
        match summarize(&m, name) {
            Ok(s) => {
                layers.push(name.clone());
                summaries.push(s);
            }
            Err(Error::UndefinedSimilarity(_)) => zero_variance.push(name.clone()),
            Err(e) => return Err(e),
        }
    }
    let l = layers.len();
    if l < 2 {
        return Err(Error::UndefinedSimilarity(format!(
            "only {l} traced layers have non-zero variance; constant layers: {}",
            zero_variance.join(", ")
        )));
    }
    let upper: Vec<(usize, usize, f64)> = (0..l)
        .flat_map(|i| (i + 1..l).map(move |j| (i, j)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(i, j)| (i, j, cka_of(&summaries[i], &summaries[j])))
        .collect();
    let mut matrix = vec![0.0; l * l];
    for i in 0..l {
        matrix[i * l + i] = 1.0;
    }
    for (i, j, v) in upper {
        matrix[i * l + j] = v;
        matrix[j * l + i] = v;
    }
    let ratios = dissimilarity_ratios(&matrix, l);
    Ok(CkaProfile { layers, matrix, ratios, zero_variance })
}

impl CkaProfile {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.layers.len() + j]
    }

    /// Matrix with a header row and column of layer names.
    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("layer");
        for n in &self.layers {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (i, n) in self.layers.iter().enumerate() {
            s.push_str(n);
            for j in 0..self.layers.len() {
                s.push_str(&format!(",{:.10}", self.get(i, j)));
            }
            s.push('\n');
        }
        s
    }

    /// `layer,ratio` rows, then constant layers with an empty ratio.
    pub fn ratios_csv(&self) -> String {
        let mut s = String::from("layer,ratio\n");
        for (n, r) in self.layers.iter().zip(&self.ratios) {
            s.push_str(&format!("{n},{r:.10}\n"));
        }
        for n in &self.zero_variance {
            s.push_str(&format!("{n},\n"));
        }
        s
    }

    /// Gray heatmap, one `cell x cell` block per entry, white for CKA 1.
    pub fn heatmap(&self, cell: usize) -> ImageBuffer {
        let l = self.layers.len();
        let side = l * cell;
        let mut img = ImageBuffer::zeros(side, side, 1);
        for y in 0..side {
            for x in 0..side {
                img.data[y * side + x] = self.get(y / cell, x / cell).clamp(0.0, 1.0);
            }
        }
        img
    }

    pub fn save_heatmap(&self, path: &std::path::Path, cell: usize) -> Result<()> {
        save_image(&self.heatmap(cell), path)
    }
}
