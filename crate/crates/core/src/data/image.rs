//! 8-bit image files in and out of the `[0, 1]` float domain.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (`[C, H, W]`) image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::Data(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageBuffer { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageBuffer { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_geometry(&self, other: &ImageBuffer) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }

    /// `[1, C, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, self.channels, self.height, self.width], self.data.clone()).expect("valid geometry")
    }

    /// Sample `n` of an `[N, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || n >= s[0] {
            return Err(Error::shape(format!("cannot take image {n} of tensor {s:?}")));
        }
        let len = s[1] * s[2] * s[3];
        Self::new(s[2], s[3], s[1], t.data()[n * len..(n + 1) * len].to_vec())
    }

    /// Stacks equally sized images into an `[N, C, H, W]` batch.
    pub fn stack(images: &[ImageBuffer]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
        if let Some(bad) = images.iter().find(|i| !i.same_geometry(first)) {
            return Err(Error::shape(format!(
                "batch mixes {}x{}x{} and {}x{}x{} images",
                first.channels, first.height, first.width, bad.channels, bad.height, bad.width
            )));
        }
        let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
        Tensor::new([images.len(), first.channels, first.height, first.width], data)
    }

    /// Rounds to the 8-bit grid (`x * 255`, round half up, clamp to `[0, 255]`)
    /// and maps back to `[0, 1]`.
    pub fn quantized(&self) -> ImageBuffer {
        ImageBuffer { data: self.data.iter().map(|&v| f64::from(quantize(v)) / 255.0).collect(), ..self.clone() }
    }
}

/// The 8-bit code of a normalized value.
pub fn quantize(v: f64) -> u8 {
    let q = (v * 255.0 + 0.5).floor();
    if q.is_nan() {
        0
    } else {
        q.clamp(0.0, 255.0) as u8
    }
}

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Loads an 8-bit PNG or binary PGM/PPM file.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let img = image::ImageReader::open(path)
        .map_err(|e| image_err(path, e))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e))?;
    match img.format() {
        Some(ImageFormat::Png | ImageFormat::Pnm) => {}
        Some(f) => return Err(image_err(path, format!("unsupported format {f:?}"))),
        None => return Err(image_err(path, "unrecognized image format")),
    }
    let img = img.decode().map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => {
            ImageBuffer::new(h, w, 1, g.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
        }
        DynamicImage::ImageRgb8(rgb) => {
            let raw = rgb.into_raw();
            let mut data = vec![0.0; raw.len()];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = f64::from(px[c]) / 255.0;
                }
            }
            ImageBuffer::new(h, w, 3, data)
        }
        other => Err(image_err(path, format!("unsupported pixel layout {:?}, expected 8-bit gray or RGB", other.color()))),
    }
}

/// Writes PNG for `.png` and binary PGM/PPM for `.pgm`, `.ppm` or `.pnm`.
pub fn save_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let format = match ext.as_deref() {
        Some("png") => ImageFormat::Png,
        Some("pgm" | "ppm" | "pnm") => ImageFormat::Pnm,
        _ => return Err(image_err(path, "output must end in .png, .pgm, .ppm or .pnm")),
    };
    match (ext.as_deref(), img.channels) {
        (Some("pgm"), 3) => return Err(image_err(path, "a PGM file cannot hold a color image")),
        (Some("ppm"), 1) => return Err(image_err(path, "a PPM file cannot hold a gray image")),
        _ => {}
    }
    let (w, h) = (img.width as u32, img.height as u32);
    let plane = img.height * img.width;
    let dynamic = if img.channels == 1 {
        let raw = img.data.iter().map(|&v| quantize(v)).collect();
        DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, raw).expect("buffer size"))
    } else {
        let mut raw = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            raw.extend((0..3).map(|c| quantize(img.data[c * plane + i])));
        }
        DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, raw).expect("buffer size"))
    };
    dynamic.save_with_format(path, format).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_fixture_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, b"P5\n2 2\n255\n\x00\x40\x80\xff").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.height, img.width, img.channels), (2, 2, 1));
        assert_eq!(img.data, vec![0.0, 64.0 / 255.0, 128.0 / 255.0, 1.0]);
        let q = dir.path().join("b.pgm");
        save_image(&img, &q).unwrap();
        assert_eq!(load_image(&q).unwrap(), img);
    }

    #[test]
    fn color_ppm_and_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        std::fs::write(&p, b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels, 3);
        // planar: red plane first
        assert_eq!(img.get(0, 0, 1), 4.0 / 255.0);
        assert_eq!(img.get(2, 0, 0), 3.0 / 255.0);
        let png = dir.path().join("c.png");
        save_image(&img, &png).unwrap();
        assert_eq!(load_image(&png).unwrap(), img);
    }

    #[test]
    fn save_clamps_and_rounds_half_up() {
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.49 / 255.0), 1);
        assert_eq!(quantize(f64::NAN), 0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.pgm");
        let img = ImageBuffer::new(1, 3, 1, vec![-1.0, 2.0, 0.5]).unwrap();
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap().data, vec![0.0, 1.0, 128.0 / 255.0]);
    }

    #[test]
    fn truncated_and_unsupported_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })));
        let q = dir.path().join("x.txt");
        std::fs::write(&q, b"hello").unwrap();
        assert!(load_image(&q).is_err());
        assert!(save_image(&ImageBuffer::zeros(2, 2, 1), &dir.path().join("x.bmp")).is_err());
    }

    #[test]
    fn tensor_conversions() {
        let a = ImageBuffer::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = ImageBuffer::new(2, 2, 1, vec![0.5, 0.6, 0.7, 0.8]).unwrap();
        let t = ImageBuffer::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.shape(), [2, 1, 2, 2]);
        assert_eq!(ImageBuffer::from_tensor(&t, 1).unwrap(), b);
        assert_eq!(a.to_tensor().shape(), [1, 1, 2, 2]);
        assert!(ImageBuffer::stack(&[a, ImageBuffer::zeros(3, 2, 1)]).is_err());
    }
}
