//! Procedural clean images for toy runs and fixtures: a smooth gradient
//! background with a few flat rectangles and discs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::ImageBuffer;

pub fn synth_image(height: usize, width: usize, channels: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageBuffer::zeros(height, width, channels);
    let plane = height * width;
    let (h, w) = (height as f64, width as f64);
    for c in 0..channels {
        let (a, gy, gx) = (rng.random_range(0.2..0.8), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        for y in 0..height {
            for x in 0..width {
                img.data[c * plane + y * width + x] = a + gy * (y as f64 / h - 0.5) + gx * (x as f64 / w - 0.5);
            }
        }
    }
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let color: Vec<f64> = (0..channels).map(|_| rng.random_range(0.0..1.0)).collect();
        let (cy, cx) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let (ry, rx) = (rng.random_range(0.1..0.35) * h, rng.random_range(0.1..0.35) * w);
        let disc = rng.random_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        img.data[c * plane + y * width + x] = v;
                    }
                }
            }
        }
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}
