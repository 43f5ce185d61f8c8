//! Robustness perturbations: seeded Gaussian noise, 90% downscaling, and a
//! red color filter.

use std::path::{Path, PathBuf};

use image::{imageops::FilterType, DynamicImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

/// Standard deviation of the additive noise on the 0-255 scale.
pub const NOISE_SIGMA: f64 = 10.0;
/// Green/blue attenuation of the red filter.
pub const RED_FILTER_SCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbKind {
    GaussianNoise,
    Resolution90,
    RedFilter,
}

impl PerturbKind {
    pub fn suffix(self) -> &'static str {
        match self {
            PerturbKind::GaussianNoise => "noise",
            PerturbKind::Resolution90 => "res90",
            PerturbKind::RedFilter => "red",
        }
    }
}

/// Standard normal draw via the Box-Muller transform.
fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Applies one perturbation to a decoded image. Deterministic: the same seed
/// yields byte-identical output.
pub fn perturb(image: &DynamicImage, kind: PerturbKind, seed: u64) -> DynamicImage {
    let rgb: RgbImage = image.to_rgb8();
    match kind {
        PerturbKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = rgb;
            for pixel in out.pixels_mut() {
                for channel in pixel.0.iter_mut() {
                    let noisy = *channel as f64 + NOISE_SIGMA * normal_draw(&mut rng);
                    *channel = noisy.round().clamp(0.0, 255.0) as u8;
                }
            }
            DynamicImage::ImageRgb8(out)
        }
        PerturbKind::Resolution90 => {
            let width = ((rgb.width() as f64) * 0.9).round().max(1.0) as u32;
            let height = ((rgb.height() as f64) * 0.9).round().max(1.0) as u32;
            DynamicImage::ImageRgb8(rgb).resize_exact(width, height, FilterType::Triangle)
        }
        PerturbKind::RedFilter => {
            let mut out = rgb;
            for pixel in out.pixels_mut() {
                pixel.0[1] = ((pixel.0[1] as f64) * RED_FILTER_SCALE).round() as u8;
                pixel.0[2] = ((pixel.0[2] as f64) * RED_FILTER_SCALE).round() as u8;
            }
            DynamicImage::ImageRgb8(out)
        }
    }
}

/// Reads a raster image, perturbs it, and writes the result next to the
/// input as `<stem>.<suffix>.png`, returning the new path.
pub fn perturb_file(path: &Path, kind: PerturbKind, seed: u64) -> Result<PathBuf, EvalError> {
    let image = image::open(path).map_err(|source| EvalError::UndecodableImage {
        path: path.to_path_buf(),
        source: Box::new(source),
    })?;
    let perturbed = perturb(&image, kind, seed);
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let out_path = path.with_file_name(format!("{stem}.{}.png", kind.suffix()));
    perturbed
        .save_with_format(&out_path, image::ImageFormat::Png)
        .map_err(|source| EvalError::UndecodableImage { path: out_path.clone(), source: Box::new(source) })?;
    Ok(out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient_image(w: u32, h: u32) -> DynamicImage {
        let img = RgbImage::from_fn(w, h, |x, y| {
            Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8])
        });
        DynamicImage::ImageRgb8(img)
    }

    #[test]
    fn resolution90_maps_100_to_90() {
        let out = perturb(&gradient_image(100, 100), PerturbKind::Resolution90, 0);
        assert_eq!(out.width(), 90);
        assert_eq!(out.height(), 90);
    }

    #[test]
    fn resolution90_rounds_odd_sizes() {
        let out = perturb(&gradient_image(33, 7), PerturbKind::Resolution90, 0);
        assert_eq!(out.width(), 30); // round(29.7)
        assert_eq!(out.height(), 6); // round(6.3)
    }

    #[test]
    fn same_seed_noise_is_byte_identical() {
        let input = gradient_image(32, 32);
        let a = perturb(&input, PerturbKind::GaussianNoise, 42).to_rgb8();
        let b = perturb(&input, PerturbKind::GaussianNoise, 42).to_rgb8();
        assert_eq!(a.as_raw(), b.as_raw());
        let c = perturb(&input, PerturbKind::GaussianNoise, 43).to_rgb8();
        assert_ne!(a.as_raw(), c.as_raw());
    }

    #[test]
    fn noise_stays_near_the_input() {
        let input = DynamicImage::ImageRgb8(RgbImage::from_pixel(64, 64, Rgb([128, 128, 128])));
        let out = perturb(&input, PerturbKind::GaussianNoise, 7).to_rgb8();
        let n = (out.as_raw().len()) as f64;
        let mean_dev: f64 = out.as_raw().iter().map(|&v| (v as f64 - 128.0).abs()).sum::<f64>() / n;
        // E|N(0, 10)| is about 8; allow slack either way but require real noise
        assert!(mean_dev > 4.0 && mean_dev < 12.0, "mean abs deviation {mean_dev}");
    }

    #[test]
    fn pure_red_is_a_red_filter_fixed_point() {
        let input = DynamicImage::ImageRgb8(RgbImage::from_pixel(16, 16, Rgb([200, 0, 0])));
        let out = perturb(&input, PerturbKind::RedFilter, 0).to_rgb8();
        assert_eq!(out.as_raw(), input.to_rgb8().as_raw());
    }

    #[test]
    fn red_filter_halves_green_and_blue() {
        let input = DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, Rgb([100, 80, 61])));
        let out = perturb(&input, PerturbKind::RedFilter, 0).to_rgb8();
        let px = out.get_pixel(0, 0).0;
        assert_eq!(px, [100, 40, 31]); // 30.5 rounds up
    }

    #[test]
    fn perturb_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("input.png");
        gradient_image(100, 100).save(&path).unwrap();
        let out = perturb_file(&path, PerturbKind::Resolution90, 0).unwrap();
        assert!(out.file_name().unwrap().to_str().unwrap().contains("res90"));
        let reloaded = image::open(&out).unwrap();
        assert_eq!(reloaded.width(), 90);
    }

    #[test]
    fn undecodable_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_an_image.png");
        std::fs::write(&path, b"plain text").unwrap();
        let err = perturb_file(&path, PerturbKind::RedFilter, 0).unwrap_err();
        assert!(matches!(err, EvalError::UndecodableImage { .. }));
    }
}
