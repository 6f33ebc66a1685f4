//! Image augmentation and per-channel standardization.

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct AugmentPolicy {
    /// Zero-pad by `pad` pixels on each side and re-crop to the original
    /// size (random offset in train mode, centered in eval mode).
    pub resize_crop: bool,
    pub pad: usize,
    pub horizontal_flip_prob: f64,
    /// Maximum absolute rotation in degrees; episodic training only.
    pub rotation_degrees: f64,
    pub channel_mean: Vec<f32>,
    pub channel_std: Vec<f32>,
}

impl AugmentPolicy {
    pub fn identity(channels: usize) -> Self {
        AugmentPolicy {
            resize_crop: false,
            pad: 0,
            horizontal_flip_prob: 0.0,
            rotation_degrees: 0.0,
            channel_mean: vec![0.0; channels],
            channel_std: vec![1.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::config(format!(
                "flip probability {} outside [0,1]",
                self.horizontal_flip_prob
            )));
        }
        if self.channel_mean.len() != self.channel_std.len() {
            return Err(Error::config("channel mean/std length mismatch"));
        }
        if self.channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("channel std must be strictly positive"));
        }
        if self.rotation_degrees < 0.0 {
            return Err(Error::config("rotation range must be nonnegative"));
        }
        Ok(())
    }
}

/// Train mode: pad-crop, horizontal flip, optional rotation, standardize.
/// Eval mode: center crop and standardize only. Pure given the generator.
pub fn augment(
    image: &LabeledImage,
    policy: &AugmentPolicy,
    rng: &mut impl Rng,
    train_mode: bool,
) -> Tensor<f32> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    debug_assert_eq!(policy.channel_mean.len(), c);
    let mut pixels = image.pixels.clone();

    if train_mode {
        if policy.resize_crop && policy.pad > 0 {
            let dy = rng.random_range(0..=2 * policy.pad);
            let dx = rng.random_range(0..=2 * policy.pad);
            pixels = pad_crop(&pixels, policy.pad, dy, dx);
        }
        if policy.horizontal_flip_prob > 0.0 && rng.random::<f64>() < policy.horizontal_flip_prob {
            pixels = flip_horizontal(&pixels);
        }
        if policy.rotation_degrees > 0.0 {
            let theta = (rng.random::<f64>() * 2.0 - 1.0) * policy.rotation_degrees;
            pixels = rotate_bilinear(&pixels, theta.to_radians());
        }
    }
    // center crop is the identity while output size equals input size; the
    // pad-crop path is the only geometry change we apply

    let mut out = pixels.into_data();
    for ch in 0..c {
        let mean = policy.channel_mean[ch];
        let inv_std = 1.0 / policy.channel_std[ch];
        for v in out[ch * h * w..(ch + 1) * h * w].iter_mut() {
            *v = (*v - mean) * inv_std;
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn pad_crop(pixels: &Tensor<f32>, pad: usize, dy: usize, dx: usize) -> Tensor<f32> {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let mut out = vec![0.0f32; c * h * w];
    let src = pixels.data();
    for ch in 0..c {
        for y in 0..h {
            // source row in the padded frame
            let sy = y as isize + dy as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn flip_horizontal(pixels: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let src = pixels.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

fn rotate_bilinear(pixels: &Tensor<f32>, theta: f64) -> Tensor<f32> {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let src = pixels.data();
    let mut out = vec![0.0f32; c * h * w];
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    for y in 0..h {
        for x in 0..w {
            // rotate the output coordinate back into the source frame
            let ry = y as f64 - cy;
            let rx = x as f64 - cx;
            let sy = cos * ry + sin * rx + cy;
            let sx = -sin * ry + cos * rx + cx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = sy - y0;
            let fx = sx - x0;
            for ch in 0..c {
                let sample = |yy: f64, xx: f64| -> f64 {
                    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                        0.0
                    } else {
                        src[(ch * h + yy as usize) * w + xx as usize] as f64
                    }
                };
                let v = sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + sample(y0, x0 + 1.0) * (1.0 - fy) * fx
                    + sample(y0 + 1.0, x0) * fy * (1.0 - fx)
                    + sample(y0 + 1.0, x0 + 1.0) * fy * fx;
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Concern};

    fn test_image() -> LabeledImage {
        let data: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 17) as f32 / 16.0).collect();
        LabeledImage::new(Tensor::from_vec(&[3, 8, 8], data), 0)
    }

    #[test]
    fn identity_policy_matches_eval() {
        let img = test_image();
        let policy = AugmentPolicy::identity(3);
        let mut rng = stream(0, Concern::Augment, 0);
        let train = augment(&img, &policy, &mut rng, true);
        let mut rng = stream(0, Concern::Augment, 0);
        let eval = augment(&img, &policy, &mut rng, false);
        assert_eq!(train, eval);
    }

    #[test]
    fn identity_normalization_preserves_input() {
        let img = test_image();
        let policy = AugmentPolicy::identity(3);
        let mut rng = stream(0, Concern::Augment, 1);
        let out = augment(&img, &policy, &mut rng, false);
        assert_eq!(out, img.pixels);
    }

    #[test]
    fn forced_standardization_arithmetic() {
        let img = LabeledImage::new(Tensor::filled(&[3, 8, 8], 0.5), 0);
        let mut policy = AugmentPolicy::identity(3);
        policy.channel_mean = vec![0.5; 3];
        policy.channel_std = vec![0.25; 3];
        let mut rng = stream(0, Concern::Augment, 2);
        let out = augment(&img, &policy, &mut rng, false);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_stream_is_deterministic() {
        let img = test_image();
        let mut policy = AugmentPolicy::identity(3);
        policy.resize_crop = true;
        policy.pad = 2;
        policy.horizontal_flip_prob = 0.5;
        policy.rotation_degrees = 10.0;
        let a = augment(&img, &policy, &mut stream(3, Concern::Augment, 9), true);
        let b = augment(&img, &policy, &mut stream(3, Concern::Augment, 9), true);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = test_image();
        let rotated = rotate_bilinear(&img.pixels, 0.0);
        for (a, b) in rotated.data().iter().zip(img.pixels.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_is_involution() {
        let img = test_image();
        let once = flip_horizontal(&img.pixels);
        let twice = flip_horizontal(&once);
        assert_eq!(twice, img.pixels);
    }

    #[test]
    fn validation_rejects_bad_policies() {
        let mut p = AugmentPolicy::identity(3);
        p.horizontal_flip_prob = 1.5;
        assert!(p.validate().is_err());
        let mut p = AugmentPolicy::identity(3);
        p.channel_std[1] = 0.0;
        assert!(p.validate().is_err());
    }
}
