//! Random photometric views of training images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corrupt::{
    add_noise, convolve_reflect, gaussian_kernel, scale_contrast, shift_brightness,
};
use super::stream_seed;
use crate::error::{FicoError, Result};
use crate::tensor::Tensor;

/// Sampling ranges for the augmented views. Each range is inclusive; a range collapsed onto the
/// neutral value disables that operation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Views per image `N`.
    pub views: usize,
    /// Brightness offset drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor range.
    pub contrast: [f64; 2],
    /// Gaussian blur sigma range in pixels.
    pub blur_sigma: [f64; 2],
    /// Additive noise sigma range.
    pub noise_sigma: [f64; 2],
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            views: 2,
            brightness: 0.2,
            contrast: [0.6, 1.4],
            blur_sigma: [0.0, 1.0],
            noise_sigma: [0.0, 0.08],
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// A policy whose views equal the input.
    pub fn neutral(views: usize, seed: u64) -> Self {
        AugmentPolicy {
            views,
            brightness: 0.0,
            contrast: [1.0, 1.0],
            blur_sigma: [0.0, 0.0],
            noise_sigma: [0.0, 0.0],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |[lo, hi]: [f64; 2], min: f64| {
            lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi
        };
        if self.views == 0 {
            return Err(FicoError::InvalidArgument(
                "augmentation needs at least one view".into(),
            ));
        }
        if !(self.brightness.is_finite() && (0.0..=1.0).contains(&self.brightness))
            || !range_ok(self.contrast, f64::MIN_POSITIVE)
            || !range_ok(self.blur_sigma, 0.0)
            || !range_ok(self.noise_sigma, 0.0)
        {
            return Err(FicoError::InvalidArgument(format!(
                "invalid augmentation ranges: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Parameters drawn for one view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws the parameters of view `view` of image `image_index`. Depends only on the policy seed
/// and the two indices.
pub fn sample_params(policy: &AugmentPolicy, image_index: u64, view: u64) -> ViewParams {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(policy.seed, &[image_index, view]));
    ViewParams {
        brightness: uniform(&mut rng, [-policy.brightness, policy.brightness]),
        contrast: uniform(&mut rng, policy.contrast),
        blur_sigma: uniform(&mut rng, policy.blur_sigma),
        noise_sigma: uniform(&mut rng, policy.noise_sigma),
        noise_seed: rng.random(),
    }
}

/// Applies contrast, brightness, blur and noise in that order, then clips to `[0, 1]`.
/// Returns the input unchanged when every parameter is neutral.
pub fn apply_view(image: &Tensor<f32>, p: &ViewParams) -> Result<Tensor<f32>> {
    if p.brightness == 0.0 && p.contrast == 1.0 && p.blur_sigma == 0.0 && p.noise_sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut x = image.clone();
    if p.contrast != 1.0 {
        x = scale_contrast(&x, p.contrast as f32)?;
    }
    if p.brightness != 0.0 {
        x = shift_brightness(&x, p.brightness as f32);
    }
    if p.blur_sigma > 0.0 {
        x = convolve_reflect(&x, &gaussian_kernel(p.blur_sigma)?)?;
    }
    if p.noise_sigma > 0.0 {
        x = add_noise(&x, p.noise_sigma as f32, p.noise_seed);
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}

/// The `N` augmented views of one image.
pub fn make_views(
    image: &Tensor<f32>,
    policy: &AugmentPolicy,
    image_index: u64,
) -> Result<Vec<Tensor<f32>>> {
    policy.validate()?;
    (0..policy.views as u64)
        .map(|v| apply_view(image, &sample_params(policy, image_index, v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor<f32> {
        Tensor::from_fn(&[3, 8, 8], |i| ((i * 7919) % 101) as f32 / 100.0)
    }

    #[test]
    fn views_are_reproducible_and_distinct() {
        let p = AugmentPolicy {
            seed: 4,
            ..Default::default()
        };
        let a = make_views(&image(), &p, 3).unwrap();
        let b = make_views(&image(), &p, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
        assert!(a.iter().all(|v| *v != image()));
        assert_ne!(a, make_views(&image(), &p, 4).unwrap());
    }

    #[test]
    fn neutral_policy_returns_the_original() {
        let views = make_views(&image(), &AugmentPolicy::neutral(3, 1), 0).unwrap();
        assert!(views.iter().all(|v| *v == image()));
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let p = AugmentPolicy::default();
        for i in 0..500 {
            for v in 0..2 {
                let s = sample_params(&p, i, v);
                assert!(s.brightness.abs() <= p.brightness);
                assert!((p.contrast[0]..=p.contrast[1]).contains(&s.contrast));
                assert!((p.blur_sigma[0]..=p.blur_sigma[1]).contains(&s.blur_sigma));
                assert!((p.noise_sigma[0]..=p.noise_sigma[1]).contains(&s.noise_sigma));
            }
        }
    }

    #[test]
    fn zero_views_is_rejected() {
        assert!(make_views(&image(), &AugmentPolicy::neutral(0, 0), 0).is_err());
    }
}
