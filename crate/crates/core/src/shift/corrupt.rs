//! The four out-of-distribution corruption families and their severity tables.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FicoError, Result};
use crate::tensor::Tensor;

/// Bumped whenever a severity table changes, so corrupted datasets can be traced to the table
/// that produced them.
pub const SEVERITY_TABLE_VERSION: u32 = 1;

pub const BRIGHTNESS_TABLE: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const CONTRAST_TABLE: [f64; 5] = [0.4, 0.3, 0.2, 0.1, 0.05];
pub const DEFOCUS_TABLE: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
pub const NOISE_TABLE: [f64; 5] = [0.08, 0.12, 0.18, 0.26, 0.38];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Brightness,
    Contrast,
    DefocusBlur,
    GaussianNoise,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::DefocusBlur,
        CorruptionKind::GaussianNoise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::GaussianNoise => "gaussian_noise",
        }
    }

    /// Two-letter column label used in result tables.
    pub fn short(self) -> &'static str {
        match self {
            CorruptionKind::Brightness => "Br",
            CorruptionKind::Contrast => "Co",
            CorruptionKind::DefocusBlur => "Bl",
            CorruptionKind::GaussianNoise => "No",
        }
    }

    /// Parameter value that leaves an image unchanged.
    pub fn neutral(self) -> f64 {
        match self {
            CorruptionKind::Contrast => 1.0,
            _ => 0.0,
        }
    }

    /// Parameters of severities 1 to 5.
    pub fn table(self) -> &'static [f64; 5] {
        match self {
            CorruptionKind::Brightness => &BRIGHTNESS_TABLE,
            CorruptionKind::Contrast => &CONTRAST_TABLE,
            CorruptionKind::DefocusBlur => &DEFOCUS_TABLE,
            CorruptionKind::GaussianNoise => &NOISE_TABLE,
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorruptionKind {
    type Err = FicoError;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace('-', "_");
        CorruptionKind::ALL
            .into_iter()
            .find(|c| {
                c.as_str() == k
                    || c.short().eq_ignore_ascii_case(&k)
                    || (k == "blur" && *c == CorruptionKind::DefocusBlur)
                    || (k == "noise" && *c == CorruptionKind::GaussianNoise)
            })
            .ok_or_else(|| FicoError::InvalidArgument(format!("unknown corruption kind `{s}`")))
    }
}

/// One corruption with its parameter: `delta` for brightness, `c` for contrast, disk radius in
/// pixels for defocus blur, `sigma` for gaussian noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub param: f64,
    /// Severity level the parameter came from, if any. `0` is the neutral level.
    #[serde(default)]
    pub severity: Option<u8>,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, param: f64) -> Result<Self> {
        let spec = CorruptionSpec {
            kind,
            param,
            severity: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Looks the parameter up in the severity table; level `0` gives the neutral parameter.
    pub fn at_severity(kind: CorruptionKind, level: u8) -> Result<Self> {
        let param = match level {
            0 => kind.neutral(),
            1..=5 => kind.table()[level as usize - 1],
            _ => {
                return Err(FicoError::InvalidArgument(format!(
                    "severity {level} outside 0..=5"
                )))
            }
        };
        Ok(CorruptionSpec {
            kind,
            param,
            severity: Some(level),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.param;
        let ok = p.is_finite()
            && match self.kind {
                CorruptionKind::Brightness => (0.0..=1.0).contains(&p),
                CorruptionKind::Contrast => p > 0.0,
                CorruptionKind::DefocusBlur | CorruptionKind::GaussianNoise => p >= 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(FicoError::InvalidArgument(format!(
                "invalid {} parameter {p}",
                self.kind
            )))
        }
    }

    pub fn is_neutral(&self) -> bool {
        self.param == self.kind.neutral()
    }
}

fn check_image(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(shape_err!("expected CxHxW image, got {:?}", image.shape())),
    }
}

/// Applies a corruption. The noise stream is seeded by `seed` alone, so callers derive one seed
/// per image (see [`super::stream_seed`]). Neutral specs return the input unchanged.
pub fn corrupt(image: &Tensor<f32>, spec: &CorruptionSpec, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    check_image(image)?;
    if spec.is_neutral() {
        return Ok(image.clone());
    }
    let out = match spec.kind {
        CorruptionKind::Brightness => shift_brightness(image, spec.param as f32),
        CorruptionKind::Contrast => scale_contrast(image, spec.param as f32)?,
        CorruptionKind::DefocusBlur => convolve_reflect(image, &disk_kernel(spec.param)?)?,
        CorruptionKind::GaussianNoise => add_noise(image, spec.param as f32, seed),
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

pub(crate) fn shift_brightness(image: &Tensor<f32>, delta: f32) -> Tensor<f32> {
    image.map(|v| v + delta)
}

/// `(x - mean_c) * c + mean_c` with one mean per channel.
pub(crate) fn scale_contrast(image: &Tensor<f32>, c: f32) -> Result<Tensor<f32>> {
    let (ch, h, w) = check_image(image)?;
    let plane = h * w;
    let mut out = image.clone();
    for k in 0..ch {
        let px = &mut out.data_mut()[k * plane..(k + 1) * plane];
        let mean = (px.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
        for v in px {
            *v = (*v - mean) * c + mean;
        }
    }
    Ok(out)
}

pub(crate) fn add_noise(image: &Tensor<f32>, sigma: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        let z: f32 = StandardNormal.sample(&mut rng);
        *v += sigma * z;
    }
    out
}

/// Square odd-sized convolution kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub radius: usize,
    pub weights: Vec<f32>,
}

impl Kernel {
    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }
}

/// Normalized disk of the given radius: every offset within `radius` of the centre gets the same
/// weight.
pub fn disk_kernel(radius: f64) -> Result<Kernel> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(FicoError::InvalidArgument(format!("disk radius {radius}")));
    }
    let r = radius.floor() as usize;
    let n = 2 * r + 1;
    let inside: Vec<bool> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - r as f64, (i % n) as f64 - r as f64);
            x * x + y * y <= radius * radius + 1e-9
        })
        .collect();
    let count = inside.iter().filter(|&&b| b).count() as f64;
    Ok(Kernel {
        radius: r,
        weights: inside
            .iter()
            .map(|&b| if b { (1.0 / count) as f32 } else { 0.0 })
            .collect(),
    })
}

/// Normalized isotropic gaussian truncated at three standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Result<Kernel> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(FicoError::InvalidArgument(format!(
            "gaussian sigma {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(Kernel {
            radius: 0,
            weights: vec![1.0],
        });
    }
    let r = (3.0 * sigma).ceil() as usize;
    let n = 2 * r + 1;
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - r as f64, (i % n) as f64 - r as f64);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(Kernel {
        radius: r,
        weights: raw.iter().map(|v| (v / total) as f32).collect(),
    })
}

/// Mirror index without repeating the edge (`d c b | a b c d | c b a`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Per-channel 2-D convolution with reflect padding.
pub fn convolve_reflect(image: &Tensor<f32>, kernel: &Kernel) -> Result<Tensor<f32>> {
    let (ch, h, w) = check_image(image)?;
    let (r, n) = (kernel.radius as isize, kernel.size());
    let src = image.data();
    let mut out = Tensor::zeros(image.shape());
    let dst = out.data_mut();
    for c in 0..ch {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for ky in 0..n {
                    let sy = reflect(y as isize + ky as isize - r, h);
                    for kx in 0..n {
                        let wgt = kernel.weights[ky * n + kx];
                        if wgt != 0.0 {
                            let sx = reflect(x as isize + kx as isize - r, w);
                            acc += wgt as f64 * plane[sy * w + sx] as f64;
                        }
                    }
                }
                dst[c * h * w + y * w + x] = acc as f32;
            }
        }
    }
    Ok(out)
}
