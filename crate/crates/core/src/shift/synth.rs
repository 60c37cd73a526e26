//! Procedural texture dataset: per-category normal images, test anomalies with masks and an
//! auxiliary texture-classification set for teacher pretraining.
//!
//! Layout under the root directory:
//! `<category>/train/good/*.png`, `<category>/test/good/*.png`,
//! `<category>/test/<defect>/*.png`, `<category>/ground_truth/<defect>/*_mask.png`,
//! `aux/<texture>/*.png` and `manifest.json`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stream_seed;
use crate::error::{FicoError, Result};
use crate::io::{
    encode_gray, encode_rgb, sha256_hex, write_atomic, write_dir_atomic, write_json_atomic,
};
use crate::tensor::Tensor;

pub const AUX_DIR: &str = "aux";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Stripes,
    Checker,
    Blobs,
    NoiseCloth,
}

impl Texture {
    pub const ALL: [Texture; 4] = [
        Texture::Stripes,
        Texture::Checker,
        Texture::Blobs,
        Texture::NoiseCloth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
            Texture::Blobs => "blobs",
            Texture::NoiseCloth => "noise_cloth",
        }
    }

    pub fn index(self) -> usize {
        Texture::ALL
            .iter()
            .position(|&t| t == self)
            .expect("listed")
    }
}

impl fmt::Display for Texture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Texture {
    type Err = FicoError;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace('-', "_");
        Texture::ALL
            .into_iter()
            .find(|t| t.as_str() == k)
            .ok_or_else(|| FicoError::InvalidArgument(format!("unknown texture `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injector {
    ContrastPatch,
    Scratch,
    Occlusion,
}

impl Injector {
    pub const ALL: [Injector; 3] = [
        Injector::ContrastPatch,
        Injector::Scratch,
        Injector::Occlusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Injector::ContrastPatch => "contrast_patch",
            Injector::Scratch => "scratch",
            Injector::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for Injector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What to generate. Anomalous test images cycle through `injectors`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub categories: Vec<Texture>,
    pub injectors: Vec<Injector>,
    pub train: usize,
    pub test_good: usize,
    pub test_anomalous: usize,
    /// Images per texture family in the auxiliary set.
    pub aux_per_class: usize,
    pub image_size: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            categories: vec![Texture::Stripes, Texture::Checker, Texture::NoiseCloth],
            injectors: Injector::ALL.to_vec(),
            train: 100,
            test_good: 50,
            test_anomalous: 50,
            aux_per_class: 96,
            image_size: 64,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("categories", self.categories.len()),
            ("injectors", self.injectors.len()),
            ("train", self.train),
            ("test_good", self.test_good),
            ("test_anomalous", self.test_anomalous),
            ("aux_per_class", self.aux_per_class),
        ]
        .into_iter()
        .find(|(_, n)| *n == 0);
        if let Some((name, _)) = zero {
            return Err(FicoError::InvalidArgument(format!(
                "synthetic dataset: `{name}` must be non-zero"
            )));
        }
        if self.image_size < 16 {
            return Err(FicoError::InvalidArgument(format!(
                "image size {} is too small",
                self.image_size
            )));
        }
        let mut seen = self.categories.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.categories.len() {
            return Err(FicoError::InvalidArgument("duplicate category".into()));
        }
        Ok(())
    }
}

/// Colours and geometry shared by every image of one category.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    pub texture: Texture,
    pub a: [f64; 3],
    pub b: [f64; 3],
    /// Stripe angle (radians).
    pub angle: f64,
    /// Stripe or weave period / checker cell size, in pixels.
    pub period: f64,
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

impl Style {
    pub fn random(texture: Texture, rng: &mut ChaCha8Rng) -> Self {
        let a = color(rng);
        let mut b = color(rng);
        // Keep the two colours clearly apart so the pattern is visible.
        while (0..3).map(|i| (a[i] - b[i]).abs()).sum::<f64>() < 0.6 {
            b = color(rng);
        }
        Style {
            texture,
            a,
            b,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            period: rng.random_range(6.0..11.0),
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Renders one normal image of the given style with per-image jitter.
pub fn render(style: &Style, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = size;
    let mut px = vec![[0.0f64; 3]; s * s];
    match style.texture {
        Texture::Stripes => {
            let th = style.angle + 0.04 * rng.sample::<f64, _>(StandardNormal);
            let p = style.period * rng.random_range(0.97..1.03);
            let phase = rng.random_range(0.0..TAU);
            for (i, v) in px.iter_mut().enumerate() {
                let (y, x) = ((i / s) as f64, (i % s) as f64);
                let t = 0.5 + 0.5 * (TAU * (x * th.cos() + y * th.sin()) / p + phase).sin();
                *v = mix(style.a, style.b, t);
            }
        }
        Texture::Checker => {
            let cell = style.period * rng.random_range(0.97..1.03);
            let (ox, oy) = (
                rng.random_range(0.0..2.0 * cell),
                rng.random_range(0.0..2.0 * cell),
            );
            // 4x4 supersampling keeps the edges from aliasing differently in every image.
            const SUB: usize = 4;
            for (i, v) in px.iter_mut().enumerate() {
                let (y, x) = ((i / s) as f64, (i % s) as f64);
                let mut odd = 0;
                for j in 0..SUB * SUB {
                    let sx = x + ((j % SUB) as f64 + 0.5) / SUB as f64;
                    let sy = y + ((j / SUB) as f64 + 0.5) / SUB as f64;
                    odd += (((sx + ox) / cell).floor() + ((sy + oy) / cell).floor()) as i64 & 1;
                }
                *v = mix(style.a, style.b, odd as f64 / (SUB * SUB) as f64);
            }
        }
        Texture::Blobs => {
            let n = rng.random_range(10..15);
            let blobs: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.0..s as f64),
                        rng.random_range(0.0..s as f64),
                        rng.random_range(0.45..0.75) * style.period,
                    )
                })
                .collect();
            for (i, v) in px.iter_mut().enumerate() {
                let (y, x) = ((i / s) as f64, (i % s) as f64);
                let t: f64 = blobs
                    .iter()
                    .map(|&(cx, cy, r)| {
                        (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * r * r)).exp()
                    })
                    .sum();
                *v = mix(style.a, style.b, t.min(1.0));
            }
        }
        Texture::NoiseCloth => {
            let p = style.period * rng.random_range(0.97..1.03);
            let (px0, py0) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            let grain = smooth_noise(s, 1.2, rng);
            for (i, v) in px.iter_mut().enumerate() {
                let (y, x) = ((i / s) as f64, (i % s) as f64);
                let weave = 0.5
                    + 0.22 * (TAU * x / p + px0).sin() * (TAU * y / p + py0).cos()
                    + 0.22 * (TAU * (x + y) / (2.0 * p)).sin();
                *v = mix(style.a, style.b, (weave + 0.35 * grain[i]).clamp(0.0, 1.0));
            }
        }
    }
    let mut out = Tensor::zeros(&[3, s, s]);
    let d = out.data_mut();
    for (i, v) in px.iter().enumerate() {
        for c in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            d[c * s * s + i] = (v[c] + 0.015 * n).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

/// Zero-mean, unit-peak gaussian-smoothed white noise.
fn smooth_noise(s: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..s * s).map(|_| rng.sample(StandardNormal)).collect();
    let r = (3.0 * sigma).ceil() as isize;
    let mut out = vec![0.0; s * s];
    for y in 0..s as isize {
        for x in 0..s as isize {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                    let (sy, sx) = (
                        (y + dy).rem_euclid(s as isize),
                        (x + dx).rem_euclid(s as isize),
                    );
                    acc += w * white[(sy * s as isize + sx) as usize];
                    wsum += w;
                }
            }
            out[(y * s as isize + x) as usize] = acc / wsum;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    out.iter().map(|v| v / peak).collect()
}

/// Inserts a defect into `image` in place and returns its binary mask (row-major `H x W`).
pub fn inject(image: &mut Tensor<f32>, injector: Injector, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let mut mask = vec![false; plane];
    let d = image.data_mut();
    match injector {
        Injector::ContrastPatch => {
            let (ph, pw) = (
                rng.random_range(h / 6..h / 3),
                rng.random_range(w / 6..w / 3),
            );
            let (y0, x0) = (rng.random_range(0..h - ph), rng.random_range(0..w - pw));
            let flatten = rng.random_bool(0.5);
            let shift = if rng.random_bool(0.5) { 0.25 } else { -0.25 };
            for c in 0..3 {
                let mut sum = 0.0f64;
                for y in y0..y0 + ph {
                    for x in x0..x0 + pw {
                        sum += d[c * plane + y * w + x] as f64;
                    }
                }
                let mean = (sum / (ph * pw) as f64) as f32;
                let k = if flatten { 0.15 } else { 2.5 };
                for y in y0..y0 + ph {
                    for x in x0..x0 + pw {
                        let v = &mut d[c * plane + y * w + x];
                        *v = ((*v - mean) * k + mean + shift).clamp(0.0, 1.0);
                    }
                }
            }
            for y in y0..y0 + ph {
                mask[y * w + x0..y * w + x0 + pw].fill(true);
            }
        }
        Injector::Scratch => {
            let (y0, x0) = (
                rng.random_range(0.2..0.8) * h as f64,
                rng.random_range(0.2..0.8) * w as f64,
            );
            let th = rng.random_range(0.0..TAU);
            let len = rng.random_range(0.3..0.55) * h.min(w) as f64;
            let (y1, x1) = (
                (y0 + len * th.sin()).clamp(0.0, h as f64 - 1.0),
                (x0 + len * th.cos()).clamp(0.0, w as f64 - 1.0),
            );
            let thick = rng.random_range(1.0..1.8);
            let ink = if rng.random_bool(0.5) { 0.97f32 } else { 0.03 };
            for y in 0..h {
                for x in 0..w {
                    if segment_distance((y as f64, x as f64), (y0, x0), (y1, x1)) <= thick {
                        mask[y * w + x] = true;
                        for c in 0..3 {
                            d[c * plane + y * w + x] = ink;
                        }
                    }
                }
            }
        }
        Injector::Occlusion => {
            let (ry, rx) = (
                rng.random_range(0.08..0.15) * h as f64,
                rng.random_range(0.08..0.15) * w as f64,
            );
            let (cy, cx) = (
                rng.random_range(ry..h as f64 - ry),
                rng.random_range(rx..w as f64 - rx),
            );
            let fill = color(rng);
            for y in 0..h {
                for x in 0..w {
                    if ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0 {
                        mask[y * w + x] = true;
                        for (c, f) in fill.iter().enumerate() {
                            let n: f64 = rng.sample(StandardNormal);
                            d[c * plane + y * w + x] = (f + 0.02 * n).clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
        }
    }
    mask
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dy).powi(2) + (p.1 - a.1 - t * dx).powi(2)).sqrt()
}

/// What [`synth_dataset`] wrote, with a digest per file (paths relative to the root).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub files: BTreeMap<String, String>,
}

const TAG_STYLE: u64 = 1;
const TAG_TRAIN: u64 = 2;
const TAG_TEST_GOOD: u64 = 3;
const TAG_TEST_BAD: u64 = 4;
const TAG_AUX: u64 = 5;

/// Writes the dataset to `root` (replacing it) and returns the manifest, also stored as
/// `root/manifest.json`.
pub fn synth_dataset(root: &Path, seed: u64, spec: &SynthSpec) -> Result<SynthManifest> {
    spec.validate()?;
    let s = spec.image_size;
    let mut files = BTreeMap::new();
    write_dir_atomic(root, |dir| {
        let mut put = |rel: String, bytes: Vec<u8>| -> Result<()> {
            write_atomic(&dir.join(&rel), &bytes)?;
            files.insert(rel, sha256_hex(&bytes));
            Ok(())
        };
        for &tex in &spec.categories {
            let ci = tex.index() as u64;
            let style = Style::random(
                tex,
                &mut ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_STYLE, ci])),
            );
            let cat = tex.as_str();
            for i in 0..spec.train {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_TRAIN, ci, i as u64]));
                put(
                    format!("{cat}/train/good/{i:03}.png"),
                    encode_rgb(&render(&style, s, &mut rng))?,
                )?;
            }
            for i in 0..spec.test_good {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_TEST_GOOD, ci, i as u64]));
                put(
                    format!("{cat}/test/good/{i:03}.png"),
                    encode_rgb(&render(&style, s, &mut rng))?,
                )?;
            }
            for i in 0..spec.test_anomalous {
                let inj = spec.injectors[i % spec.injectors.len()];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_TEST_BAD, ci, i as u64]));
                let mut img = render(&style, s, &mut rng);
                let mask = inject(&mut img, inj, &mut rng);
                let values: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
                put(format!("{cat}/test/{inj}/{i:03}.png"), encode_rgb(&img)?)?;
                put(
                    format!("{cat}/ground_truth/{inj}/{i:03}_mask.png"),
                    encode_gray(&values, s, s)?,
                )?;
            }
        }
        for tex in Texture::ALL {
            let ci = tex.index() as u64;
            for i in 0..spec.aux_per_class {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(stream_seed(seed, &[TAG_AUX, ci, i as u64]));
                let style = Style::random(tex, &mut rng);
                put(
                    format!("{AUX_DIR}/{tex}/{i:03}.png"),
                    encode_rgb(&render(&style, s, &mut rng))?,
                )?;
            }
        }
        let manifest = SynthManifest {
            seed,
            spec: spec.clone(),
            files: files.clone(),
        };
        write_json_atomic(&dir.join("manifest.json"), &manifest)
    })?;
    Ok(SynthManifest {
        seed,
        spec: spec.clone(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{list_png, read_mask};

    fn small() -> SynthSpec {
        SynthSpec {
            categories: vec![Texture::Checker, Texture::Blobs],
            train: 4,
            test_good: 3,
            test_anomalous: 5,
            aux_per_class: 2,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn layout_counts_and_masks() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let m = synth_dataset(&root, 0, &small()).unwrap();
        assert_eq!(list_png(&root.join("checker/train/good")).unwrap().len(), 4);
        assert_eq!(list_png(&root.join("blobs/test/good")).unwrap().len(), 3);
        let defects: usize = Injector::ALL
            .iter()
            .map(|i| {
                list_png(&root.join("checker/test").join(i.as_str()))
                    .map(|v| v.len())
                    .unwrap_or(0)
            })
            .sum();
        assert_eq!(defects, 5);
        for inj in Injector::ALL {
            for p in list_png(&root.join("blobs/ground_truth").join(inj.as_str())).unwrap() {
                assert!(
                    read_mask(&p).unwrap().0.iter().any(|&b| b),
                    "{}",
                    p.display()
                );
            }
        }
        assert_eq!(list_png(&root.join("aux/noise_cloth")).unwrap().len(), 2);
        // 2 categories x (4 + 3 + 5 images + 5 masks) + 4 x 2 aux
        assert_eq!(m.files.len(), 2 * 17 + 8);
    }

    #[test]
    fn same_seed_same_digests() {
        let dir = tempfile::tempdir().unwrap();
        let a = synth_dataset(&dir.path().join("a"), 7, &small()).unwrap();
        let b = synth_dataset(&dir.path().join("b"), 7, &small()).unwrap();
        let c = synth_dataset(&dir.path().join("c"), 8, &small()).unwrap();
        assert_eq!(a.files, b.files);
        assert_ne!(a.files, c.files);
    }

    #[test]
    fn zero_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            train: 0,
            ..small()
        };
        assert!(synth_dataset(&dir.path().join("x"), 0, &spec).is_err());
    }

    #[test]
    fn every_injector_marks_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for tex in Texture::ALL {
            let style = Style::random(tex, &mut rng);
            for inj in Injector::ALL {
                for _ in 0..20 {
                    let mut img = render(&style, 64, &mut rng);
                    let before = img.clone();
                    let mask = inject(&mut img, inj, &mut rng);
                    assert!(mask.iter().any(|&m| m));
                    // Pixels outside the mask are untouched.
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            for c in 0..3 {
                                assert_eq!(img.data()[c * 4096 + i], before.data()[c * 4096 + i]);
                            }
                        }
                    }
                }
            }
        }
    }
}
