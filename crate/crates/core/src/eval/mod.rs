//! Anomaly maps, image scores and AUROC.

mod report;

pub use report::{
    histogram, write_heatmap, write_report, Histogram, Report, ScenarioScores, AVERAGE_ROW,
    AVG_COLUMN,
};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FicoError, Result};
use crate::model::FeaturePyramid;

/// Per-pixel anomaly values at input resolution for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap {
    pub h: usize,
    pub w: usize,
    /// Row-major, `h * w` values.
    pub values: Vec<f32>,
    /// Mean contribution of each pyramid level before smoothing.
    pub level_means: Vec<f64>,
}

impl AnomalyMap {
    pub fn max(&self) -> f32 {
        self.values
            .iter()
            .copied()
            .fold(f32::NEG_INFINITY, f32::max)
    }
}

/// `1 - cos` between the channel vectors at every location of two `[B, C, H, W]` maps, for
/// sample `s`. Same guarded denominator as the training losses.
pub fn cosine_distance_map(a: &[f32], b: &[f32], c: usize, hw: usize) -> Vec<f64> {
    (0..hw)
        .map(|p| {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for k in 0..c {
                let (x, y) = (a[k * hw + p] as f64, b[k * hw + p] as f64);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            1.0 - (dot / (na * nb).sqrt().max(1e-8)).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (`align_corners = false`), edges clamped.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let x = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, x - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Separable gaussian smoothing with reflect padding. `sigma = 0` is the identity.
pub fn gaussian_smooth(values: &[f64], h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(FicoError::InvalidArgument(format!(
            "smoothing sigma {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(values.to_vec());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let k: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let reflect = crate::shift::reflect;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * values[y * w + reflect(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[reflect(y as isize + d, h) * w + x])
                .sum();
        }
    }
    Ok(out)
}

/// One anomaly map per sample: per level `1 - cos`, bilinear upsampling to `out_h x out_w`,
/// sum over levels, then gaussian smoothing with `sigma` pixels.
pub fn anomaly_map(
    teacher: &FeaturePyramid<f32>,
    student: &FeaturePyramid<f32>,
    out_h: usize,
    out_w: usize,
    sigma: f64,
) -> Result<Vec<AnomalyMap>> {
    teacher.check_paired(student)?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("anomaly map size {}x{}", out_h, out_w));
    }
    let b = teacher.batch();
    let mut maps = Vec::with_capacity(b);
    for s in 0..b {
        let mut total = vec![0.0f64; out_h * out_w];
        let mut level_means = Vec::with_capacity(teacher.len());
        for (t, f) in teacher.levels().iter().zip(student.levels()) {
            let (_, c, h, w) = t.dims4()?;
            let n = c * h * w;
            let d = cosine_distance_map(
                &t.data()[s * n..(s + 1) * n],
                &f.data()[s * n..(s + 1) * n],
                c,
                h * w,
            );
            let up = if (h, w) == (out_h, out_w) {
                d
            } else {
                resize_bilinear(&d, h, w, out_h, out_w)
            };
            level_means.push(up.iter().sum::<f64>() / up.len() as f64);
            for (acc, v) in total.iter_mut().zip(&up) {
                *acc += v;
            }
        }
        let smoothed = gaussian_smooth(&total, out_h, out_w, sigma)?;
        let values: Vec<f32> = smoothed.iter().map(|&v| v as f32).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FicoError::NonFinite(format!("anomaly map of sample {s}")));
        }
        maps.push(AnomalyMap {
            h: out_h,
            w: out_w,
            values,
            level_means,
        });
    }
    Ok(maps)
}

/// How a map is reduced to one image score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "k")]
pub enum ScoreRule {
    #[default]
    Max,
    /// Mean of the `k` largest pixels.
    TopKMean(usize),
}

pub fn image_score(map: &AnomalyMap, rule: ScoreRule) -> Result<f64> {
    if map.values.is_empty() {
        return Err(FicoError::InvalidArgument("empty anomaly map".into()));
    }
    match rule {
        ScoreRule::Max => Ok(map.max() as f64),
        ScoreRule::TopKMean(k) => {
            if k == 0 {
                return Err(FicoError::InvalidArgument(
                    "top-k score needs k >= 1".into(),
                ));
            }
            let mut v = map.values.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            let k = k.min(v.len());
            Ok(v[..k].iter().map(|&x| x as f64).sum::<f64>() / k as f64)
        }
    }
}

/// One scored test image. Label `0` is normal, `1` anomalous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub score: f64,
    pub label: u8,
    pub scenario: String,
}

/// Area under the ROC curve as the Mann-Whitney statistic with ties counted one half.
///
/// Computed from tie-averaged ranks in integer arithmetic, so the only rounding is the final
/// division.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    auroc_scores(
        &samples.iter().map(|s| s.score).collect::<Vec<_>>(),
        &samples.iter().map(|s| s.label).collect::<Vec<_>>(),
    )
}

pub fn auroc_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(shape_err!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(FicoError::InvalidArgument(format!(
            "label {l} is neither 0 nor 1"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(FicoError::NonFinite("anomaly scores".into()));
    }
    let n1 = labels.iter().filter(|&&l| l == 1).count() as u128;
    let n0 = labels.len() as u128 - n1;
    if n0 == 0 || n1 == 0 {
        return Err(FicoError::UndefinedMetric(format!(
            "AUROC needs both classes, got {n0} normal and {n1} anomalous"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Twice the rank sum of the anomalous samples; a tie group spanning ranks i+1..=j gets
    // rank (i + 1 + j) / 2 each.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += pos * (i as u128 + 1 + j as u128);
        i = j;
    }
    let twice_u = twice_rank_sum - n1 * (n1 + 1);
    Ok(twice_u as f64 / (2 * n0 * n1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pyramid(levels: &[(usize, usize)], b: usize, seed: u64) -> FeaturePyramid<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeaturePyramid::new(
            levels
                .iter()
                .map(|&(c, s)| Tensor::from_fn(&[b, c, s, s], |_| rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut twice = 0u128;
        let (mut n0, mut n1) = (0u128, 0u128);
        for (i, &a) in scores.iter().enumerate() {
            if labels[i] == 1 {
                n1 += 1;
                for (j, &b) in scores.iter().enumerate() {
                    if labels[j] == 0 {
                        twice += if a > b {
                            2
                        } else if a == b {
                            1
                        } else {
                            0
                        };
                    }
                }
            } else {
                n0 += 1;
            }
        }
        twice as f64 / (2 * n0 * n1) as f64
    }

    #[test]
    fn identical_pyramids_give_zero_map() {
        let p = pyramid(&[(4, 8), (8, 4)], 2, 0);
        let maps = anomaly_map(&p, &p, 32, 32, 4.0).unwrap();
        assert!(maps
            .iter()
            .all(|m| m.values.iter().all(|&v| v.abs() < 1e-6)));
    }

    #[test]
    fn single_orthogonal_location() {
        let t = Tensor::from_fn(&[1, 2, 3, 3], |i| if i < 9 { 1.0 } else { 0.0 });
        let mut s = t.clone();
        s.data_mut()[4] = 0.0;
        s.data_mut()[9 + 4] = 1.0;
        let maps = anomaly_map(
            &FeaturePyramid::new(vec![t]).unwrap(),
            &FeaturePyramid::new(vec![s]).unwrap(),
            3,
            3,
            0.0,
        )
        .unwrap();
        let want: Vec<f32> = (0..9).map(|i| if i == 4 { 1.0 } else { 0.0 }).collect();
        assert_eq!(maps[0].values, want);
    }

    #[test]
    fn map_matches_per_pixel_loop() {
        let t = pyramid(&[(3, 4), (6, 2)], 2, 1);
        let f = pyramid(&[(3, 4), (6, 2)], 2, 2);
        let maps = anomaly_map(&t, &f, 16, 16, 0.0).unwrap();
        assert_eq!(maps.len(), 2);
        for (s, map) in maps.iter().enumerate() {
            for oy in 0..16 {
                for ox in 0..16 {
                    let mut want = 0.0f64;
                    for (lt, lf) in t.levels().iter().zip(f.levels()) {
                        let (_, c, h, w) = lt.dims4().unwrap();
                        let at = |y: usize, x: usize| {
                            let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
                            for k in 0..c {
                                let i = ((s * c + k) * h + y) * w + x;
                                let (a, b) = (lt.data()[i] as f64, lf.data()[i] as f64);
                                d += a * b;
                                na += a * a;
                                nb += b * b;
                            }
                            1.0 - d / (na.sqrt() * nb.sqrt())
                        };
                        let sy = ((oy as f64 + 0.5) * h as f64 / 16.0 - 0.5).max(0.0);
                        let sx = ((ox as f64 + 0.5) * w as f64 / 16.0 - 0.5).max(0.0);
                        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                        want += (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    }
                    let got = map.values[oy * 16 + ox] as f64;
                    assert!((got - want).abs() < 1e-6, "{s} {oy} {ox}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn map_values_bounded_by_twice_levels() {
        let t = pyramid(&[(4, 8), (8, 4), (16, 2)], 1, 3);
        let f = pyramid(&[(4, 8), (8, 4), (16, 2)], 1, 4);
        let m = &anomaly_map(&t, &f, 32, 32, 4.0).unwrap()[0];
        assert!(m.values.iter().all(|&v| (0.0..=6.0).contains(&v)));
        assert_eq!(m.level_means.len(), 3);
    }

    #[test]
    fn smoothing_never_raises_the_maximum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v: Vec<f64> = (0..20 * 17).map(|_| rng.random_range(0.0..2.0)).collect();
            let max = v.iter().cloned().fold(f64::MIN, f64::max);
            let s = gaussian_smooth(&v, 20, 17, rng.random_range(0.3..5.0)).unwrap();
            assert!(s.iter().all(|&x| x <= max));
            assert_eq!(gaussian_smooth(&v, 20, 17, 0.0).unwrap(), v);
        }
    }

    #[test]
    fn score_rules() {
        let map = AnomalyMap {
            h: 1,
            w: 4,
            values: vec![0.1, 0.7, 0.3, 0.5],
            level_means: vec![],
        };
        assert_eq!(image_score(&map, ScoreRule::Max).unwrap(), 0.7f32 as f64);
        assert!((image_score(&map, ScoreRule::TopKMean(2)).unwrap() - 0.6).abs() < 1e-7);
        let empty = AnomalyMap {
            values: vec![],
            ..map
        };
        assert!(image_score(&empty, ScoreRule::Max).is_err());
    }

    #[test]
    fn auroc_small_cases() {
        assert_eq!(auroc_scores(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(auroc_scores(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(auroc_scores(&[0.5; 6], &[0, 1, 0, 1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            auroc_scores(&[0.1, 0.2], &[1, 1]),
            Err(FicoError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.random_range(2..60);
            let scores: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..8) as f64 / 4.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(
                auroc_scores(&scores, &labels).unwrap(),
                brute_auroc(&scores, &labels)
            );
        }
    }
}
