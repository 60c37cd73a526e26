//! Exact feature-distribution matching at test time.
//!
//! Each channel of the finest teacher level is mapped onto a reference distribution collected
//! from normal training features by sorting: the `i`-th smallest content value is replaced by
//! (a blend with) the `i`-th smallest reference value. Deeper levels are then recomputed from
//! the adapted map.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FicoError, Result};
use crate::model::{FeaturePyramid, Teacher};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Indices that sort `values` ascending; ties keep index order.
pub fn stable_argsort(values: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    idx
}

/// `out[i] = (1 - lambda) * content[i] + lambda * style_sorted[rank(content[i])]`.
pub fn efdm_match(content: &[f32], style_sorted: &[f32], lambda: f32) -> Result<Vec<f32>> {
    if content.len() != style_sorted.len() {
        return Err(shape_err!(
            "efdm: content has {} values, style {}",
            content.len(),
            style_sorted.len()
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FicoError::InvalidArgument(format!(
            "blend ratio {lambda} outside [0, 1]"
        )));
    }
    if style_sorted.windows(2).any(|w| w[0] > w[1]) {
        return Err(FicoError::InvalidArgument(
            "style values must be non-decreasing".into(),
        ));
    }
    if lambda == 0.0 {
        return Ok(content.to_vec());
    }
    let mut out = vec![0.0; content.len()];
    for (rank, i) in stable_argsort(content).into_iter().enumerate() {
        out[i] = if lambda == 1.0 {
            style_sorted[rank]
        } else {
            (1.0 - lambda) * content[i] + lambda * style_sorted[rank]
        };
    }
    Ok(out)
}

/// Sorted reference values per channel of the finest teacher level, and the blend ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleBank {
    pub lambda: f32,
    /// One non-decreasing array per channel.
    pub channels: Vec<Vec<f32>>,
}

impl StyleBank {
    /// Pools every value of every channel across the given `[B, C, H, W]` feature maps.
    pub fn from_features(features: &[&Tensor<f32>], lambda: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(FicoError::InvalidArgument(format!(
                "blend ratio {lambda} outside [0, 1]"
            )));
        }
        let first = features
            .first()
            .ok_or_else(|| FicoError::InvalidArgument("style bank needs features".into()))?;
        let (_, c, _, _) = first.dims4()?;
        let mut channels = vec![Vec::new(); c];
        for f in features {
            let (b, fc, h, w) = f.dims4()?;
            if fc != c {
                return Err(shape_err!("style bank: {fc} channels, expected {c}"));
            }
            for s in 0..b {
                for (k, ch) in channels.iter_mut().enumerate() {
                    let start = (s * c + k) * h * w;
                    ch.extend_from_slice(&f.data()[start..start + h * w]);
                }
            }
        }
        for ch in &mut channels {
            ch.sort_by(f32::total_cmp);
        }
        Ok(StyleBank { lambda, channels })
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty() || self.channels.iter().any(Vec::is_empty)
    }

    /// `n` reference values of channel `k` taken at the mid-point quantiles of the pooled
    /// distribution. Returns the stored array itself when it already has `n` values.
    pub fn reference(&self, k: usize, n: usize) -> Vec<f32> {
        let all = &self.channels[k];
        if all.len() == n {
            return all.clone();
        }
        (0..n)
            .map(|i| all[(((2 * i + 1) * all.len()) / (2 * n)).min(all.len() - 1)])
            .collect()
    }
}

/// Matches the finest level of a teacher pyramid to the bank channel by channel, per sample,
/// and recomputes the deeper levels with the teacher. A zero blend ratio returns the pyramid
/// unchanged.
pub fn tta_adapt(
    teacher: &Teacher,
    store: &ParamStore<f32>,
    pyramid: &FeaturePyramid<f32>,
    bank: &StyleBank,
) -> Result<FeaturePyramid<f32>> {
    if bank.is_empty() {
        return Err(FicoError::InvalidArgument("style bank is empty".into()));
    }
    if bank.lambda == 0.0 {
        return Ok(pyramid.clone());
    }
    let level0 = pyramid.level(0);
    let (b, c, h, w) = level0.dims4()?;
    if c != bank.channels.len() {
        return Err(shape_err!(
            "style bank has {} channels, features {}",
            bank.channels.len(),
            c
        ));
    }
    let refs: Vec<Vec<f32>> = (0..c).map(|k| bank.reference(k, h * w)).collect();
    let mut adapted = level0.clone();
    for s in 0..b {
        for (k, style) in refs.iter().enumerate() {
            let start = (s * c + k) * h * w;
            let m = efdm_match(&level0.data()[start..start + h * w], style, bank.lambda)?;
            adapted.data_mut()[start..start + h * w].copy_from_slice(&m);
        }
    }
    let mut cx = Ctx::new(store, false);
    let x = cx.input(adapted.clone());
    let deeper = teacher.deeper_from(&mut cx, x)?;
    let mut levels = vec![adapted];
    levels.extend(deeper.iter().map(|&v| cx.value(v).clone()));
    FeaturePyramid::new(levels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_transfer_example() {
        assert_eq!(
            efdm_match(&[3.0, 1.0, 2.0], &[10.0, 20.0, 30.0], 1.0).unwrap(),
            vec![30.0, 10.0, 20.0]
        );
    }

    #[test]
    fn zero_blend_and_sorted_content_are_fixed_points() {
        let c = [0.5, -1.0, 2.0, 2.0];
        assert_eq!(
            efdm_match(&c, &[0.0, 1.0, 2.0, 3.0], 0.0).unwrap(),
            c.to_vec()
        );
        let s = [-1.0, 0.5, 2.0, 2.0];
        assert_eq!(efdm_match(&s, &s, 1.0).unwrap(), s.to_vec());
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(
            efdm_match(&[1.0, 1.0, 0.0], &[5.0, 6.0, 7.0], 1.0).unwrap(),
            vec![6.0, 7.0, 5.0]
        );
    }

    #[test]
    fn half_blend() {
        assert_eq!(
            efdm_match(&[2.0, 0.0], &[10.0, 20.0], 0.5).unwrap(),
            vec![11.0, 5.0]
        );
    }

    #[test]
    fn errors() {
        assert!(efdm_match(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(efdm_match(&[1.0, 2.0], &[2.0, 1.0], 1.0).is_err());
        assert!(efdm_match(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn bank_quantiles_are_sorted_and_exact_at_full_length() {
        let f = Tensor::from_fn(&[2, 2, 2, 3], |i| ((i * 13) % 7) as f32);
        let bank = StyleBank::from_features(&[&f], 1.0).unwrap();
        assert_eq!(bank.channels.len(), 2);
        assert_eq!(bank.reference(0, 12), bank.channels[0]);
        let q = bank.reference(1, 5);
        assert!(q.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(q.len(), 5);
    }
}
