use crate::error::{shape_err, FicoError, Result};
use crate::tensor::{Scalar, Tensor};

/// Multi-scale feature maps, finest level first. Each level is `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Validates the shape law (channels double and spatial sizes halve per level) and finiteness.
    pub fn new(levels: Vec<Tensor<T>>) -> Result<Self> {
        let first = levels.first().ok_or_else(|| shape_err!("empty pyramid"))?;
        let (b, c0, h0, w0) = first.dims4()?;
        for (k, t) in levels.iter().enumerate() {
            let want = (b, c0 << k, h0 >> k, w0 >> k);
            if t.dims4()? != want || (h0 >> k) << k != h0 || (w0 >> k) << k != w0 {
                return Err(shape_err!(
                    "pyramid level {} has shape {:?}, expected {:?}",
                    k,
                    t.shape(),
                    want
                ));
            }
            if !t.all_finite() {
                return Err(FicoError::NonFinite(format!("pyramid level {k}")));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn levels(&self) -> &[Tensor<T>] {
        &self.levels
    }

    pub fn into_levels(self) -> Vec<Tensor<T>> {
        self.levels
    }

    pub fn level(&self, k: usize) -> &Tensor<T> {
        &self.levels[k]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// `(C, H, W)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|t| (t.shape()[1], t.shape()[2], t.shape()[3]))
            .collect()
    }

    pub fn check_paired(&self, other: &FeaturePyramid<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(shape_err!(
                "pyramids with {} and {} levels",
                self.len(),
                other.len()
            ));
        }
        for (k, (a, b)) in self.levels.iter().zip(&other.levels).enumerate() {
            if a.shape() != b.shape() {
                return Err(shape_err!(
                    "level {}: {:?} vs {:?}",
                    k,
                    a.shape(),
                    b.shape()
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_broken_shape_law() {
        let ok = FeaturePyramid::<f32>::new(vec![
            Tensor::zeros(&[1, 4, 8, 8]),
            Tensor::zeros(&[1, 8, 4, 4]),
        ]);
        assert!(ok.is_ok());
        let bad = FeaturePyramid::<f32>::new(vec![
            Tensor::zeros(&[1, 4, 8, 8]),
            Tensor::zeros(&[1, 4, 4, 4]),
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn rejects_non_finite_levels() {
        let mut t = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        t.data_mut()[3] = f32::NAN;
        assert!(matches!(
            FeaturePyramid::new(vec![t]),
            Err(FicoError::NonFinite(_))
        ));
    }
}
