use rand::Rng;

use super::ArchConfig;
use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{ConvBn, Ctx, ParamStore, ResBlock};
use crate::tensor::Scalar;

/// One-class bottleneck embedding: every shallower level is brought to the deepest
/// resolution by stride-2 convolutions, all levels are concatenated, and a residual
/// projection block maps the result back to the deepest level's channel count.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub downsample: Vec<Vec<ConvBn>>,
    pub projection: ResBlock,
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Self {
        let k = arch.levels;
        let downsample = (0..k - 1)
            .map(|level| {
                (level..k - 1)
                    .map(|step| {
                        ConvBn::new(
                            store,
                            &format!("ocbe.level{}.down{}", level + 1, step - level + 1),
                            arch.channels(step),
                            arch.channels(step + 1),
                            3,
                            2,
                            true,
                            rng,
                        )
                    })
                    .collect()
            })
            .collect();
        let deep = arch.channels(k - 1);
        let projection = ResBlock::new(store, "ocbe.proj", k * deep, deep, 1, rng);
        Bottleneck {
            downsample,
            projection,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, pyramid: &[Var]) -> Result<Var> {
        if pyramid.len() != self.downsample.len() + 1 {
            return Err(shape_err!(
                "bottleneck expects {} levels, got {}",
                self.downsample.len() + 1,
                pyramid.len()
            ));
        }
        let mut fused = Vec::with_capacity(pyramid.len());
        for (path, &f) in self.downsample.iter().zip(pyramid) {
            let mut x = f;
            for layer in path {
                x = layer.forward(cx, x)?;
            }
            fused.push(x);
        }
        fused.push(*pyramid.last().expect("non-empty"));
        let cat = cx.tape.concat_channels(&fused)?;
        self.projection.forward(cx, cat)
    }
}
