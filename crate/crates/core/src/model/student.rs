use rand::Rng;

use super::ArchConfig;
use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, ParamStore, ResBlock};
use crate::tensor::Scalar;

/// Decoder mirroring the teacher: the deepest stage refines the embedding in place, every
/// shallower stage upsamples (nearest, x2) and applies a residual block that halves channels.
#[derive(Clone, Debug)]
pub struct Student {
    /// `stages[k]` produces level `k`.
    pub stages: Vec<ResBlock>,
    deep_channels: usize,
}

impl Student {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        arch: &ArchConfig,
        rng: &mut R,
    ) -> Self {
        let k = arch.levels;
        let mut stages: Vec<ResBlock> = Vec::with_capacity(k);
        // Build deepest first so parameter order follows data flow.
        for level in (0..k).rev() {
            let cin = if level == k - 1 {
                arch.channels(k - 1)
            } else {
                arch.channels(level + 1)
            };
            stages.push(ResBlock::new(
                store,
                &format!("student.stage{}", level + 1),
                cin,
                arch.channels(level),
                1,
                rng,
            ));
        }
        stages.reverse();
        Student {
            stages,
            deep_channels: arch.channels(k - 1),
        }
    }

    /// Returns student levels finest first.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<T>, embedding: Var) -> Result<Vec<Var>> {
        let (_, c, _, _) = cx.value(embedding).dims4()?;
        if c != self.deep_channels {
            return Err(shape_err!(
                "decode: embedding has {} channels, expected {}",
                c,
                self.deep_channels
            ));
        }
        let k = self.stages.len();
        let mut out = vec![embedding; k];
        let mut x = self.stages[k - 1].forward(cx, embedding)?;
        out[k - 1] = x;
        for level in (0..k - 1).rev() {
            let up = cx.tape.upsample2(x)?;
            x = self.stages[level].forward(cx, up)?;
            out[level] = x;
        }
        Ok(out)
    }
}
