//! Teacher encoder, one-class bottleneck and student decoder.
//!
//! Levels are indexed from zero in code: level `0` is the finest map (`C0` channels at a
//! quarter of the input resolution), and each following level doubles the channels and
//! halves the spatial size.

mod bottleneck;
mod pyramid;
mod student;
mod teacher;

pub use bottleneck::Bottleneck;
pub use pyramid::FeaturePyramid;
pub use student::Student;
pub use teacher::{make_teacher, AuxSample, Teacher, TeacherConfig, TeacherReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::diifi::DiifiChain;
use crate::disco::DiscoStack;
use crate::error::{shape_err, FicoError, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Channel count of the finest level.
    pub base_channels: usize,
    /// Number of pyramid levels `K`.
    pub levels: usize,
    /// Blocks per compensation module `M`.
    pub disco_blocks: usize,
    /// Parallel kernels per dynamic convolution.
    pub dyconv_kernels: usize,
    /// Channel reduction of the dynamic-convolution attention head.
    pub attention_ratio: usize,
    /// Classes of the auxiliary teacher task.
    pub aux_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 16,
            levels: 3,
            disco_blocks: 4,
            dyconv_kernels: 4,
            attention_ratio: 4,
            aux_classes: 4,
        }
    }
}

impl ArchConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of the input height and width.
    pub fn input_divisor(&self) -> usize {
        1 << (self.levels + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(FicoError::InvalidArgument(
                "at least two pyramid levels are required".into(),
            ));
        }
        if self.base_channels == 0
            || self.disco_blocks == 0
            || self.dyconv_kernels == 0
            || self.attention_ratio == 0
        {
            return Err(FicoError::InvalidArgument(
                "architecture sizes must be positive".into(),
            ));
        }
        if self.aux_classes < 2 {
            return Err(FicoError::InvalidArgument(
                "auxiliary task needs two or more classes".into(),
            ));
        }
        Ok(())
    }

    /// Pyramid level shapes `(C, H, W)` for an `h x w` input.
    pub fn level_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        (0..self.levels)
            .map(|k| (self.channels(k), h >> (k + 2), w >> (k + 2)))
            .collect()
    }
}

/// Which optional modules a network instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub disco: bool,
    pub diifi: bool,
}

/// Teacher, bottleneck, student and the optional compensation and filter modules.
///
/// Parameter names: `teacher.*`, `ocbe.*`, `student.*`, `disco.k{k}.block{m}.*`, `diifi.k{k}.*`
/// with `k` counted from one.
#[derive(Clone, Debug)]
pub struct RdNetwork {
    pub arch: ArchConfig,
    pub teacher: Teacher,
    pub bottleneck: Bottleneck,
    pub student: Student,
    pub disco: Option<DiscoStack>,
    pub diifi: Option<DiifiChain>,
}

/// Outputs of one forward pass through the trainable path for a single view.
#[derive(Clone, Debug)]
pub struct ViewOutputs {
    pub teacher: Vec<Var>,
    pub embedding: Var,
    pub student: Vec<Var>,
    /// `C_k(f^{D_k})` per level (compensation signal without the shortcut).
    pub signals: Option<Vec<Var>>,
    /// `f_F^{D_k}` per level.
    pub compensated: Option<Vec<Var>>,
    /// DiIFi chain outputs for levels `1..K` (zero-based).
    pub chain: Option<Vec<Var>>,
}

impl ViewOutputs {
    /// Student features used for scoring: compensated when available.
    pub fn scored(&self) -> &[Var] {
        self.compensated.as_deref().unwrap_or(&self.student)
    }
}

impl RdNetwork {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        arch: &ArchConfig,
        components: Components,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        if components.diifi && !components.disco {
            return Err(FicoError::InvalidArgument(
                "the filter chain needs compensation modules".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let teacher = Teacher::new(store, arch, &mut rng);
        let bottleneck = Bottleneck::new(store, arch, &mut rng);
        let student = Student::new(store, arch, &mut rng);
        let disco = components
            .disco
            .then(|| DiscoStack::new(store, arch, &mut rng));
        let diifi = components
            .diifi
            .then(|| DiifiChain::new(store, arch, &mut rng));
        Ok(RdNetwork {
            arch: arch.clone(),
            teacher,
            bottleneck,
            student,
            disco,
            diifi,
        })
    }

    pub fn components(&self) -> Components {
        Components {
            disco: self.disco.is_some(),
            diifi: self.diifi.is_some(),
        }
    }

    /// Runs bottleneck, student, compensation and (optionally) the filter chain on teacher features.
    pub fn forward_from_teacher<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        teacher: Vec<Var>,
        with_chain: bool,
    ) -> Result<ViewOutputs> {
        let embedding = self.bottleneck.forward(cx, &teacher)?;
        let student = self.student.forward(cx, embedding)?;
        let (signals, compensated) = match &self.disco {
            Some(d) => {
                let mut sig = Vec::with_capacity(student.len());
                let mut comp = Vec::with_capacity(student.len());
                for (k, &f) in student.iter().enumerate() {
                    let s = d.signal(cx, k, f)?;
                    comp.push(cx.tape.add(s, f)?);
                    sig.push(s);
                }
                (Some(sig), Some(comp))
            }
            None => (None, None),
        };
        let chain = match (&self.diifi, &signals, with_chain) {
            (Some(chain), Some(sig), true) => Some(chain.forward(cx, sig[0])?),
            _ => None,
        };
        Ok(ViewOutputs {
            teacher,
            embedding,
            student,
            signals,
            compensated,
            chain,
        })
    }

    /// Full forward pass from a `[B, 3, H, W]` image batch.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<T>,
        images: Var,
        with_chain: bool,
    ) -> Result<ViewOutputs> {
        let teacher = self.teacher.forward(cx, images)?;
        self.forward_from_teacher(cx, teacher, with_chain)
    }

    /// Teacher pyramid of an image batch (`[B,3,H,W]`) or a single image (`[3,H,W]`).
    pub fn encode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
    ) -> Result<FeaturePyramid<T>> {
        let batch = as_batch(image)?;
        let mut cx = Ctx::new(store, false);
        let x = cx.input(batch);
        let levels = self.teacher.forward(&mut cx, x)?;
        FeaturePyramid::new(levels.iter().map(|&v| cx.value(v).clone()).collect())
    }

    /// One-class embedding `f^phi` of a teacher pyramid.
    pub fn bottleneck<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<Tensor<T>> {
        if pyramid.len() != self.arch.levels {
            return Err(shape_err!(
                "bottleneck: {} levels, expected {}",
                pyramid.len(),
                self.arch.levels
            ));
        }
        let mut cx = Ctx::new(store, false);
        let vars: Vec<Var> = pyramid
            .levels()
            .iter()
            .map(|t| cx.input(t.clone()))
            .collect();
        let e = self.bottleneck.forward(&mut cx, &vars)?;
        Ok(cx.value(e).clone())
    }

    /// Student pyramid decoded from an embedding.
    pub fn decode<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        embedding: &Tensor<T>,
    ) -> Result<FeaturePyramid<T>> {
        let mut cx = Ctx::new(store, false);
        let e = cx.input(as_batch(embedding)?);
        let out = self.student.forward(&mut cx, e)?;
        FeaturePyramid::new(out.iter().map(|&v| cx.value(v).clone()).collect())
    }
}

/// Adds a leading batch axis to a 3-D tensor; passes 4-D tensors through.
pub fn as_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    match t.shape() {
        [c, h, w] => t.clone().reshape(&[1, *c, *h, *w]),
        [_, _, _, _] => Ok(t.clone()),
        s => Err(shape_err!("expected CxHxW or BxCxHxW, got {:?}", s)),
    }
}
