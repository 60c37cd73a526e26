//! Cosine kernels, baseline reconstruction and consistency losses, and assembly of the
//! training objective for each mode.
//!
//! Two cosine granularities are used. Reconstruction and compensation terms compare channel
//! vectors per spatial location and average over locations. Consistency terms flatten each
//! sample and compare whole tensors.

pub mod gradcheck;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diifi::mse_loss;
use crate::disco::co_loss;
use crate::error::{shape_err, FicoError, Result};
use crate::model::{as_batch, FeaturePyramid, ViewOutputs};
use crate::tensor::{Scalar, Tensor};

/// Training objective variants, from the plain reconstruction baseline to the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "RD")]
    Rd,
    #[serde(rename = "GNL")]
    Gnl,
    #[serde(rename = "DISCO")]
    Disco,
    #[serde(rename = "DISCO+DIIFI")]
    DiscoDiifi,
    #[serde(rename = "FICO")]
    Fico,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Rd,
        Mode::Gnl,
        Mode::Disco,
        Mode::DiscoDiifi,
        Mode::Fico,
    ];
    /// Rows of the component ablation, in order of added modules.
    pub const ABLATION: [Mode; 4] = [Mode::Gnl, Mode::Disco, Mode::DiscoDiifi, Mode::Fico];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Rd => "RD",
            Mode::Gnl => "GNL",
            Mode::Disco => "DISCO",
            Mode::DiscoDiifi => "DISCO+DIIFI",
            Mode::Fico => "FICO",
        }
    }

    pub fn uses_disco(self) -> bool {
        matches!(self, Mode::Disco | Mode::DiscoDiifi | Mode::Fico)
    }

    pub fn uses_diifi(self) -> bool {
        matches!(self, Mode::DiscoDiifi | Mode::Fico)
    }

    pub fn uses_nor(self) -> bool {
        self == Mode::Fico
    }

    /// Whether augmented views enter the objective at all.
    pub fn uses_views(self) -> bool {
        self != Mode::Rd
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = FicoError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                FicoError::InvalidArgument(format!(
                    "unknown mode '{s}' (expected RD, GNL, DISCO, DISCO+DIIFI, FICO)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the augmented-view alignment inside the compensation loss.
    pub alpha: f64,
    /// Weight of the chain MSE inside the filter loss.
    pub beta: f64,
    /// Weight of the normality consistency inside the filter loss.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.05,
            beta: 0.02,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(FicoError::InvalidArgument(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Named loss components of one step. Components a mode does not compute stay `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rd: Option<f64>,
    pub l_abs: Option<f64>,
    pub l_lowf: Option<f64>,
    pub l_co: Option<f64>,
    pub l_mse: Option<f64>,
    pub l_nor: Option<f64>,
    pub l_fi: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [(&'static str, Option<f64>); 7] {
        [
            ("l_rd", self.l_rd),
            ("l_abs", self.l_abs),
            ("l_lowf", self.l_lowf),
            ("l_co", self.l_co),
            ("l_mse", self.l_mse),
            ("l_nor", self.l_nor),
            ("l_fi", self.l_fi),
        ]
    }

    /// First non-finite component, by name.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

fn need(v: Option<f64>, component: &'static str, mode: Mode) -> Result<f64> {
    v.ok_or(FicoError::MissingComponent {
        component,
        mode: mode.to_string(),
    })
}

/// Filter loss for the modes that use the chain. Taken from the breakdown when present,
/// otherwise assembled from its parts.
fn filter_term(mode: Mode, b: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    if let Some(fi) = b.l_fi {
        return Ok(fi);
    }
    let lowf = need(b.l_lowf, "l_lowf", mode)?;
    let mse = need(b.l_mse, "l_mse", mode)?;
    let nor = if mode.uses_nor() {
        need(b.l_nor, "l_nor", mode)?
    } else {
        0.0
    };
    let gamma = if mode.uses_nor() { w.gamma } else { 0.0 };
    crate::diifi::loss_fi(lowf, mse, nor, w.beta, gamma)
}

/// Total objective of a mode from its components.
///
/// * `RD`: `l_rd`
/// * `GNL`: `l_rd + l_abs + l_lowf`
/// * `DISCO`: `l_co + l_abs + l_lowf`
/// * `DISCO+DIIFI`: `l_fi + l_abs + l_co` with `l_fi = l_lowf + beta * l_mse`
/// * `FICO`: `l_fi + l_abs + l_co` with `l_fi = l_lowf + beta * l_mse + gamma * l_nor`
pub fn total(mode: Mode, b: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    Ok(match mode {
        Mode::Rd => need(b.l_rd, "l_rd", mode)?,
        Mode::Gnl => {
            need(b.l_rd, "l_rd", mode)?
                + need(b.l_abs, "l_abs", mode)?
                + need(b.l_lowf, "l_lowf", mode)?
        }
        Mode::Disco => {
            need(b.l_co, "l_co", mode)?
                + need(b.l_abs, "l_abs", mode)?
                + need(b.l_lowf, "l_lowf", mode)?
        }
        Mode::DiscoDiifi | Mode::Fico => {
            filter_term(mode, b, w)? + need(b.l_abs, "l_abs", mode)? + need(b.l_co, "l_co", mode)?
        }
    })
}

/// Lifts every level of a pyramid onto the tape as a constant.
pub fn pyramid_vars<T: Scalar>(tape: &mut Tape<T>, p: &FeaturePyramid<T>) -> Vec<Var> {
    p.levels()
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect()
}

/// Sum over levels of the per-location cosine distance.
pub fn rd_loss<T: Scalar>(tape: &mut Tape<T>, teacher: &[Var], student: &[Var]) -> Result<Var> {
    if teacher.len() != student.len() {
        return Err(shape_err!(
            "pyramids with {} and {} levels",
            teacher.len(),
            student.len()
        ));
    }
    let terms = teacher
        .iter()
        .zip(student)
        .map(|(&e, &d)| Ok((tape.cosine_location(e, d)?, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(&terms)
}

/// `sum_n cosine_flat(orig, views[n])`.
pub fn consistency_loss<T: Scalar>(tape: &mut Tape<T>, orig: Var, views: &[Var]) -> Result<Var> {
    if views.is_empty() {
        return Err(FicoError::InvalidArgument(
            "consistency loss needs at least one view".into(),
        ));
    }
    let terms = views
        .iter()
        .map(|&v| Ok((tape.cosine_flat(orig, v)?, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    tape.weighted_sum(&terms)
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().f64()
}

/// Mean over locations of `1 - cos` between channel vectors. Accepts `[C,H,W]` or `[B,C,H,W]`.
pub fn cosine_per_location<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("cosine: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(as_batch(a)?);
    let y = tape.constant(as_batch(b)?);
    let l = tape.cosine_location(x, y)?;
    Ok(scalar_of(&tape, l))
}

/// `1 - cos` between the two tensors flattened whole.
pub fn cosine_flat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("cosine: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mut tape = Tape::new();
    let n = a.numel();
    let x = tape.constant(a.clone().reshape(&[1, n])?);
    let y = tape.constant(b.clone().reshape(&[1, n])?);
    let l = tape.cosine_flat(x, y)?;
    Ok(scalar_of(&tape, l))
}

/// Reconstruction loss between teacher and student pyramids.
pub fn loss_rd<T: Scalar>(teacher: &FeaturePyramid<T>, student: &FeaturePyramid<T>) -> Result<f64> {
    teacher.check_paired(student)?;
    let mut tape = Tape::new();
    let e = pyramid_vars(&mut tape, teacher);
    let d = pyramid_vars(&mut tape, student);
    let l = rd_loss(&mut tape, &e, &d)?;
    Ok(scalar_of(&tape, l))
}

fn flat_consistency<T: Scalar>(orig: &Tensor<T>, views: &[Tensor<T>]) -> Result<f64> {
    if views.is_empty() {
        return Err(FicoError::InvalidArgument(
            "consistency loss needs at least one view".into(),
        ));
    }
    views.iter().map(|v| cosine_flat(orig, v)).sum()
}

/// Embedding consistency across augmented views.
pub fn loss_abs<T: Scalar>(phi: &Tensor<T>, views: &[Tensor<T>]) -> Result<f64> {
    flat_consistency(phi, views)
}

/// Consistency of the finest student output across augmented views.
pub fn loss_lowf<T: Scalar>(d1: &Tensor<T>, views: &[Tensor<T>]) -> Result<f64> {
    flat_consistency(d1, views)
}

/// Loss terms on the tape for one batch. Terms a mode does not use are `None`.
#[derive(Clone, Debug, Default)]
pub struct ObjectiveTerms {
    pub l_rd: Option<Var>,
    pub l_abs: Option<Var>,
    pub l_lowf: Option<Var>,
    pub l_co: Option<Var>,
    pub l_mse: Option<Var>,
    pub l_nor: Option<Var>,
    pub l_fi: Option<Var>,
    pub total: Option<Var>,
}

impl ObjectiveTerms {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let get = |v: Option<Var>| v.map(|v| scalar_of(tape, v));
        LossBreakdown {
            l_rd: get(self.l_rd),
            l_abs: get(self.l_abs),
            l_lowf: get(self.l_lowf),
            l_co: get(self.l_co),
            l_mse: get(self.l_mse),
            l_nor: get(self.l_nor),
            l_fi: get(self.l_fi),
            total: get(self.total).unwrap_or(f64::NAN),
        }
    }
}

fn required<'a>(v: &'a Option<Vec<Var>>, what: &'static str, mode: Mode) -> Result<&'a [Var]> {
    v.as_deref().ok_or(FicoError::MissingComponent {
        component: what,
        mode: mode.to_string(),
    })
}

/// Builds every term of `mode` from the outputs of the original batch and its views.
pub fn build_objective<T: Scalar>(
    tape: &mut Tape<T>,
    mode: Mode,
    weights: &LossWeights,
    orig: &ViewOutputs,
    views: &[ViewOutputs],
) -> Result<ObjectiveTerms> {
    weights.validate()?;
    let mut t = ObjectiveTerms::default();
    if !mode.uses_views() {
        let rd = rd_loss(tape, &orig.teacher, &orig.student)?;
        t.l_rd = Some(rd);
        t.total = Some(rd);
        return Ok(t);
    }
    if views.is_empty() {
        return Err(FicoError::InvalidArgument(format!(
            "mode {mode} needs at least one augmented view"
        )));
    }
    let phi_views: Vec<Var> = views.iter().map(|v| v.embedding).collect();
    let d1_views: Vec<Var> = views.iter().map(|v| v.student[0]).collect();
    let abs = consistency_loss(tape, orig.embedding, &phi_views)?;
    let lowf = consistency_loss(tape, orig.student[0], &d1_views)?;
    t.l_abs = Some(abs);
    t.l_lowf = Some(lowf);

    if !mode.uses_disco() {
        let rd = rd_loss(tape, &orig.teacher, &orig.student)?;
        t.l_rd = Some(rd);
        t.total = Some(tape.weighted_sum(&[(rd, 1.0), (abs, 1.0), (lowf, 1.0)])?);
        return Ok(t);
    }

    let comp = required(&orig.compensated, "compensated features", mode)?;
    let teacher_views: Vec<Vec<Var>> = views.iter().map(|v| v.teacher.clone()).collect();
    let comp_views = views
        .iter()
        .map(|v| required(&v.compensated, "compensated features", mode).map(<[Var]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let co = co_loss(
        tape,
        &orig.teacher,
        &teacher_views,
        comp,
        &comp_views,
        weights.alpha,
    )?;
    t.l_co = Some(co);

    if !mode.uses_diifi() {
        t.total = Some(tape.weighted_sum(&[(co, 1.0), (abs, 1.0), (lowf, 1.0)])?);
        return Ok(t);
    }

    let signals = required(&orig.signals, "compensation signals", mode)?;
    let chain = required(&orig.chain, "filter chain outputs", mode)?;
    let mut signal_views = Vec::with_capacity(views.len());
    let mut chain_views = Vec::with_capacity(views.len());
    for v in views {
        signal_views.push(required(&v.signals, "compensation signals", mode)?[1..].to_vec());
        chain_views.push(required(&v.chain, "filter chain outputs", mode)?.to_vec());
    }
    let mse = mse_loss(tape, &signals[1..], chain, &signal_views, &chain_views)?;
    t.l_mse = Some(mse);
    let mut fi_terms = vec![(lowf, 1.0), (mse, weights.beta)];
    if mode.uses_nor() {
        let base_views: Vec<Var> = views
            .iter()
            .map(|v| required(&v.signals, "compensation signals", mode).map(|s| s[0]))
            .collect::<Result<_>>()?;
        let nor = consistency_loss(tape, signals[0], &base_views)?;
        t.l_nor = Some(nor);
        fi_terms.push((nor, weights.gamma));
    }
    let fi = tape.weighted_sum(&fi_terms)?;
    t.l_fi = Some(fi);
    t.total = Some(tape.weighted_sum(&[(fi, 1.0), (abs, 1.0), (co, 1.0)])?);
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        normal_tensor(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Naive loop over locations of a `[C, H, W]` pair.
    fn location_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (c, hw) = (a.shape()[0], a.shape()[1] * a.shape()[2]);
        let mut sum = 0.0;
        for p in 0..hw {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let (x, y) = (a.data()[ch * hw + p], b.data()[ch * hw + p]);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            sum += 1.0 - dot / (na.sqrt() * nb.sqrt()).max(1e-8);
        }
        sum / hw as f64
    }

    fn flat_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        let na: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        1.0 - dot / (na * nb).max(1e-8)
    }

    #[test]
    fn location_cosine_matches_loop() {
        for seed in 0..5 {
            let a = random(&[5, 3, 4], seed);
            let b = random(&[5, 3, 4], seed + 100);
            assert!((cosine_per_location(&a, &b).unwrap() - location_oracle(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn location_cosine_extremes() {
        let a = random(&[4, 3, 3], 1);
        assert!(cosine_per_location(&a, &a).unwrap().abs() < 1e-12);
        // channel 0 vs channel 1 one-hot at every location
        let x = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 1.0 } else { 0.0 });
        let y = Tensor::from_fn(&[2, 2, 2], |i| if i < 4 { 0.0 } else { 3.0 });
        assert!((cosine_per_location(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_operand_gives_distance_one() {
        let a = Tensor::<f64>::zeros(&[3, 2, 2]);
        let b = random(&[3, 2, 2], 4);
        assert_eq!(cosine_per_location(&a, &b).unwrap(), 1.0);
        assert_eq!(cosine_flat(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn flat_cosine_matches_loop_and_extremes() {
        let a = random(&[3, 4, 4], 7);
        let b = random(&[3, 4, 4], 8);
        assert!((cosine_flat(&a, &b).unwrap() - flat_oracle(&a, &b)).abs() < 1e-6);
        assert!(cosine_flat(&a, &a).unwrap().abs() < 1e-12);
        assert!((cosine_flat(&a, &a.map(|v| -v)).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rd_loss_cases() {
        let shapes = [[1usize, 4, 4, 4], [1, 8, 2, 2], [1, 16, 1, 1]];
        let t = FeaturePyramid::new(
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random(s, i as u64))
                .collect(),
        )
        .unwrap();
        let s = FeaturePyramid::new(
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| random(s, 50 + i as u64))
                .collect(),
        )
        .unwrap();
        assert!(loss_rd(&t, &t).unwrap().abs() < 1e-12);
        let squeeze = |t: &Tensor<f64>| t.clone().reshape(&t.shape()[1..]).unwrap();
        let oracle: f64 = t
            .levels()
            .iter()
            .zip(s.levels())
            .map(|(a, b)| location_oracle(&squeeze(a), &squeeze(b)))
            .sum();
        assert!((loss_rd(&t, &s).unwrap() - oracle).abs() < 1e-6);

        // first half of channels vs second half: orthogonal everywhere
        let half = |s: &[usize; 4], first: bool| {
            let plane = s[2] * s[3];
            Tensor::from_fn(s, |i| {
                if (i / plane < s[1] / 2) == first {
                    1.0
                } else {
                    0.0
                }
            })
        };
        let a = FeaturePyramid::new(shapes.iter().map(|s| half(s, true)).collect()).unwrap();
        let b = FeaturePyramid::new(shapes.iter().map(|s| half(s, false)).collect()).unwrap();
        assert!((loss_rd(&a, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn abs_and_lowf_cases() {
        let phi = random(&[8, 2, 2], 1);
        assert_eq!(loss_abs(&phi, &[phi.clone(), phi.clone()]).unwrap(), 0.0);
        let e0 = Tensor::from_vec(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let e1 = Tensor::from_vec(&[2, 1, 1], vec![0.0, 5.0]).unwrap();
        assert!((loss_lowf(&e0, &[e1]).unwrap() - 1.0).abs() < 1e-15);
        let views: Vec<_> = (0..3).map(|i| random(&[8, 2, 2], 10 + i)).collect();
        let oracle: f64 = views.iter().map(|v| flat_oracle(&phi, v)).sum();
        assert!((loss_abs(&phi, &views).unwrap() - oracle).abs() < 1e-6);
        assert!(loss_abs(&phi, &[]).is_err());
    }

    #[test]
    fn totals_per_mode() {
        let w = LossWeights::default();
        let fico = LossBreakdown {
            l_fi: Some(0.7),
            l_abs: Some(0.1),
            l_co: Some(0.3),
            ..Default::default()
        };
        assert!((total(Mode::Fico, &fico, &w).unwrap() - 1.1).abs() < 1e-12);
        let gnl = LossBreakdown {
            l_rd: Some(1.0),
            l_abs: Some(0.5),
            l_lowf: Some(0.5),
            ..Default::default()
        };
        assert_eq!(total(Mode::Gnl, &gnl, &w).unwrap(), 2.0);
        assert_eq!(total(Mode::Rd, &gnl, &w).unwrap(), 1.0);
        assert!(matches!(
            total(Mode::Fico, &gnl, &w),
            Err(FicoError::MissingComponent { .. })
        ));
        // FICO ignores l_rd even when present
        let mut both = fico.clone();
        both.l_rd = Some(100.0);
        assert!((total(Mode::Fico, &both, &w).unwrap() - 1.1).abs() < 1e-12);
    }

    #[test]
    fn filter_term_is_assembled_when_absent() {
        let w = LossWeights::default();
        let b = LossBreakdown {
            l_lowf: Some(0.5),
            l_mse: Some(1.0),
            l_nor: Some(0.2),
            l_abs: Some(0.0),
            l_co: Some(0.0),
            ..Default::default()
        };
        assert!((total(Mode::Fico, &b, &w).unwrap() - 0.72).abs() < 1e-12);
        assert!((total(Mode::DiscoDiifi, &b, &w).unwrap() - 0.52).abs() < 1e-12);
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
            assert_eq!(serde_json::from_str::<Mode>(&json).unwrap(), m);
        }
        assert!("FOO".parse::<Mode>().is_err());
    }
}
