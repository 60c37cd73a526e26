//! Central finite-difference gradient checking in 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{build_objective, LossWeights, Mode, ObjectiveTerms};
use crate::autograd::{Tape, Var};
use crate::error::{FicoError, Result};
use crate::model::{ArchConfig, Components, RdNetwork};
use crate::nn::{Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so entries whose true gradient is
    /// zero are judged by absolute error.
    pub floor: f64,
    /// Relative disagreement between the central differences at `step` and `2 * step` above
    /// which an entry is treated as unresolvable at this step (a ReLU kink or a near-singular
    /// normalization inside the stencil).
    pub resolution: f64,
    /// Largest fraction of unresolvable entries a passing check may contain.
    pub max_unresolved_fraction: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            resolution: 1e-3,
            max_unresolved_fraction: 0.02,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; infinite when either side is non-finite.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Numeric derivative at one coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    /// Richardson combination of the central differences at `h` and `2h`.
    pub value: f64,
    pub resolved: bool,
}

/// Central differences at one coordinate. `eval(d)` returns the function with the coordinate
/// shifted by `d`.
pub fn central_difference(
    mut eval: impl FnMut(f64) -> Result<f64>,
    opts: &GradcheckOptions,
) -> Result<Estimate> {
    let h = opts.step;
    let fine = (eval(h)? - eval(-h)?) / (2.0 * h);
    let coarse = (eval(2.0 * h)? - eval(-2.0 * h)?) / (4.0 * h);
    let value = (4.0 * fine - coarse) / 3.0;
    let resolved = relative_error(coarse, fine, opts.floor) <= opts.resolution;
    Ok(Estimate { value, resolved })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    /// Entries whose numeric derivative could not be resolved at the configured step.
    pub unresolved: usize,
    /// Maximum over resolved entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst resolved entry.
    pub worst_index: usize,
    pub non_finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub label: String,
    pub options: GradcheckOptions,
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub entries: usize,
    pub unresolved: usize,
    pub seconds: f64,
    pub passed: bool,
}

/// One parameter's analytic gradient next to its numeric estimates.
#[derive(Clone, Debug)]
pub struct GradPair {
    pub name: String,
    pub analytic: Tensor<f64>,
    pub numeric: Vec<Estimate>,
}

impl GradPair {
    /// A pair whose numeric side is fully resolved.
    pub fn exact(name: &str, analytic: Tensor<f64>, numeric: &Tensor<f64>) -> Self {
        GradPair {
            name: name.to_string(),
            analytic,
            numeric: numeric
                .data()
                .iter()
                .map(|&value| Estimate {
                    value,
                    resolved: true,
                })
                .collect(),
        }
    }
}

/// Compares analytic and numeric gradients entry by entry.
pub fn compare(
    label: &str,
    pairs: &[GradPair],
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut params = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.analytic.numel() != pair.numeric.len() {
            return Err(FicoError::Shape(format!(
                "gradient sizes differ for {}: {} vs {}",
                pair.name,
                pair.analytic.numel(),
                pair.numeric.len()
            )));
        }
        let mut check = ParamCheck {
            name: pair.name.clone(),
            entries: pair.numeric.len(),
            unresolved: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
            non_finite: false,
        };
        for (i, (&a, est)) in pair.analytic.data().iter().zip(&pair.numeric).enumerate() {
            if !a.is_finite() || !est.value.is_finite() {
                check.non_finite = true;
                check.max_rel_error = f64::INFINITY;
                check.worst_index = i;
                continue;
            }
            if !est.resolved {
                check.unresolved += 1;
                continue;
            }
            let r = relative_error(a, est.value, opts.floor);
            if r > check.max_rel_error {
                check.max_rel_error = r;
                check.worst_index = i;
            }
            check.max_abs_error = check.max_abs_error.max((a - est.value).abs());
        }
        params.push(check);
    }
    let entries: usize = params.iter().map(|p| p.entries).sum();
    let unresolved: usize = params.iter().map(|p| p.unresolved).sum();
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let passed = params.iter().all(|p| !p.non_finite)
        && max_rel_error < opts.tolerance
        && unresolved as f64 <= opts.max_unresolved_fraction * entries as f64;
    Ok(GradcheckReport {
        label: label.to_string(),
        options: *opts,
        entries,
        unresolved,
        passed,
        params,
        max_rel_error,
        seconds: 0.0,
    })
}

/// Numeric derivatives of `f` with respect to every entry of every input.
pub fn numeric_gradient(
    inputs: &[Tensor<f64>],
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    opts: &GradcheckOptions,
) -> Result<Vec<Vec<Estimate>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for p in 0..work.len() {
        let mut g = Vec::with_capacity(work[p].numel());
        for i in 0..work[p].numel() {
            let orig = work[p].data()[i];
            g.push(central_difference(
                |d| {
                    work[p].data_mut()[i] = orig + d;
                    f(&work)
                },
                opts,
            )?);
            work[p].data_mut()[i] = orig;
        }
        out.push(g);
    }
    Ok(out)
}

/// Checks the tape gradient of a scalar function of named inputs.
pub fn gradcheck<F>(
    label: &str,
    inputs: &[(String, Tensor<f64>)],
    f: F,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let start = std::time::Instant::now();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| {
            grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();
    let values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let numeric = numeric_gradient(
        &values,
        |xs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let l = f(&mut tape, &vars)?;
            Ok(tape.value(l).item())
        },
        opts,
    )?;
    let pairs: Vec<GradPair> = inputs
        .iter()
        .zip(analytic)
        .zip(numeric)
        .map(|(((name, _), analytic), numeric)| GradPair {
            name: name.clone(),
            analytic,
            numeric,
        })
        .collect();
    let mut report = compare(label, &pairs, opts)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Loss terms that can be checked through the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Rd,
    Abs,
    Lowf,
    Co,
    Mse,
    Nor,
    Total,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Rd,
        Term::Abs,
        Term::Lowf,
        Term::Co,
        Term::Mse,
        Term::Nor,
        Term::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Rd => "l_rd",
            Term::Abs => "l_abs",
            Term::Lowf => "l_lowf",
            Term::Co => "l_co",
            Term::Mse => "l_mse",
            Term::Nor => "l_nor",
            Term::Total => "l_fico",
        }
    }

    /// Smallest mode whose objective contains the term.
    fn mode(self) -> Mode {
        match self {
            Term::Rd => Mode::Rd,
            Term::Abs | Term::Lowf => Mode::Gnl,
            Term::Co => Mode::Disco,
            Term::Mse => Mode::DiscoDiifi,
            Term::Nor | Term::Total => Mode::Fico,
        }
    }

    fn select(self, t: &ObjectiveTerms) -> Option<Var> {
        match self {
            Term::Rd => t.l_rd,
            Term::Abs => t.l_abs,
            Term::Lowf => t.l_lowf,
            Term::Co => t.l_co,
            Term::Mse => t.l_mse,
            Term::Nor => t.l_nor,
            Term::Total => t.total,
        }
    }
}

/// Tiny network, inputs and views used for whole-pipeline checks.
pub struct TinySetup {
    pub net: RdNetwork,
    pub store: ParamStore<f64>,
    pub images: Tensor<f64>,
    pub views: Vec<Tensor<f64>>,
    pub weights: LossWeights,
}

impl TinySetup {
    /// Two levels, two base channels, 8x8 inputs, a batch of two and one view. Every
    /// parameter is perturbed away from its initial value so no block starts at zero.
    pub fn new(mode: Mode, seed: u64) -> Result<Self> {
        let arch = ArchConfig {
            base_channels: 2,
            levels: 2,
            ..Default::default()
        };
        let components = Components {
            disco: mode.uses_disco(),
            diifi: mode.uses_diifi(),
        };
        let mut store = ParamStore::<f64>::new();
        let net = RdNetwork::new(&mut store, &arch, components, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let jitter = Normal::new(0.0, 0.2).expect("finite");
        for id in store.ids().collect::<Vec<ParamId>>() {
            if store.kind(id) == ParamKind::Buffer {
                continue;
            }
            for v in store.get_mut(id).data_mut() {
                *v += jitter.sample(&mut rng);
            }
        }
        store.freeze_prefix("teacher.");
        let pixel = Uniform::new(0.0, 1.0).expect("range");
        let images = Tensor::from_fn(&[2, 3, 8, 8], |_| pixel.sample(&mut rng));
        let views = vec![Tensor::from_fn(&[2, 3, 8, 8], |_| pixel.sample(&mut rng))];
        Ok(TinySetup {
            net,
            store,
            images,
            views,
            weights: LossWeights::default(),
        })
    }

    fn objective<'s>(
        &self,
        store: &'s ParamStore<f64>,
        mode: Mode,
    ) -> Result<(Ctx<'s, f64>, ObjectiveTerms)> {
        let mut cx = Ctx::new(store, true);
        let with_chain = mode.uses_diifi();
        let x = cx.input(self.images.clone());
        let orig = self.net.forward(&mut cx, x, with_chain)?;
        let mut views = Vec::new();
        if mode.uses_views() {
            for v in &self.views {
                let xv = cx.input(v.clone());
                views.push(self.net.forward(&mut cx, xv, with_chain)?);
            }
        }
        let terms = build_objective(&mut cx.tape, mode, &self.weights, &orig, &views)?;
        Ok((cx, terms))
    }

    pub fn term_value(&self, store: &ParamStore<f64>, term: Term) -> Result<f64> {
        let (cx, terms) = self.objective(store, term.mode())?;
        let v = term
            .select(&terms)
            .ok_or_else(|| FicoError::InvalidArgument(format!("{} not built", term.name())))?;
        Ok(cx.value(v).item())
    }

    /// Analytic gradients of `term` for every trainable parameter.
    pub fn analytic(&self, term: Term) -> Result<Vec<(ParamId, Tensor<f64>)>> {
        let (cx, terms) = self.objective(&self.store, term.mode())?;
        let v = term
            .select(&terms)
            .ok_or_else(|| FicoError::InvalidArgument(format!("{} not built", term.name())))?;
        let mut grads = cx.backward(v)?.grads;
        for id in self.store.trainable() {
            if !grads.iter().any(|(g, _)| *g == id) {
                grads.push((id, Tensor::zeros(self.store.get(id).shape())));
            }
        }
        grads.sort_by_key(|(id, _)| id.index());
        Ok(grads)
    }
}

/// Checks `term` with respect to every trainable parameter of the tiny network.
pub fn network_gradcheck(
    term: Term,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let start = std::time::Instant::now();
    let mut setup = TinySetup::new(term.mode(), seed)?;
    let analytic = setup.analytic(term)?;
    let mut pairs = Vec::with_capacity(analytic.len());
    for (id, a) in analytic {
        let mut numeric = Vec::with_capacity(a.numel());
        for i in 0..a.numel() {
            let orig = setup.store.get(id).data()[i];
            numeric.push(central_difference(
                |d| {
                    setup.store.get_mut(id).data_mut()[i] = orig + d;
                    setup.term_value(&setup.store, term)
                },
                opts,
            )?);
            setup.store.get_mut(id).data_mut()[i] = orig;
        }
        pairs.push(GradPair {
            name: setup.store.entry(id).name.clone(),
            analytic: a,
            numeric,
        });
    }
    let mut report = compare(term.name(), &pairs, opts)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Whole-network checks of every loss term.
pub fn gradcheck_all(seed: u64, opts: &GradcheckOptions) -> Result<Vec<GradcheckReport>> {
    Term::ALL
        .iter()
        .map(|&t| network_gradcheck(t, seed, opts))
        .collect()
}
