//! Randomized checks shared by the property suite and the acceptance runner.
//!
//! Each check takes one generated case and returns a description of the first violation.

#![allow(dead_code)]

use fico::autograd::Tape;
use fico::diifi::DiifiChain;
use fico::eval::auroc_scores;
use fico::losses::{cosine_flat, cosine_per_location, loss_abs, rd_loss};
use fico::model::ArchConfig;
use fico::nn::ParamStore;
use fico::shift::{efdm_match, stable_argsort};
use fico::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = std::result::Result<(), String>;

const TOL: f64 = 1e-12;

fn close(name: &str, got: f64, want: f64) -> Check {
    if (got - want).abs() <= TOL {
        Ok(())
    } else {
        Err(format!("{name}: got {got:e}, expected {want:e}"))
    }
}

fn in_range(name: &str, v: f64, hi: f64) -> Check {
    if (0.0..=hi).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name}: {v:e} outside [0, {hi}]"))
    }
}

/// Two same-shaped `[B, C, H, W]` tensors with per-location and whole-tensor scale factors.
#[derive(Clone, Debug)]
pub struct LossCase {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
    /// One factor per `(sample, location)` for each operand.
    pub scale_a: Vec<f64>,
    pub scale_b: Vec<f64>,
    pub global: f64,
}

/// Locations are kept clear of the `1e-8` denominator guard: every channel vector has norm at
/// least 0.1 and factors stay within `[1e-2, 1e2]`, so norm products never drop below `1e-6`.
pub fn loss_case() -> impl Strategy<Value = LossCase> {
    (1usize..=3, 1usize..=6, 1usize..=4, 1usize..=4).prop_flat_map(|(b, c, h, w)| {
        let n = b * c * h * w;
        let locs = b * h * w;
        let values = prop::collection::vec(
            prop_oneof![
                -10.0f64..10.0,
                (-3i32..=3).prop_map(f64::from),
                -1e-3f64..1e-3
            ],
            n,
        );
        let factors = prop::collection::vec(1e-2f64..1e2, locs);
        (
            values.clone(),
            values,
            factors.clone(),
            factors,
            1e-2f64..1e2,
        )
            .prop_map(move |(va, vb, sa, sb, g)| {
                let lift = |mut v: Vec<f64>| {
                    let hw = h * w;
                    for s in 0..b {
                        for p in 0..hw {
                            let at = |k: usize| (s * c + k) * hw + p;
                            let norm = (0..c).map(|k| v[at(k)] * v[at(k)]).sum::<f64>().sqrt();
                            if norm < 0.1 {
                                v[at(0)] = if v[at(0)] < 0.0 { -1.0 } else { 1.0 };
                            }
                        }
                    }
                    Tensor::from_vec(&[b, c, h, w], v).unwrap()
                };
                LossCase {
                    a: lift(va),
                    b: lift(vb),
                    scale_a: sa,
                    scale_b: sb,
                    global: g,
                }
            })
    })
}

fn scale_locations(t: &Tensor<f64>, factors: &[f64]) -> Tensor<f64> {
    let s = t.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = t.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (sample, p) = (i / (c * hw), i % hw);
        *v *= factors[sample * hw + p];
    }
    out
}

/// Range, identity, antiparallel and positive-rescale laws of the cosine loss terms.
pub fn check_loss_invariants(case: &LossCase) -> Check {
    let LossCase { a, b, .. } = case;
    let neg = a.map(|v| -v);
    let loc = cosine_per_location(a, b).map_err(|e| e.to_string())?;
    let flat = cosine_flat(a, b).map_err(|e| e.to_string())?;
    in_range("per-location term", loc, 2.0)?;
    in_range("flattened term", flat, 2.0)?;
    close(
        "per-location identity",
        cosine_per_location(a, a).unwrap(),
        0.0,
    )?;
    close("flattened identity", cosine_flat(a, a).unwrap(), 0.0)?;
    close(
        "per-location antiparallel",
        cosine_per_location(a, &neg).unwrap(),
        2.0,
    )?;
    close("flattened antiparallel", cosine_flat(a, &neg).unwrap(), 2.0)?;

    // Per-location terms are invariant to a positive factor per location and operand.
    let sa = scale_locations(a, &case.scale_a);
    let sb = scale_locations(b, &case.scale_b);
    close(
        "per-location rescale",
        cosine_per_location(&sa, &sb).unwrap(),
        loc,
    )?;
    // Flattened terms are invariant to one positive factor per operand.
    let ga = a.map(|v| v * case.global);
    close("flattened rescale", cosine_flat(&ga, b).unwrap(), flat)?;

    // Summed over levels and views the bounds scale with the count.
    let two_level = |x: &Tensor<f64>, y: &Tensor<f64>| {
        let mut tape = Tape::new();
        let xs = [tape.constant(x.clone()), tape.constant(x.clone())];
        let ys = [tape.constant(y.clone()), tape.constant(y.clone())];
        let l = rd_loss(&mut tape, &xs, &ys).unwrap();
        tape.value(l).item()
    };
    in_range("two-level reconstruction", two_level(a, b), 4.0)?;
    close("two-level identity", two_level(a, a), 0.0)?;
    close("two-level antiparallel", two_level(a, &neg), 4.0)?;
    let views = [b.clone(), neg.clone()];
    in_range("two-view consistency", loss_abs(a, &views).unwrap(), 4.0)?;
    close(
        "two-view identity",
        loss_abs(a, &[a.clone(), a.clone()]).unwrap(),
        0.0,
    )?;
    Ok(())
}

/// A valid filter-chain input: channels `C`, levels `K`, batch and spatial size.
#[derive(Clone, Debug)]
pub struct ShapeCase {
    pub channels: usize,
    pub levels: usize,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

pub fn shape_case() -> impl Strategy<Value = ShapeCase> {
    (
        1usize..=6,
        2usize..=4,
        1usize..=2,
        1usize..=3,
        1usize..=3,
        any::<u64>(),
    )
        .prop_map(|(channels, levels, batch, mh, mw, seed)| {
            let div = 1 << (levels - 1);
            ShapeCase {
                channels,
                levels,
                batch,
                h: div * mh,
                w: div * mw,
                seed,
            }
        })
}

/// Level `k` (1-based) of the chain has `2^(k-1) C` channels at `H / 2^(k-1)` by `W / 2^(k-1)`.
pub fn check_shape_law(case: &ShapeCase) -> Check {
    let arch = ArchConfig {
        base_channels: case.channels,
        levels: case.levels,
        ..ArchConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    let mut store = ParamStore::<f32>::new();
    let chain = DiifiChain::new(&mut store, &arch, &mut rng);
    let base = Tensor::from_fn(&[case.batch, case.channels, case.h, case.w], |_| {
        rng.random_range(-1.0f32..1.0)
    });
    let out = chain
        .transform_chain(&store, &base)
        .map_err(|e| e.to_string())?;
    if out.len() != case.levels - 1 {
        return Err(format!("{} outputs for K = {}", out.len(), case.levels));
    }
    for (i, t) in out.iter().enumerate() {
        let k = i + 2;
        let f = 1 << (k - 1);
        let want = [case.batch, f * case.channels, case.h / f, case.w / f];
        if t.shape() != want {
            return Err(format!(
                "level {k}: shape {:?}, expected {want:?} for {case:?}",
                t.shape()
            ));
        }
    }
    Ok(())
}

/// Content with frequent ties, a sorted style of the same length, and a blend ratio.
#[derive(Clone, Debug)]
pub struct EfdmCase {
    pub content: Vec<f32>,
    pub style: Vec<f32>,
    pub lambda: f32,
}

pub fn efdm_case() -> impl Strategy<Value = EfdmCase> {
    (1usize..=64).prop_flat_map(|n| {
        let value = prop_oneof![(-4i8..=4).prop_map(f32::from), -100.0f32..100.0];
        let lambda = prop_oneof![Just(0.0f32), Just(1.0f32), 0.0f32..=1.0];
        (
            prop::collection::vec(value.clone(), n),
            prop::collection::vec(value, n),
            lambda,
        )
            .prop_map(|(content, mut style, lambda)| {
                style.sort_by(f32::total_cmp);
                EfdmCase {
                    content,
                    style,
                    lambda,
                }
            })
    })
}

/// With `lambda = 1` the output multiset equals the style bitwise and matching again is a
/// no-op; for every ratio the output is non-decreasing along the content's stable order.
pub fn check_efdm(case: &EfdmCase) -> Check {
    let out = efdm_match(&case.content, &case.style, case.lambda).map_err(|e| e.to_string())?;
    let order = stable_argsort(&case.content);
    if let Some(r) = (1..order.len()).find(|&r| out[order[r - 1]] > out[order[r]]) {
        return Err(format!("rank {r} is out of order for {case:?}"));
    }
    if case.lambda == 1.0 {
        let mut sorted = out.clone();
        sorted.sort_by(f32::total_cmp);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&sorted) != bits(&case.style) {
            return Err(format!("sorted output differs from style for {case:?}"));
        }
        let again = efdm_match(&out, &case.style, 1.0).map_err(|e| e.to_string())?;
        if bits(&again) != bits(&out) {
            return Err(format!("second match changed the output for {case:?}"));
        }
    }
    if case.lambda == 0.0 && out != case.content {
        return Err("zero ratio changed the content".into());
    }
    Ok(())
}

/// Scores with frequent ties and labels holding both classes.
#[derive(Clone, Debug)]
pub struct AurocCase {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

pub fn auroc_case() -> impl Strategy<Value = AurocCase> {
    (2usize..=200)
        .prop_flat_map(|n| {
            let score = prop_oneof![(0i32..8).prop_map(f64::from), -1.0f64..1.0];
            (
                prop::collection::vec(score, n),
                prop::collection::vec(0u8..=1, n),
            )
        })
        .prop_filter_map("both classes present", |(scores, labels)| {
            (labels.contains(&0) && labels.contains(&1)).then_some(AurocCase { scores, labels })
        })
}

/// Brute force over every (anomalous, normal) pair with ties credited one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (p, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (n, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1;
            twice += if p > n {
                2
            } else if p == n {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

pub fn check_auroc(case: &AurocCase) -> Check {
    let got = auroc_scores(&case.scores, &case.labels).map_err(|e| e.to_string())?;
    let want = pairwise_auroc(&case.scores, &case.labels);
    if got.to_bits() != want.to_bits() {
        return Err(format!(
            "AUROC {got} vs pairwise {want} on {} samples",
            case.scores.len()
        ));
    }
    Ok(())
}
