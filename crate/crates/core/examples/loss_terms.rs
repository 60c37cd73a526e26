//! Builds the training objective of every mode on a small random batch and prints which
//! loss components each mode computes.
//!
//! Usage: `cargo run --release --example loss_terms`

use fico::losses::{build_objective, LossBreakdown, LossWeights, Mode};
use fico::model::{ArchConfig, Components, RdNetwork};
use fico::nn::{Ctx, ParamStore};
use fico::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> fico::Result<Vec<(Mode, LossBreakdown)>> {
    let arch = ArchConfig {
        base_channels: 4,
        ..ArchConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::<f32>::from_fn(&[2, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let views: Vec<Tensor<f32>> = (0..2)
        .map(|_| {
            let mut v = images.map(|p| p * 0.8 + 0.1);
            v.data_mut()
                .iter_mut()
                .for_each(|p| *p += rng.random_range(-0.02..0.02));
            v
        })
        .collect();
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let mut store = ParamStore::new();
        let components = Components {
            disco: mode.uses_disco(),
            diifi: mode.uses_diifi(),
        };
        let net = RdNetwork::new(&mut store, &arch, components, 0)?;
        let mut cx = Ctx::new(&store, true);
        let x = cx.input(images.clone());
        let orig = net.forward(&mut cx, x, mode.uses_diifi())?;
        let mut outs = Vec::new();
        if mode.uses_views() {
            for v in &views {
                let xv = cx.input(v.clone());
                outs.push(net.forward(&mut cx, xv, mode.uses_diifi())?);
            }
        }
        let terms = build_objective(&mut cx.tape, mode, &LossWeights::default(), &orig, &outs)?;
        let b = terms.breakdown(&cx.tape);
        let present: Vec<String> = b
            .components()
            .iter()
            .filter_map(|(n, v)| v.map(|v| format!("{n}={v:.4}")))
            .collect();
        println!(
            "{:<12} {} | total {:.4}",
            mode.as_str(),
            present.join(" "),
            b.total
        );
        rows.push((mode, b));
    }
    Ok(rows)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
