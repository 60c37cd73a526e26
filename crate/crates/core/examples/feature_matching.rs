//! Test-time feature matching: sorts-and-replaces per channel, then adapts a teacher pyramid
//! of shifted images towards a bank built from clean ones.
//!
//! Usage: `cargo run --release --example feature_matching`

use fico::model::{ArchConfig, Components, RdNetwork};
use fico::nn::ParamStore;
use fico::shift::synth::{render, Style};
use fico::shift::{
    corrupt, efdm_match, tta_adapt, CorruptionKind, CorruptionSpec, StyleBank, Texture,
};
use fico::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn channel_means(t: &Tensor<f32>) -> Vec<f32> {
    let s = t.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    (0..c)
        .map(|k| {
            let mut sum = 0.0;
            for b in 0..s[0] {
                sum += t.data()[(b * c + k) * hw..(b * c + k + 1) * hw]
                    .iter()
                    .sum::<f32>();
            }
            sum / (s[0] * hw) as f32
        })
        .collect()
}

/// Mean absolute gap between the finest-level channel means of shifted and clean images,
/// before and after matching.
pub fn run_example() -> fico::Result<(f32, f32)> {
    let matched = efdm_match(&[3.0, 1.0, 2.0], &[10.0, 20.0, 30.0], 1.0)?;
    println!("[3, 1, 2] matched onto [10, 20, 30]: {matched:?}");
    let half = efdm_match(&[3.0, 1.0, 2.0], &[10.0, 20.0, 30.0], 0.5)?;
    println!("same with ratio 0.5: {half:?}");

    let arch = ArchConfig::default();
    let mut store = ParamStore::<f32>::new();
    let net = RdNetwork::new(
        &mut store,
        &arch,
        Components {
            disco: false,
            diifi: false,
        },
        0,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let style = Style::random(Texture::Stripes, &mut rng);
    let clean: Vec<Tensor<f32>> = (0..8).map(|_| render(&style, 64, &mut rng)).collect();
    let dark = CorruptionSpec::at_severity(CorruptionKind::Brightness, 5)?;
    let shifted = clean
        .iter()
        .map(|x| corrupt(x, &dark, 0))
        .collect::<fico::Result<Vec<_>>>()?;

    let clean_batch = Tensor::stack(&clean.iter().collect::<Vec<_>>())?;
    let shifted_batch = Tensor::stack(&shifted.iter().collect::<Vec<_>>())?;
    let reference = net.encode(&store, &clean_batch)?;
    let bank = StyleBank::from_features(&[reference.level(0)], 0.8)?;
    let before = net.encode(&store, &shifted_batch)?;
    let after = tta_adapt(&net.teacher, &store, &before, &bank)?;

    let gap = |p: &Tensor<f32>| {
        let (a, b) = (channel_means(p), channel_means(reference.level(0)));
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len() as f32
    };
    let (g0, g1) = (gap(before.level(0)), gap(after.level(0)));
    println!(
        "finest-level channel-mean gap to clean features: {g0:.4} before, {g1:.4} after matching"
    );
    println!("deeper levels recomputed: {:?}", after.shapes());
    Ok((g0, g1))
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
