//! Applies every corruption at every severity to one rendered texture and writes the grid
//! of results as PNG files.
//!
//! Usage: `cargo run --release --example corruption_scenarios`

use fico::io::write_rgb;
use fico::shift::synth::{render, Style};
use fico::shift::{corrupt, CorruptionKind, CorruptionSpec, Texture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean absolute pixel change per (kind, severity).
pub fn run_example() -> fico::Result<Vec<(CorruptionKind, u8, f64)>> {
    let out = std::env::temp_dir()
        .join("fico-examples")
        .join("corruption_scenarios");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let style = Style::random(Texture::NoiseCloth, &mut rng);
    let image = render(&style, 64, &mut rng);
    write_rgb(&out.join("clean.png"), &image)?;
    let mut changes = Vec::new();
    for kind in CorruptionKind::ALL {
        for severity in 0..=5 {
            let spec = CorruptionSpec::at_severity(kind, severity)?;
            let shifted = corrupt(&image, &spec, 7)?;
            let diff = shifted
                .data()
                .iter()
                .zip(image.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / image.numel() as f64;
            write_rgb(
                &out.join(format!("{}_{severity}.png", kind.as_str())),
                &shifted,
            )?;
            println!(
                "{:<14} severity {severity} (param {:>5}): mean |change| {diff:.4}",
                kind.as_str(),
                spec.param
            );
            changes.push((kind, severity, diff));
        }
    }
    println!("images in {}", out.display());
    Ok(changes)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
