//! Generates a small synthetic texture dataset and lists what was written.
//!
//! Usage: `cargo run --release --example synthetic_data`

use std::collections::BTreeMap;

use fico::shift::{synth_dataset, SynthManifest, SynthSpec, Texture};

pub fn run_example() -> fico::Result<SynthManifest> {
    let root = std::env::temp_dir()
        .join("fico-examples")
        .join("synthetic_data");
    let spec = SynthSpec {
        categories: vec![Texture::Stripes, Texture::Blobs],
        train: 10,
        test_good: 4,
        test_anomalous: 6,
        aux_per_class: 4,
        image_size: 32,
        ..SynthSpec::default()
    };
    let manifest = synth_dataset(&root, 0, &spec)?;
    let mut per_dir: BTreeMap<String, usize> = BTreeMap::new();
    for rel in manifest.files.keys() {
        let dir = rel.rsplit_once('/').map_or("", |(d, _)| d);
        *per_dir.entry(dir.to_string()).or_default() += 1;
    }
    for (dir, n) in &per_dir {
        println!("{dir:<40} {n:>3} files");
    }
    println!("{} files under {}", manifest.files.len(), root.display());
    Ok(manifest)
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
