//! Saves a network, reloads it bitwise, and strips the filter-chain weights, showing which
//! tensors an inference load reads.
//!
//! Usage: `cargo run --release --example checkpoints`

use fico::checkpoint::{copy_without_prefix, load_into, save, CheckpointReader};
use fico::harness::DIIFI_PREFIX;
use fico::model::{ArchConfig, Components, RdNetwork};
use fico::nn::ParamStore;

/// Tensor counts of the full and the stripped checkpoint.
pub fn run_example() -> fico::Result<(usize, usize)> {
    let root = std::env::temp_dir()
        .join("fico-examples")
        .join("checkpoints");
    let arch = ArchConfig::default();
    let mut store = ParamStore::<f32>::new();
    RdNetwork::new(
        &mut store,
        &arch,
        Components {
            disco: true,
            diifi: true,
        },
        0,
    )?;
    save(
        &root.join("full"),
        &store,
        |_| true,
        serde_json::json!({ "kind": "example" }),
    )?;

    let reader = CheckpointReader::open(&root.join("full"))?;
    let mut reloaded = ParamStore::<f32>::new();
    RdNetwork::new(
        &mut reloaded,
        &arch,
        Components {
            disco: true,
            diifi: true,
        },
        1,
    )?;
    load_into(&reader, &mut reloaded, |_| true)?;
    let same = store.digest("") == reloaded.digest("");
    println!(
        "full checkpoint: {} tensors, reload bitwise equal: {same}",
        reader.names().count()
    );

    let stripped = copy_without_prefix(&root.join("full"), &root.join("stripped"), DIIFI_PREFIX)?;
    println!(
        "without {DIIFI_PREFIX}*: {} tensors",
        stripped.tensors.len()
    );

    let mut inference = ParamStore::<f32>::new();
    RdNetwork::new(
        &mut inference,
        &arch,
        Components {
            disco: true,
            diifi: false,
        },
        2,
    )?;
    let reader = CheckpointReader::open(&root.join("full"))?;
    load_into(&reader, &mut inference, |_| true)?;
    let reads = reader.access_log();
    let filter_reads = reads.iter().filter(|n| n.starts_with(DIIFI_PREFIX)).count();
    println!(
        "inference load read {} tensors, {filter_reads} of them filter weights",
        reads.len()
    );
    Ok((reader.names().count(), stripped.tensors.len()))
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}
