//! Distribution shift: training views, out-of-distribution corruptions, test-time feature
//! matching and the synthetic texture dataset.

mod augment;
mod corrupt;
mod efdm;
pub mod synth;

pub use augment::{apply_view, make_views, sample_params, AugmentPolicy, ViewParams};
pub use corrupt::{
    convolve_reflect, corrupt, disk_kernel, gaussian_kernel, reflect, CorruptionKind,
    CorruptionSpec, Kernel, BRIGHTNESS_TABLE, CONTRAST_TABLE, DEFOCUS_TABLE, NOISE_TABLE,
    SEVERITY_TABLE_VERSION,
};
pub use efdm::{efdm_match, stable_argsort, tta_adapt, StyleBank};
pub use synth::{synth_dataset, Injector, SynthManifest, SynthSpec, Texture};

/// Derives an independent RNG seed from a master seed and a path of indices (image, view, ...).
/// Uses the SplitMix64 finalizer, so nearby inputs give unrelated seeds.
pub fn stream_seed(master: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}
