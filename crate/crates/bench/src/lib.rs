//! Fixture builders shared by the criterion benchmarks: deterministic
//! random matrices, a standalone mixture layer, and a toy dual encoder.

use moa_core::adapter::{build_moa_layer, MoaConfig, MoaLayer};
use moa_core::backbone::{BackboneConfig, DualEncoder};
use moa_core::params::{gaussian_vec, stream_rng, ParamStore};

/// Deterministic Gaussian buffer for benchmark inputs.
pub fn random_matrix(rows: usize, cols: usize, label: &str) -> Vec<f64> {
    let mut rng = stream_rng(42, label);
    gaussian_vec(&mut rng, rows * cols, 1.0)
}

/// A standalone mixture layer at width `d` with the default expert/router
/// geometry (6 experts, 2 active, reduction 8, domain router).
pub fn mixture_fixture(d: usize) -> (ParamStore, MoaLayer, MoaConfig) {
    let cfg = MoaConfig::default();
    let mut store = ParamStore::new();
    let layer = build_moa_layer(&mut store, "bench", d, &cfg, 7).expect("valid fixture geometry");
    (store, layer, cfg)
}

/// The default toy dual encoder with mixtures hooked into every block.
pub fn toy_encoder() -> DualEncoder {
    DualEncoder::build(BackboneConfig::default(), Some(MoaConfig::default()))
        .expect("default geometry is valid")
}

/// One deterministic image matching the encoder's configured size.
pub fn toy_image(cfg: &BackboneConfig) -> Vec<f64> {
    let (h, w) = cfg.image_hw;
    random_matrix(h * w * cfg.channels, 1, "bench/image")
}
