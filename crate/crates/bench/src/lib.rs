//! Shared model builders for the criterion benches.

use pyrpix_core::network::{
    init_flat, init_params, CondConfig, FlatModel, ModelConfig, MultiscaleModel, PixelCnnConfig,
    UpscalerConfig, UpscalerKind,
};

/// Matched-width model pair at the given resolution: a multiscale model
/// with a 4x4 base, and the flat O(N) baseline.
pub fn matched_pair(target: usize, hidden: usize) -> (MultiscaleModel, FlatModel) {
    let cfg = ModelConfig {
        base_h: 4,
        base_w: 4,
        target_h: target,
        target_w: target,
        pixelcnn: PixelCnnConfig {
            layers: 2,
            hidden,
            kernel: 3,
            first_kernel: 7,
            levels: 4,
            channels: 1,
        },
        upscaler: UpscalerConfig {
            kind: UpscalerKind::TypeA,
            resnet_layers: 2,
            hidden,
            patch: 4,
            shallow_layers: 2,
            shallow_hidden: hidden,
            levels: 4,
            channels: 1,
            separate_corner_weights: false,
        },
        cond: CondConfig::default(),
    };
    let ms = init_params(&cfg, 1).expect("valid config");
    let mut flat_cfg = cfg;
    flat_cfg.base_h = target;
    flat_cfg.base_w = target;
    let flat = init_flat(&flat_cfg, 1).expect("valid config");
    (ms, flat)
}
