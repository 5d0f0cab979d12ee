use super::{LayerId, LayerKind, ModelConfig};

/// `(N, K)` of a linear layer's weight `W ∈ R^{N×K}`.
pub fn layer_dims(id: LayerId, config: &ModelConfig) -> (usize, usize) {
    let (d, f) = (config.d_model, config.d_ff);
    match id.kind {
        LayerKind::Q | LayerKind::K | LayerKind::V | LayerKind::O => (d, d),
        LayerKind::Gate | LayerKind::Up => (f, d),
        LayerKind::Down => (d, f),
    }
}

/// FLOPs of one training step for a linear layer: forward, dgrad and wgrad
/// GEMMs, each `2·M·N·K` with `M = tokens`.
pub fn layer_flops(id: LayerId, config: &ModelConfig, tokens: usize) -> u64 {
    let (n, k) = layer_dims(id, config);
    3 * 2 * tokens as u64 * n as u64 * k as u64
}

pub fn total_linear_flops(config: &ModelConfig, tokens: usize) -> u64 {
    LayerId::all(config.n_blocks)
        .into_iter()
        .map(|id| layer_flops(id, config, tokens))
        .sum()
}
