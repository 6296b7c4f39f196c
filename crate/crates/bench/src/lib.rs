//! Benchmark fixtures shared by the criterion targets in `benches/`.

use resadapt::adapternet::{DomainHead, NetworkConfig};
use resadapt::{AdapterNet, Tensor};

/// Deterministic pseudo-image batch `[n, 3, size, size]` in `[0, 1)`.
pub fn batch(n: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(&[n, 3, size, size], |i| ((i * 7919) % 255) as f32 / 255.0)
}

/// The desk network with one 10-class head.
pub fn desk_net() -> AdapterNet<f32> {
    AdapterNet::build(NetworkConfig::desk(vec![DomainHead { name: "a".into(), classes: 10 }])).expect("desk preset builds")
}
