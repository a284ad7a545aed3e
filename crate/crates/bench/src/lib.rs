//! Shared fixtures for the criterion benches.

use fedssl_core::data::{self, Partition, SynthSpec};
use fedssl_core::rng;
use fedssl_core::Tensor;

/// A small federation: `clients` clients with `samples` images each.
pub fn partition(clients: usize, samples: usize) -> Partition {
    let spec = SynthSpec {
        clients,
        samples_per_client: samples,
        ..SynthSpec::default()
    };
    data::generate(&spec, 0).expect("valid bench spec")
}

/// Training images per client, as the federations take them.
pub fn shards(p: &Partition) -> Vec<(u32, Tensor)> {
    p.clients.iter().map(|c| (c.id, c.train.images.clone())).collect()
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::named(seed, "bench"))
}
