use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedssl_bench::{partition, shards};
use fedssl_core::federation::{fedavg, ClfSettings, ClientUpdate, FedClf, FedMae, MaeSettings};
use fedssl_core::nets::{CnnEncoder, MaeModel};
use fedssl_core::rng;

fn fedclf_round(c: &mut Criterion) {
    let part = partition(4, 40);
    let enc = CnnEncoder::default();
    let init = enc.init(&mut rng::named(0, "init"), true);
    let settings = ClfSettings {
        rounds: 1,
        ..ClfSettings::default()
    };
    let fed = FedClf::new(settings, enc, init, shards(&part)).unwrap();
    let mut g = c.benchmark_group("rounds");
    g.sample_size(10);
    g.bench_function("fedclf_round_4x24", |b| {
        b.iter_batched(|| fed.clone(), |mut f| black_box(f.run_round().unwrap()), BatchSize::LargeInput)
    });
    let model = MaeModel::default();
    let init = model.init(&mut rng::named(0, "init"));
    let settings = MaeSettings {
        rounds: 1,
        local_epochs: 1,
        ..MaeSettings::default()
    };
    let fed = FedMae::new(settings, model, init, shards(&part)).unwrap();
    g.bench_function("fedmae_round_4x24_e1", |b| {
        b.iter_batched(|| fed.clone(), |mut f| black_box(f.run_round().unwrap()), BatchSize::LargeInput)
    });
    g.finish();
}

fn aggregation(c: &mut Criterion) {
    let model = MaeModel::default();
    let clients: Vec<_> = (0..10).map(|i| model.init(&mut rng::named(i, "init"))).collect();
    let names: Vec<String> = clients[0].names().map(str::to_string).collect();
    let updates: Vec<ClientUpdate<'_>> = clients
        .iter()
        .enumerate()
        .map(|(i, p)| ClientUpdate {
            client: i as u32,
            params: p,
            size: 10.0 + i as f64,
        })
        .collect();
    c.bench_function("fedavg_10_vit", |b| b.iter(|| black_box(fedavg(&clients[0], &updates, &names, false).unwrap())));
}

criterion_group!(benches, fedclf_round, aggregation);
criterion_main!(benches);
