use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use mtcvr_core::analysis::{enumerate_expected_value, exact_expected_value, random_instance, Formula};
use mtcvr_core::data::{generate_synthetic, SyntheticConfig};
use mtcvr_core::estimators::{estimator_loss, EstimatorKind, HyperParams, LossContext};
use mtcvr_core::metrics::{auc, ScoredLabelSet};
use mtcvr_core::model::{Architecture, MultiTaskNet};
use mtcvr_core::{seed, InteractionRecord, Tape};
use rand::Rng;

fn bench_auc(c: &mut Criterion) {
    let mut group = c.benchmark_group("auc");
    for n in [10_000usize, 100_000] {
        let mut rng = seed::rng(n as u64, "bench-auc");
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let groups: Vec<u64> = (0..n).map(|_| rng.random_range(0..500)).collect();
        group.bench_with_input(BenchmarkId::new("auc", n), &n, |b, _| b.iter(|| auc(&scores, &labels).unwrap()));
        let set = ScoredLabelSet::new(scores.clone(), labels.clone(), groups).unwrap();
        group.bench_with_input(BenchmarkId::new("gauc", n), &n, |b, _| b.iter(|| set.gauc().unwrap()));
    }
    group.finish();
}

fn bench_forward_backward(c: &mut Criterion) {
    let cfg = SyntheticConfig { num_records: 4096, ..SyntheticConfig::default() };
    let (data, _) = generate_synthetic(&cfg).unwrap();
    let records: Vec<&InteractionRecord> = data.gather(&(0..1024).collect::<Vec<_>>());
    let arch = Architecture { embedding_dim: 8, hidden: vec![16] };
    let hyper = HyperParams::default();

    let mut group = c.benchmark_group("loss_forward_backward");
    for kind in [EstimatorKind::Base, EstimatorKind::MultiIpw, EstimatorKind::MultiDr] {
        let net = MultiTaskNet::new(&arch, data.vocab(), &kind.layout(), 0).unwrap();
        group.bench_function(kind.name(), |b| {
            b.iter_batched(
                || net.store().clone(),
                |mut store| {
                    let mut tape = Tape::new();
                    let parts = estimator_loss(
                        kind,
                        *kind.phases().last().unwrap(),
                        &net,
                        net.store(),
                        &mut tape,
                        &records,
                        &hyper,
                        LossContext::default(),
                    )
                    .unwrap();
                    tape.backward(parts.total, &mut store).unwrap();
                    store
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn bench_enumeration(c: &mut Criterion) {
    let mut rng = seed::rng(7, "bench-enum");
    let inst = random_instance(&mut rng, 12);
    let formula = Formula::for_estimator(EstimatorKind::MultiDr, &HyperParams::default(), &inst);
    let mut group = c.benchmark_group("expected_value");
    group.bench_function("enumerate_12", |b| b.iter(|| enumerate_expected_value(&formula, &inst).unwrap()));
    group.bench_function("exact_12", |b| b.iter(|| exact_expected_value(&formula, &inst).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_auc, bench_forward_backward, bench_enumeration);
criterion_main!(benches);
