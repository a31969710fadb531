//! Rayon-backed hot paths against the same code forced onto one thread.
//!
//! Each group runs one workload twice: `parallel` uses the global rayon pool
//! (when the `parallel` feature is on), `sequential` wraps the call in
//! `exec::sequential`. Results are bit-identical; only wall time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use kgsynth::cohort::{encode_record, simulate_cohort, CohortConfig};
use kgsynth::denoiser::{init_params, loss_and_gradient, FilmFeatures, NetConfig, NoiseKey, TrajectoryTensor};
use kgsynth::eval::{count_features, mmd2_unbiased, median_heuristic_bandwidth};
use kgsynth::exec;
use kgsynth::kg::{generate_toy_kg, KgGenConfig, KnowledgeGraph};
use kgsynth::metapath::{compute_profile, MetaPathProfile, ProfileOptions, TokenVocab};
use kgsynth::schedule::ScheduleParams;

struct Fixture {
    kg: KnowledgeGraph,
    vocab: TokenVocab,
    profile: MetaPathProfile,
    batch: Vec<TrajectoryTensor>,
    features: Vec<Vec<f64>>,
}

fn fixture() -> Fixture {
    let kg = generate_toy_kg(&KgGenConfig::reference(1500).with_degree_scale(8.0), 3).unwrap();
    let cohort_cfg = CohortConfig {
        seed: 5,
        ..CohortConfig::default()
    };
    let vocab = TokenVocab::from_kg(&kg, cohort_cfg.n_labs, cohort_cfg.n_meds).unwrap();
    let cohort = simulate_cohort(&kg, &vocab, &cohort_cfg).unwrap();
    let profile = compute_profile(&kg, &cohort_cfg.anchor, &vocab, 0.3, &ProfileOptions::default()).unwrap();
    let batch = cohort.records[..16]
        .iter()
        .map(|r| encode_record(r, &vocab, 16).unwrap())
        .collect();
    let features = cohort.records.iter().map(|r| count_features(r, &vocab)).collect();
    Fixture {
        kg,
        vocab,
        profile,
        batch,
        features,
    }
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn run<R>(sequential: bool, f: impl FnOnce() -> R) -> R {
    if sequential {
        exec::sequential(f)
    } else {
        f()
    }
}

fn bench_gradient(c: &mut Criterion) {
    let fx = fixture();
    let net = NetConfig {
        vocab_size: fx.vocab.len(),
        seq_len: 16,
        hidden: 32,
        blocks: 3,
        heads: 4,
        film_dim: fx.profile.d,
    };
    let params = init_params(net, 1).unwrap();
    let feats = FilmFeatures::new(
        ndarray::ArrayView2::from_shape((fx.vocab.len(), fx.profile.d), &fx.profile.psi_matrix).unwrap(),
    )
    .unwrap();
    let sched = ScheduleParams::new(0.1, 20.0, 0.3).unwrap();
    let keys = NoiseKey::for_step(7, 0, fx.batch.len());
    let mut g = c.benchmark_group("loss_and_gradient_batch16");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                run(seq, || {
                    loss_and_gradient(&params, &fx.batch, &feats, &fx.profile.psi_clipped, &sched, &keys).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn bench_mmd(c: &mut Criterion) {
    let fx = fixture();
    let (x, y) = fx.features.split_at(fx.features.len() / 2);
    let sigma = median_heuristic_bandwidth(&fx.features).unwrap();
    let mut g = c.benchmark_group("mmd2_unbiased");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(seq, || mmd2_unbiased(black_box(x), black_box(y), sigma).unwrap()))
        });
    }
    g.finish();
}

fn bench_profile(c: &mut Criterion) {
    let fx = fixture();
    let anchor = CohortConfig::default().anchor;
    let mut g = c.benchmark_group("metapath_profile");
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run(seq, || compute_profile(&fx.kg, &anchor, &fx.vocab, 0.3, &ProfileOptions::default()).unwrap()))
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_gradient, bench_mmd, bench_profile
}
criterion_main!(benches);
