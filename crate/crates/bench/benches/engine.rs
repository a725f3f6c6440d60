use bapo_bench::{fixture, primed_batch, rng, rollout};
use bapo_core::{exact_tv, run, surrogate_gradient, Algorithm, ObjectiveConfig, PromptId, TrainerConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

fn engine(c: &mut Criterion) {
    let f = fixture();
    let (_, batch) = primed_batch(&f);
    let obj = ObjectiveConfig::default();

    c.bench_function("rollout 64 groups", |b| {
        let mut r = rng(4);
        b.iter(|| rollout(&f.universe, &f.policy, 64, &mut r))
    });
    c.bench_function("batch construct", |b| {
        b.iter_batched(
            || (primed_batch(&f).0, f.fresh.clone()),
            |(mut ctor, fresh)| {
                ctor.construct(fresh, 2, &f.policy, &f.universe, &mut rng(5), &mut rng(6))
                    .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("surrogate gradient", |b| {
        b.iter(|| surrogate_gradient(&f.shifted, black_box(&batch), Some(&f.policy), &obj).unwrap())
    });
    c.bench_function("exact tv all prompts", |b| {
        b.iter(|| {
            (0..f.universe.len())
                .map(|p| exact_tv(&f.policy, &f.shifted, PromptId(p)).unwrap())
                .sum::<f64>()
        })
    });
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("bapo 20 steps", |b| {
        let cfg = TrainerConfig {
            algorithm: Algorithm::Bapo,
            total_steps: 20,
            ..TrainerConfig::default()
        };
        b.iter(|| run(&cfg, &f.universe).unwrap())
    });
    g.finish();
}

criterion_group!(benches, engine);
criterion_main!(benches);
