use coldstart_core::numerics::seeded_rng;
use coldstart_core::qnet::QTarget;
use coldstart_core::{Head, ModelKind};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

fn states(n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seeded_rng(3);
    (0..n)
        .map(|_| {
            (0..dim / 2)
                .flat_map(|_| {
                    let asked = rng.random_bool(0.03);
                    let r = if asked {
                        rng.random_range(0..=5) as f64 / 5.0
                    } else {
                        0.0
                    };
                    [f64::from(u8::from(asked)), r]
                })
                .collect()
        })
        .collect()
}

fn dqn(c: &mut Criterion) {
    let setup = coldstart_bench::setup();
    let bundle = coldstart_bench::bundle(&setup, ModelKind::QRating);
    let xs = states(32, bundle.dqn.state_dim());
    let targets: Vec<QTarget> = xs
        .iter()
        .map(|_| QTarget {
            values: vec![1.0; bundle.dqn.action_count()],
            supervised: (0..bundle.dqn.action_count()).map(|a| a % 7 == 0).collect(),
        })
        .collect();

    c.bench_function("dqn/q_values", |b| b.iter(|| bundle.dqn.q_values(&xs[0]).unwrap()));
    c.bench_function("dqn/update_32", |b| {
        let mut rng = seeded_rng(0);
        let batch: Vec<(&[f64], &QTarget)> = xs.iter().map(Vec::as_slice).zip(&targets).collect();
        b.iter_batched_ref(
            || bundle.dqn.clone(),
            |net| net.update(&batch, &mut rng).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let Head::Rating(head) = &bundle.head else {
        unreachable!()
    };
    let terminal = bundle
        .action_space
        .initial_state()
        .step(0, 4)
        .unwrap()
        .step(5, 0)
        .unwrap()
        .step(9, 2)
        .unwrap();
    c.bench_function("rating_head/predict_all", |b| {
        b.iter(|| bundle.predict_all(&terminal).unwrap())
    });
    c.bench_function("rating_head/user_embedding", |b| {
        b.iter(|| head.user_embedding(&xs[0]).unwrap())
    });
}

criterion_group!(benches, dqn);
criterion_main!(benches);
