use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cmaclip::data::{synth_generate, SynthConfig};
use cmaclip::fusion::multitask_loss;
use cmaclip::training::LabeledInputs;
use cmaclip::{FusionModel, ModelConfig, Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [32, 64, 128, 256] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
                black_box(tape.matmul(va, vb).unwrap());
            })
        });
    }
    group.finish();
}

fn model_step(c: &mut Criterion) {
    let cfg = SynthConfig::preset("mrwpa-like", 32, 1).unwrap();
    let pairs = synth_generate(&cfg).unwrap();
    let tasks = cfg.task_specs();
    let model = FusionModel::new(ModelConfig::toy(tasks.clone()), 1).unwrap();
    let data = LabeledInputs::from_pairs(&pairs, &tasks, &model.config.encoder).unwrap();
    let inputs: Vec<_> = data.inputs.iter().collect();

    c.bench_function("forward batch 32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.store.bind_frozen(&mut tape);
            black_box(model.forward(&mut tape, &p, &inputs, false).unwrap());
        })
    });
    c.bench_function("forward and backward batch 32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let out = model.forward(&mut tape, &p, &inputs, false).unwrap();
            let loss = multitask_loss(&mut tape, &out.logits, &data.labels).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.len());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, model_step
}
criterion_main!(benches);
