use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semaffine_core::harness::{prepare_scene, total_loss, LossWeights};
use semaffine_core::hierarchy::build_hierarchy;
use semaffine_core::model::{model_forward, Model, ModelConfig};
use semaffine_core::nn::{AttentionParams, ParamGroup, ParamStore};
use semaffine_core::scene::{generate_scene, SceneSpec};
use semaffine_core::{Tape, Tensor};

fn small_model() -> ModelConfig {
    ModelConfig {
        dims: vec![16, 24, 32, 32],
        d_h: 32,
        d_m: 32,
        heads: 4,
        isam_depth: 2,
        esam_depth: 4,
        base_voxel: 0.1,
        ..ModelConfig::default()
    }
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::uniform(&[2048, 32], 1.0, &mut rng);
    let b = Tensor::uniform(&[32, 32], 1.0, &mut rng);
    c.bench_function("matmul 2048x32x32 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let x = t.param(a.clone());
            let w = t.param(b.clone());
            let y = t.matmul(x, w).unwrap();
            let s = t.sum(y);
            black_box(t.backward(s).unwrap());
        })
    });
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, &mut rng, "mha", ParamGroup::Attention, 32, 4).unwrap();
    let q = Tensor::uniform(&[4, 32], 1.0, &mut rng);
    let kv = Tensor::uniform(&[256, 32], 1.0, &mut rng);
    c.bench_function("attention 4 queries x 256 tokens fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let bind = store.bind(&mut t, true);
            let qv = t.param(q.clone());
            let kvv = t.param(kv.clone());
            let y = p.forward(&mut t, &bind, qv, kvv).unwrap();
            let s = t.sum(y);
            black_box(t.backward(s).unwrap());
        })
    });
}

fn hierarchy(c: &mut Criterion) {
    let cloud = generate_scene(&SceneSpec::default(), 0).unwrap();
    c.bench_function("voxel hierarchy 2048 points", |bench| {
        bench.iter(|| black_box(build_hierarchy(&cloud.coords, 0.1, 4).unwrap()))
    });
}

fn model(c: &mut Criterion) {
    let cfg = small_model();
    let cloud = generate_scene(&SceneSpec::default(), 0).unwrap();
    let scene = prepare_scene(&cloud, &cfg).unwrap();
    let model = Model::new(cfg, 0).unwrap();
    let w = LossWeights {
        final_ce: 1.0,
        mid_bce: 1.0,
    };
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward 2048 points", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let bind = model.store.bind(&mut t, false);
            black_box(model_forward(&mut t, &bind, &model, &scene.input).unwrap().final_logits);
        })
    });
    group.bench_function("forward+backward 2048 points", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let bind = model.store.bind(&mut t, true);
            let out = model_forward(&mut t, &bind, &model, &scene.input).unwrap();
            let loss = total_loss(&mut t, &out, &scene.labels, &scene.shadow, w).unwrap();
            black_box(t.backward(loss.total).unwrap());
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, attention, hierarchy, model);
criterion_main!(benches);
