use std::hint::black_box;
use std::sync::Arc;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};

use lift3d::autodiff::{Rulebook, Tape, Tensor};
use lift3d::camera::{rasterize, Shading};
use lift3d::diffusion::{sample_stage1, train_example, Stage, StageConfig, StageModel};
use lift3d::experiment::reference_mesh;
use lift3d::model::ConditionInputs;
use lift3d::texture::{refine_texture, RefineConfig};
use lift3d::volume::compute_sdf_volume;
use lift3d_bench::default_sample;

fn geometry(c: &mut Criterion) {
    let s = default_sample();
    c.bench_function("sdf_volume_32", |b| b.iter(|| compute_sdf_volume(black_box(&s.mesh), &s.coarse_spec()).unwrap()));
    c.bench_function("rasterize_128", |b| {
        b.iter(|| rasterize(black_box(&s.mesh), &s.poses.targets[0], Shading::Unlit).unwrap())
    });
}

fn sparse_conv(c: &mut Criterion) {
    let s = default_sample();
    let idx = &s.fine_sparse.indices;
    let rules = Arc::new(Rulebook::submanifold(idx).unwrap());
    let ch = 32;
    let x = Tensor::new(&[idx.len(), ch], vec![0.1f32; idx.len() * ch]).unwrap();
    let w = Tensor::new(&[ch, ch, 3, 3, 3], vec![0.01f32; ch * ch * 27]).unwrap();
    c.bench_function("sparse_conv_fwd_bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.sparse_conv(xv, wv, None, rules.clone()).unwrap();
            let l = tape.sum(y);
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn diffusion(c: &mut Criterion) {
    let s = default_sample();
    let mut g = c.benchmark_group("diffusion");
    g.sample_size(10).measurement_time(Duration::from_secs(20));
    for stage in [Stage::Coarse, Stage::Fine] {
        let spec = if stage == Stage::Coarse { s.coarse_spec() } else { s.fine_spec() };
        let mut model = StageModel::new(stage, StageConfig::for_stage(stage), spec, 0).unwrap();
        let mut seed = 0;
        g.bench_function(format!("train_example_stage{}", stage.number()), |b| {
            b.iter(|| {
                seed += 1;
                train_example(&mut model, &s, seed).unwrap()
            })
        });
    }
    let model = StageModel::new(Stage::Coarse, StageConfig::for_stage(Stage::Coarse), s.coarse_spec(), 0).unwrap();
    let inputs = ConditionInputs {
        views: &s.views,
        poses: &s.poses.targets,
        input_view: &s.input_view,
    };
    g.bench_function("sample_stage1_5_steps", |b| b.iter(|| sample_stage1(&model, &inputs, 0, 5)));
    g.finish();
}

fn texture(c: &mut Criterion) {
    let s = default_sample();
    let mesh = reference_mesh(&s).unwrap();
    let cfg = RefineConfig {
        iters: 20,
        ..RefineConfig::default()
    };
    let mut g = c.benchmark_group("texture");
    g.sample_size(10);
    g.bench_function("refine_20_iters", |b| {
        b.iter(|| refine_texture(&mesh, &s.views, &s.poses.targets, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, geometry, sparse_conv, diffusion, texture);
criterion_main!(benches);
