use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use tailor_bench::{bench_spec, parity_sources, values, warm_state, warm_trainer};
use tailor_core::bf16::round_slice;
use tailor_core::merge::{execute_plan, load_sources, resolve_plan};
use tailor_core::store::{shard_group, unshard_group, Checkpoint, ShardGeometry};
use tailor_core::{enumerate_modules, GroupLayout};

fn sharding(c: &mut Criterion) {
    let len = 1 << 20;
    let data = values(len, 1);
    let geom = ShardGeometry::new(8).unwrap();
    let mut g = c.benchmark_group("shard");
    g.throughput(Throughput::Bytes(4 * len as u64));
    g.bench_function("shard 1M over 8", |b| b.iter(|| shard_group(black_box(&data), len, geom).unwrap()));
    let shards = shard_group(&data, len, geom).unwrap();
    g.bench_function("unshard 1M over 8", |b| b.iter(|| unshard_group(black_box(&shards), len).unwrap()));
    g.finish();
}

fn bf16(c: &mut Criterion) {
    let data = values(1 << 20, 2);
    let mut g = c.benchmark_group("bf16");
    g.throughput(Throughput::Elements(data.len() as u64));
    g.bench_function("round 1M", |b| b.iter(|| round_slice(black_box(&data))));
    g.finish();
}

fn adamw(c: &mut Criterion) {
    let mut g = c.benchmark_group("train step");
    for layout in [GroupLayout::LayerAligned, GroupLayout::Coarse] {
        let trainer = warm_trainer(bench_spec(), layout);
        g.bench_function(format!("{layout:?}"), |b| {
            b.iter_batched(
                || trainer.clone(),
                |mut t| t.step_once().unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn container(c: &mut Criterion) {
    let spec = bench_spec();
    let state = warm_state(spec);
    let ts = tailor_core::store::TrainerState {
        step: 3,
        lr: 1e-3,
        optimizer_t: 3,
        strategy: "full".into(),
        checkpoint_counter: 1,
        rng_seed: 0,
    };
    let ckpt = Checkpoint::from_state(spec, &state, &enumerate_modules(&spec), ts, ShardGeometry::new(4).unwrap())
        .unwrap();
    c.bench_function("validate full checkpoint", |b| b.iter(|| ckpt.validate().unwrap()));
    c.bench_function("write full checkpoint", |b| {
        b.iter_batched(
            || tempfile::tempdir().unwrap(),
            |tmp| tailor_core::write_checkpoint(&tmp.path().join("c"), &ckpt).unwrap(),
            BatchSize::PerIteration,
        )
    });
}

fn merging(c: &mut Criterion) {
    let spec = bench_spec();
    let src = tempfile::tempdir().unwrap();
    let recipe = parity_sources(src.path(), spec, 4);
    let plan = resolve_plan(&recipe, &load_sources(&recipe).unwrap()).unwrap();
    let mut g = c.benchmark_group("merge parity");
    for workers in [1, 4] {
        g.bench_function(format!("{workers} workers"), |b| {
            b.iter_batched(
                || tempfile::tempdir().unwrap(),
                |tmp| execute_plan(&plan, &tmp.path().join("m"), workers).unwrap(),
                BatchSize::PerIteration,
            )
        });
    }
    g.finish();
}

criterion_group!(benches, sharding, bf16, adamw, container, merging);
criterion_main!(benches);
