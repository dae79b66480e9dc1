//! Fixtures shared by the benchmarks.

use std::path::{Path, PathBuf};

use tailor_core::recipe::{AuxSources, ConfigSource, LayerSelection, MergeRecipe, SliceSpec};
use tailor_core::trainer::{counter_hash, unit_uniform};
use tailor_core::{
    train, GroupLayout, ModelSpec, OptimizerState, StrategyConfig, StrategyKind, Trainer, TrainerConfig,
};

/// Mid-sized model: large enough that payload dominates, small enough to
/// train in a benchmark setup.
pub fn bench_spec() -> ModelSpec {
    ModelSpec {
        num_layers: 8,
        hidden_dim: 64,
        ffn_dim: 128,
        vocab_size: 256,
        ..ModelSpec::default()
    }
}

pub fn values(len: usize, seed: u64) -> Vec<f32> {
    (0..len as u64).map(|i| unit_uniform(counter_hash(seed, 0, i))).collect()
}

/// Trainer state after a few steps, in the given group layout.
pub fn warm_trainer(spec: ModelSpec, layout: GroupLayout) -> Trainer {
    let mut cfg = TrainerConfig::new(spec, StrategyConfig::new(StrategyKind::Full, 1), 4);
    cfg.layout = layout;
    let mut t = Trainer::new(&cfg).expect("valid config");
    t.run_until(3, None).expect("training runs");
    t
}

pub fn warm_state(spec: ModelSpec) -> OptimizerState {
    warm_trainer(spec, GroupLayout::LayerAligned).state().clone()
}

/// A parity run with two checkpoints under `root/run` and the recipe that
/// merges them.
pub fn parity_sources(root: &Path, spec: ModelSpec, ranks: usize) -> MergeRecipe {
    let run = root.join("run");
    let cfg = TrainerConfig::new(spec, StrategyConfig::new(StrategyKind::Parity, 2), ranks);
    train(&cfg, 4, &run).expect("training runs");
    let a: PathBuf = run.join("checkpoint-2");
    let b: PathBuf = run.join("checkpoint-4");
    let l = spec.num_layers;
    MergeRecipe {
        base_checkpoint: None,
        slices: vec![
            SliceSpec {
                source: a.clone(),
                layers: LayerSelection::List((0..l).step_by(2).collect()),
                targets: None,
            },
            SliceSpec {
                source: b.clone(),
                layers: LayerSelection::List((1..l).step_by(2).collect()),
                targets: None,
            },
        ],
        aux: AuxSources {
            embed_tokens: Some(b),
            norm: Some(a.clone()),
            lm_head: (!spec.weight_tied).then_some(a),
        },
        config_from: ConfigSource::Latest,
        ..MergeRecipe::identity(PathBuf::new(), ranks)
    }
}
