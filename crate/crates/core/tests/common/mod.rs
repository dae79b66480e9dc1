#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tailor_core::recipe::{AuxSources, ConfigSource, LayerSelection, MergeRecipe, SliceSpec};
use tailor_core::model::{enumerate_modules, DecayClass, ModelSpec, ModuleId};
use tailor_core::optim::{build_group_table, AdamHyperparams, GroupLayout, OptimizerState};
use tailor_core::store::{write_checkpoint, Bf16Tensor, Checkpoint, ShardGeometry, TrainerState};
use tailor_core::trainer::{counter_hash, unit_uniform};

/// Small deterministic generator for test fixtures.
pub struct Rng(pub u64, u64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(seed, 0)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.1 += 1;
        counter_hash(self.0, 0xC0FFEE, self.1)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn f32(&mut self) -> f32 {
        unit_uniform(self.next_u64())
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }
}

/// Full layer-aligned state with arbitrary values (second moments >= 0).
pub fn random_state(spec: &ModelSpec, seed: u64, t: u64) -> OptimizerState {
    let table = build_group_table(spec);
    let mut state = OptimizerState::zeros(&table, AdamHyperparams::default());
    let mut rng = Rng::new(seed);
    for g in state.groups.values_mut() {
        for i in 0..g.len() {
            g.master[i] = rng.f32() * 3.0;
            g.exp_avg[i] = rng.f32() * 1e-2;
            g.exp_avg_sq[i] = rng.f32().abs() * 1e-4;
        }
    }
    state.t = t;
    state
}

pub fn trainer_state(step: u64, strategy: &str) -> TrainerState {
    TrainerState {
        step,
        lr: AdamHyperparams::default().lr,
        optimizer_t: step,
        strategy: strategy.to_string(),
        checkpoint_counter: 1,
        rng_seed: 7,
    }
}

/// Write a checkpoint of `modules` holding random state.
pub fn write_random_checkpoint(
    dir: &Path,
    spec: &ModelSpec,
    ranks: usize,
    modules: &[ModuleId],
    seed: u64,
    step: u64,
) -> Checkpoint {
    let state = random_state(spec, seed, step);
    let ckpt = Checkpoint::from_state(
        *spec,
        &state,
        modules,
        trainer_state(step, "full"),
        ShardGeometry::new(ranks).unwrap(),
    )
    .unwrap();
    write_checkpoint(dir, &ckpt).unwrap();
    ckpt
}

/// Every file below `dir` keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Group holding `module`'s `class` tensors, found by scanning the table.
pub fn find_group(spec: &ModelSpec, module: ModuleId, class: DecayClass) -> Option<usize> {
    build_group_table(spec)
        .groups
        .iter()
        .find(|g| g.owner == Some(module) && g.decay_class == class)
        .map(|g| g.index)
}

fn rename_tensor(name: &str, from: ModuleId, to: ModuleId) -> String {
    match (from, to) {
        (ModuleId::Layer(a), ModuleId::Layer(b)) => {
            name.replacen(&format!("model.layers.{a}."), &format!("model.layers.{b}."), 1)
        }
        _ => name.to_string(),
    }
}

/// Brute-force merged state: for each target module copy the source's
/// tensors and both of its group states, found by name and table scan.
pub fn assemble_oracle(
    spec: &ModelSpec,
    assignment: &BTreeMap<ModuleId, (Checkpoint, ModuleId)>,
) -> (BTreeMap<String, Bf16Tensor>, OptimizerState) {
    let mut weights = BTreeMap::new();
    let mut groups = BTreeMap::new();
    for (&target, (src, src_module)) in assignment {
        for (name, tensor) in &src.weights {
            let prefix = match src_module {
                ModuleId::Layer(i) => format!("model.layers.{i}."),
                ModuleId::EmbedTokens => "model.embed_tokens.".into(),
                ModuleId::Norm => "model.norm.".into(),
                ModuleId::LmHead => "lm_head.".into(),
            };
            if name.starts_with(&prefix) {
                weights.insert(rename_tensor(name, *src_module, target), tensor.clone());
            }
        }
        for class in [DecayClass::NoDecay, DecayClass::Decay] {
            if let (Some(sg), Some(tg)) = (find_group(spec, *src_module, class), find_group(spec, target, class)) {
                groups.insert(tg, src.optim.groups[&sg].clone());
            }
        }
    }
    let t = 0;
    (
        weights,
        OptimizerState {
            layout: GroupLayout::LayerAligned,
            t,
            groups,
        },
    )
}

pub fn all_modules(spec: &ModelSpec) -> Vec<ModuleId> {
    enumerate_modules(spec)
}

/// Recipe skeleton with no base checkpoint and `latest` configuration.
pub fn base_less(ranks: usize) -> MergeRecipe {
    MergeRecipe {
        base_checkpoint: None,
        config_from: ConfigSource::Latest,
        ..MergeRecipe::identity(PathBuf::new(), ranks)
    }
}

/// Write `k` sources with random module subsets, then a random complete
/// assignment drawn only from modules each source holds.
pub fn random_merge(rng: &mut Rng, root: &Path) -> (ModelSpec, MergeRecipe, BTreeMap<ModuleId, (Checkpoint, ModuleId)>) {
    let spec = ModelSpec::desk(1 + rng.below(8)).tied(rng.coin());
    let ranks = 1 + rng.below(4);
    let k = 1 + rng.below(3);
    let modules = all_modules(&spec);
    // Every module is owned by at least one source.
    let mut holdings = vec![Vec::new(); k];
    for &m in &modules {
        holdings[rng.below(k)].push(m);
        for h in holdings.iter_mut() {
            if rng.below(3) == 0 && !h.contains(&m) {
                h.push(m);
            }
        }
    }
    let sources: Vec<(PathBuf, Checkpoint)> = holdings
        .iter()
        .enumerate()
        .map(|(i, held)| {
            let dir = root.join(format!("checkpoint-{}", 10 * (i + 1)));
            let held = if held.is_empty() { vec![modules[0]] } else { held.clone() };
            let c = write_random_checkpoint(&dir, &spec, ranks, &held, rng.next_u64(), 10 * (i as u64 + 1));
            (dir, c)
        })
        .collect();

    let layers: Vec<usize> = (0..spec.num_layers).collect();
    let mut assignment = BTreeMap::new();
    let mut slices = Vec::new();
    let mut aux = AuxSources::default();
    for &m in &modules {
        let candidates: Vec<(usize, ModuleId)> = match m {
            ModuleId::Layer(_) => sources
                .iter()
                .enumerate()
                .flat_map(|(s, (_, c))| {
                    layers
                        .iter()
                        .filter(|&&i| c.manifest.contains(ModuleId::Layer(i)))
                        .map(move |&i| (s, ModuleId::Layer(i)))
                })
                .collect(),
            _ => sources
                .iter()
                .enumerate()
                .filter(|(_, (_, c))| c.manifest.contains(m))
                .map(|(s, _)| (s, m))
                .collect(),
        };
        let (s, src_module) = candidates[rng.below(candidates.len())];
        assignment.insert(m, (sources[s].1.clone(), src_module));
        let path = sources[s].0.clone();
        match (m, src_module) {
            (ModuleId::Layer(t), ModuleId::Layer(from)) => slices.push(SliceSpec {
                source: path,
                layers: LayerSelection::List(vec![from]),
                targets: Some(vec![t]),
            }),
            (ModuleId::EmbedTokens, _) => aux.embed_tokens = Some(path),
            (ModuleId::Norm, _) => aux.norm = Some(path),
            (ModuleId::LmHead, _) => aux.lm_head = Some(path),
            _ => unreachable!(),
        }
    }
    let recipe = MergeRecipe {
        num_ranks: ranks,
        slices,
        aux,
        ..base_less(ranks)
    };
    (spec, recipe, assignment)
}

