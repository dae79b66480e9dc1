//! Passthrough merging of layer-wise checkpoints.
//!
//! A [`MergePlan`] maps every target module to one (source checkpoint,
//! source module) pair. Executing it copies weight tensors and optimizer
//! group slices byte for byte: each rank's output shard is assembled from
//! the same rank's shard of every source, so no resharding happens. Each
//! source shard file is read once per rank.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use crate::container::TensorContainer;
use crate::error::{Result, TailorError};
use crate::model::{enumerate_modules, tensors_of, ModelSpec, ModuleId};
use crate::optim::{build_group_table, group_indices_for, GroupLayout, ParameterGroupTable};
use crate::recipe::{ConfigSource, MergeRecipe};
use crate::store::{
    commit_staging, group_key, rank_file, read_checkpoint, read_checkpoint_meta, staging_dir, to_json_bytes,
    write_bytes, CheckpointMeta, GroupMeta, OptimMeta, Provenance, SaveManifest, ShardGeometry, CONFIG_FILE,
    MANIFEST_FILE, OPTIM_META_FILE, STATE_FIELDS, TRAINER_STATE_FILE, WEIGHTS_FILE,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleAssignment {
    pub target: ModuleId,
    pub source: PathBuf,
    pub source_module: ModuleId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupCopy {
    pub source: PathBuf,
    pub source_group: usize,
    pub target_group: usize,
}

#[derive(Debug, Clone)]
pub struct MergePlan {
    pub spec: ModelSpec,
    pub geometry: ShardGeometry,
    /// One entry per target module, canonical order.
    pub modules: Vec<ModuleAssignment>,
    /// One entry per target group, ascending target index.
    pub group_copies: Vec<GroupCopy>,
    pub config_source: PathBuf,
    /// Metadata of every source the plan reads from.
    pub sources: BTreeMap<PathBuf, CheckpointMeta>,
}

impl MergePlan {
    pub fn table(&self) -> ParameterGroupTable {
        build_group_table(&self.spec)
    }
}

/// Read the metadata of every checkpoint a recipe mentions.
pub fn load_sources(recipe: &MergeRecipe) -> Result<BTreeMap<PathBuf, CheckpointMeta>> {
    recipe
        .referenced_paths()
        .into_iter()
        .map(|p| read_checkpoint_meta(&p).map(|m| (p, m)))
        .collect()
}

/// Resolve a recipe against its sources' metadata. Checks geometry, module
/// coverage and source availability; performs no I/O.
pub fn resolve_plan(recipe: &MergeRecipe, sources: &BTreeMap<PathBuf, CheckpointMeta>) -> Result<MergePlan> {
    let first = sources
        .values()
        .next()
        .ok_or_else(|| TailorError::recipe("<root>", "recipe names no checkpoints"))?;
    let spec = first.spec;
    let geometry = ShardGeometry::new(recipe.num_ranks)?;
    for meta in sources.values() {
        if !meta.spec.same_geometry(&spec) {
            return Err(TailorError::Geometry(format!(
                "{} and {} describe different models",
                meta.path.display(),
                first.path.display()
            )));
        }
        if meta.optim_meta.num_ranks != recipe.num_ranks {
            return Err(TailorError::Geometry(format!(
                "{} has {} ranks, recipe expects {}",
                meta.path.display(),
                meta.optim_meta.num_ranks,
                recipe.num_ranks
            )));
        }
        if meta.optim_meta.layout != GroupLayout::LayerAligned {
            return Err(TailorError::Geometry(format!(
                "{} uses coarse parameter groups and cannot be split",
                meta.path.display()
            )));
        }
    }
    let l = spec.num_layers;

    let mut assigned: BTreeMap<ModuleId, (PathBuf, ModuleId)> = BTreeMap::new();
    for (i, slice) in recipe.slices.iter().enumerate() {
        for (src, dst) in slice.pairs() {
            if src >= l {
                return Err(TailorError::recipe(
                    format!("slices[{i}].layers"),
                    format!("layer {src} out of range for {l} layers"),
                ));
            }
            let field = if slice.targets.is_some() { "targets" } else { "layers" };
            if dst >= l {
                return Err(TailorError::recipe(
                    format!("slices[{i}].{field}"),
                    format!("target layer {dst} out of range for {l} layers"),
                ));
            }
            let target = ModuleId::Layer(dst);
            if assigned
                .insert(target, (slice.source.clone(), ModuleId::Layer(src)))
                .is_some()
            {
                return Err(TailorError::recipe(
                    format!("slices[{i}].{field}"),
                    format!("target layer {dst} is assigned more than once"),
                ));
            }
        }
    }
    for (field, module, path) in recipe.aux.entries() {
        if spec.check_module(module).is_err() {
            return Err(TailorError::recipe(field, "model is weight-tied and has no lm_head"));
        }
        assigned.insert(module, (path.clone(), module));
    }
    let mut uncovered = Vec::new();
    for module in enumerate_modules(&spec) {
        if assigned.contains_key(&module) {
            continue;
        }
        match &recipe.base_checkpoint {
            Some(base) => {
                assigned.insert(module, (base.clone(), module));
            }
            None => uncovered.push(module.to_string()),
        }
    }
    if !uncovered.is_empty() {
        return Err(TailorError::recipe(
            "base_checkpoint",
            format!("no source for {} and no base checkpoint", uncovered.join(", ")),
        ));
    }

    let table = build_group_table(&spec);
    let mut modules = Vec::with_capacity(assigned.len());
    let mut group_copies = Vec::with_capacity(table.len());
    let mut used = BTreeMap::new();
    for (target, (source, source_module)) in assigned {
        let meta = &sources[&source];
        if !meta.manifest.contains(source_module) {
            return Err(TailorError::SourceLacksModule {
                module: source_module,
                path: source,
            });
        }
        for (sg, tg) in group_indices_for(&table, source_module)?
            .into_iter()
            .zip(group_indices_for(&table, target)?)
        {
            if table.groups[sg].element_count != table.groups[tg].element_count {
                return Err(TailorError::Geometry(format!("group {sg} cannot fill group {tg}")));
            }
            group_copies.push(GroupCopy {
                source: source.clone(),
                source_group: sg,
                target_group: tg,
            });
        }
        used.insert(source.clone(), meta.clone());
        modules.push(ModuleAssignment {
            target,
            source,
            source_module,
        });
    }
    group_copies.sort_by_key(|c| c.target_group);
    debug_assert!(group_copies.iter().enumerate().all(|(i, c)| c.target_group == i));
    if group_copies.len() != table.len() {
        return Err(TailorError::Consistency(format!(
            "plan covers {} of {} groups",
            group_copies.len(),
            table.len()
        )));
    }

    let config_source = match &recipe.config_from {
        ConfigSource::Latest => used
            .values()
            .max_by(|a, b| a.step().cmp(&b.step()).then_with(|| a.path.cmp(&b.path)))
            .expect("at least one source")
            .path
            .clone(),
        ConfigSource::Path(p) => p.clone(),
    };
    let config_meta = sources
        .get(&config_source)
        .ok_or_else(|| TailorError::MissingArtifact(config_source.clone()))?;
    used.insert(config_source.clone(), config_meta.clone());

    Ok(MergePlan {
        spec,
        geometry,
        modules,
        group_copies,
        config_source,
        sources: used,
    })
}

/// Counts files opened while executing a plan.
#[derive(Debug, Default)]
pub struct IoCounter {
    pub shard_reads: AtomicUsize,
    pub weight_reads: AtomicUsize,
    pub shard_writes: AtomicUsize,
}

/// Weight container of the merged model.
pub fn merge_weights(plan: &MergePlan, io: &IoCounter) -> Result<TensorContainer> {
    let mut cache: BTreeMap<&Path, TensorContainer> = BTreeMap::new();
    let mut out = TensorContainer::new();
    for a in &plan.modules {
        if !cache.contains_key(a.source.as_path()) {
            let c = TensorContainer::read(&a.source.join(WEIGHTS_FILE))?;
            io.weight_reads.fetch_add(1, Ordering::Relaxed);
            cache.insert(&a.source, c);
        }
        let container = &cache[a.source.as_path()];
        let src = tensors_of(&plan.spec, a.source_module)?;
        let dst = tensors_of(&plan.spec, a.target)?;
        for (s, d) in src.iter().zip(&dst) {
            let entry = container.get(&s.name).ok_or_else(|| {
                TailorError::corrupt(a.source.join(WEIGHTS_FILE), format!("missing tensor {}", s.name))
            })?;
            if entry.shape != d.shape {
                return Err(TailorError::Geometry(format!(
                    "{} has shape {:?}, {} needs {:?}",
                    s.name, entry.shape, d.name, d.shape
                )));
            }
            out.tensors.insert(d.name.clone(), entry.clone());
        }
    }
    Ok(out)
}

fn merge_rank(plan: &MergePlan, rank: usize, io: &IoCounter) -> Result<TensorContainer> {
    let mut loaded: BTreeMap<&Path, TensorContainer> = BTreeMap::new();
    for copy in &plan.group_copies {
        if !loaded.contains_key(copy.source.as_path()) {
            let c = TensorContainer::read(&copy.source.join(rank_file(rank)))?;
            io.shard_reads.fetch_add(1, Ordering::Relaxed);
            loaded.insert(&copy.source, c);
        }
    }
    let mut out = TensorContainer::new();
    for copy in &plan.group_copies {
        let src = &loaded[copy.source.as_path()];
        let meta = plan.sources[&copy.source]
            .group_meta(copy.source_group)
            .ok_or_else(|| TailorError::MissingArtifact(copy.source.join(OPTIM_META_FILE)))?;
        for field in STATE_FIELDS {
            let key = group_key(copy.source_group, field);
            let entry = src.get(&key).ok_or_else(|| {
                TailorError::corrupt(copy.source.join(rank_file(rank)), format!("missing tensor {key}"))
            })?;
            if entry.shape != [meta.shard_length] {
                return Err(TailorError::Geometry(format!(
                    "{key} of {} has shape {:?}, expected [{}]",
                    copy.source.display(),
                    entry.shape,
                    meta.shard_length
                )));
            }
            out.tensors.insert(group_key(copy.target_group, field), entry.clone());
        }
    }
    Ok(out)
}

/// Write the merged rank shards and `optim_meta.json` into `out_dir`.
/// Ranks are processed by a pool of `workers` threads; the bytes written do
/// not depend on the worker count.
pub fn merge_optimizer_shards(plan: &MergePlan, out_dir: &Path, workers: usize, io: &IoCounter) -> Result<OptimMeta> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TailorError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        (0..plan.geometry.num_ranks).into_par_iter().try_for_each(|r| {
            let container = merge_rank(plan, r, io)?;
            let path = out_dir.join(rank_file(r));
            write_bytes(&path, &container.to_bytes())?;
            io.shard_writes.fetch_add(1, Ordering::Relaxed);
            Ok(())
        })
    })?;

    let table = plan.table();
    let config_meta = &plan.sources[&plan.config_source];
    let groups = plan
        .group_copies
        .iter()
        .map(|c| {
            let src = plan.sources[&c.source]
                .group_meta(c.source_group)
                .ok_or_else(|| TailorError::MissingArtifact(c.source.join(OPTIM_META_FILE)))?;
            let entry = &table.groups[c.target_group];
            Ok(GroupMeta {
                index: c.target_group,
                owner: entry.owner,
                decay_class: entry.decay_class,
                ..src.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = OptimMeta {
        layout: GroupLayout::LayerAligned,
        num_ranks: plan.geometry.num_ranks,
        t: config_meta.trainer_state.optimizer_t,
        groups,
    };
    write_bytes(&out_dir.join(OPTIM_META_FILE), &to_json_bytes(&meta))?;
    Ok(meta)
}

pub const MERGE_STRATEGY: &str = "merge";

/// Copy config and trainer state from the plan's config source and write a
/// manifest listing every module with its provenance.
pub fn copy_config(plan: &MergePlan, out_dir: &Path) -> Result<SaveManifest> {
    for file in [CONFIG_FILE, TRAINER_STATE_FILE] {
        let from = plan.config_source.join(file);
        let bytes = fs::read(&from).map_err(|_| TailorError::MissingArtifact(from.clone()))?;
        write_bytes(&out_dir.join(file), &bytes)?;
    }
    let config_meta = &plan.sources[&plan.config_source];
    let provenance = plan
        .modules
        .iter()
        .map(|a| {
            (
                a.target.to_string(),
                Provenance {
                    source: a.source.display().to_string(),
                    step: plan.sources[&a.source].step(),
                },
            )
        })
        .collect();
    let manifest = SaveManifest {
        step: config_meta.step(),
        strategy: MERGE_STRATEGY.to_string(),
        modules: plan.modules.iter().map(|a| a.target).collect(),
        provenance: Some(provenance),
    };
    write_bytes(&out_dir.join(MANIFEST_FILE), &to_json_bytes(&manifest))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct MergeReport {
    pub output: PathBuf,
    pub sources: usize,
    pub num_ranks: usize,
    pub shard_files_read: usize,
    pub weight_files_read: usize,
    pub shard_files_written: usize,
    #[serde(serialize_with = "as_secs")]
    pub elapsed: Duration,
}

fn as_secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

/// Execute `plan` into `out`, which must not exist. The result is written to
/// a staging directory, re-read and validated, then moved into place; on
/// any error nothing is left at `out`.
pub fn execute_plan(plan: &MergePlan, out: &Path, workers: usize) -> Result<MergeReport> {
    let started = Instant::now();
    let io = IoCounter::default();
    let staging = staging_dir(out)?;
    let result = (|| {
        let weights = merge_weights(plan, &io)?;
        weights.write(&staging.join(WEIGHTS_FILE))?;
        merge_optimizer_shards(plan, &staging, workers, &io)?;
        copy_config(plan, &staging)?;
        let merged = read_checkpoint(&staging)?;
        merged.validate()?;
        if !merged.is_complete() {
            return Err(TailorError::Consistency("merged checkpoint is incomplete".into()));
        }
        Ok(())
    })();
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    commit_staging(&staging, out)?;
    Ok(MergeReport {
        output: out.to_path_buf(),
        sources: plan.sources.len(),
        num_ranks: plan.geometry.num_ranks,
        shard_files_read: io.shard_reads.load(Ordering::Relaxed),
        weight_files_read: io.weight_reads.load(Ordering::Relaxed),
        shard_files_written: io.shard_writes.load(Ordering::Relaxed),
        elapsed: started.elapsed(),
    })
}

/// Load sources, resolve and execute `recipe` in one go.
pub fn merge(recipe: &MergeRecipe, out: &Path, workers: Option<usize>) -> Result<MergeReport> {
    let sources = load_sources(recipe)?;
    let plan = resolve_plan(recipe, &sources)?;
    execute_plan(&plan, out, workers.unwrap_or(recipe.num_ranks))
}
