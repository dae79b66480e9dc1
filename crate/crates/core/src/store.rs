//! On-disk checkpoint format.
//!
//! ```text
//! checkpoint-{step}/
//!   model.weights            BF16 weights of the saved modules (tensor container)
//!   optim/rank_{r}.shard     rank r's slice of every saved group (F32 container)
//!   optim/optim_meta.json    per-group hyperparameters and shard geometry
//!   config.json              model spec
//!   trainer_state.json       step, lr, optimizer_t, strategy, checkpoint_counter, rng_seed
//!   manifest.json            step, strategy, saved modules (and provenance after a merge)
//! ```
//!
//! Each parameter group is zero-padded to a multiple of the rank count and
//! split into contiguous equal chunks; rank `r` stores chunk `r` of every
//! group under `g{index}.master`, `g{index}.exp_avg` and `g{index}.exp_avg_sq`.
//! All JSON is written with sorted keys.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bf16::bf16_round;
use crate::container::{container_size, read_file, Dtype, TensorContainer};
use crate::error::{Result, TailorError};
use crate::model::{enumerate_modules, tensors_of, DecayClass, ModelSpec, ModuleId};
use crate::optim::{build_table, AdamHyperparams, GroupLayout, GroupState, OptimizerState, ParameterGroupTable};

pub const WEIGHTS_FILE: &str = "model.weights";
pub const OPTIM_DIR: &str = "optim";
pub const OPTIM_META_FILE: &str = "optim/optim_meta.json";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAINER_STATE_FILE: &str = "trainer_state.json";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("checkpoint-{step}")
}

pub fn rank_file(rank: usize) -> String {
    format!("{OPTIM_DIR}/rank_{rank}.shard")
}

pub fn group_key(index: usize, field: &str) -> String {
    format!("g{index}.{field}")
}

pub const STATE_FIELDS: [&str; 3] = ["master", "exp_avg", "exp_avg_sq"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShardGeometry {
    pub num_ranks: usize,
}

impl ShardGeometry {
    pub fn new(num_ranks: usize) -> Result<Self> {
        if num_ranks == 0 {
            return Err(TailorError::Config("num_ranks must be >= 1".into()));
        }
        Ok(ShardGeometry { num_ranks })
    }

    pub fn padded_length(&self, true_length: usize) -> usize {
        true_length.div_ceil(self.num_ranks) * self.num_ranks
    }

    pub fn shard_length(&self, true_length: usize) -> usize {
        true_length.div_ceil(self.num_ranks)
    }
}

/// Rank `rank`'s contiguous chunk of `values`, zero-padded to the shard length.
pub fn shard_slice(values: &[f32], rank: usize, geom: ShardGeometry) -> Vec<f32> {
    let shard_len = geom.shard_length(values.len());
    let start = (rank * shard_len).min(values.len());
    let end = (start + shard_len).min(values.len());
    let mut out = Vec::with_capacity(shard_len);
    out.extend_from_slice(&values[start..end]);
    out.resize(shard_len, 0.0);
    out
}

pub fn shard_group(values: &[f32], true_length: usize, geom: ShardGeometry) -> Result<Vec<Vec<f32>>> {
    if values.len() != true_length {
        return Err(TailorError::Geometry(format!(
            "group has {} values, expected {true_length}",
            values.len()
        )));
    }
    Ok((0..geom.num_ranks).map(|r| shard_slice(values, r, geom)).collect())
}

/// Concatenate rank shards and drop the padding.
pub fn unshard_group(shards: &[Vec<f32>], true_length: usize) -> Result<Vec<f32>> {
    let shard_len = shards.first().map_or(0, Vec::len);
    if shards.iter().any(|s| s.len() != shard_len) || shard_len * shards.len() < true_length {
        return Err(TailorError::Geometry(format!(
            "{} shards of length {shard_len} cannot hold {true_length} values",
            shards.len()
        )));
    }
    let mut out: Vec<f32> = shards.concat();
    out.truncate(true_length);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    pub step: u64,
    pub lr: f64,
    pub optimizer_t: u64,
    pub strategy: String,
    pub checkpoint_counter: u64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: String,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaveManifest {
    pub step: u64,
    pub strategy: String,
    pub modules: Vec<ModuleId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<BTreeMap<String, Provenance>>,
}

impl SaveManifest {
    pub fn contains(&self, module: ModuleId) -> bool {
        self.modules.contains(&module)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupMeta {
    pub index: usize,
    pub owner: Option<ModuleId>,
    pub decay_class: DecayClass,
    pub true_length: usize,
    pub padded_length: usize,
    pub shard_length: usize,
    pub hyper: AdamHyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimMeta {
    pub layout: GroupLayout,
    pub num_ranks: usize,
    pub t: u64,
    pub groups: Vec<GroupMeta>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bf16Tensor {
    pub shape: Vec<usize>,
    pub bits: Vec<u16>,
}

pub type WeightSet = BTreeMap<String, Bf16Tensor>;

/// Everything a checkpoint directory holds, fully decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub trainer_state: TrainerState,
    pub manifest: SaveManifest,
    pub weights: WeightSet,
    pub optim: OptimizerState,
    pub geometry: ShardGeometry,
}

/// BF16 weights of every tensor held by `groups` of `state`.
pub fn weights_from_state(table: &ParameterGroupTable, state: &OptimizerState) -> WeightSet {
    let mut weights = WeightSet::new();
    for entry in &table.groups {
        let Some(group) = state.groups.get(&entry.index) else {
            continue;
        };
        for seg in &entry.segments {
            let slice = &group.master[seg.offset_in_group..seg.offset_in_group + seg.len];
            weights.insert(
                seg.name.clone(),
                Bf16Tensor {
                    shape: seg.shape.clone(),
                    bits: slice.iter().map(|&x| bf16_round(x)).collect(),
                },
            );
        }
    }
    weights
}

fn sorted_modules(mut modules: Vec<ModuleId>) -> Vec<ModuleId> {
    modules.sort();
    modules.dedup();
    modules
}

impl Checkpoint {
    /// Snapshot of `modules` taken from a full (or superset) optimizer state.
    pub fn from_state(
        spec: ModelSpec,
        state: &OptimizerState,
        modules: &[ModuleId],
        trainer_state: TrainerState,
        geometry: ShardGeometry,
    ) -> Result<Self> {
        let table = build_table(&spec, state.layout);
        let modules = sorted_modules(modules.to_vec());
        let indices: Vec<usize> = match state.layout {
            GroupLayout::Coarse => table.groups.iter().map(|g| g.index).collect(),
            GroupLayout::LayerAligned => table.groups_for_modules(&modules)?,
        };
        let mut groups = BTreeMap::new();
        for idx in indices {
            let g = state
                .groups
                .get(&idx)
                .ok_or_else(|| TailorError::Consistency(format!("state lacks group {idx}")))?;
            groups.insert(idx, g.clone());
        }
        let optim = OptimizerState {
            layout: state.layout,
            t: state.t,
            groups,
        };
        let weights = weights_from_state(&table, &optim);
        let manifest = SaveManifest {
            step: trainer_state.step,
            strategy: trainer_state.strategy.clone(),
            modules,
            provenance: None,
        };
        Ok(Checkpoint {
            spec,
            trainer_state,
            manifest,
            weights,
            optim,
            geometry,
        })
    }

    pub fn step(&self) -> u64 {
        self.trainer_state.step
    }

    pub fn table(&self) -> ParameterGroupTable {
        build_table(&self.spec, self.optim.layout)
    }

    pub fn missing_modules(&self) -> Vec<ModuleId> {
        enumerate_modules(&self.spec)
            .into_iter()
            .filter(|m| !self.manifest.contains(*m))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing_modules().is_empty()
    }

    pub fn optim_meta(&self) -> OptimMeta {
        let table = self.table();
        let groups = self
            .optim
            .groups
            .iter()
            .map(|(&index, g)| {
                let entry = &table.groups[index];
                GroupMeta {
                    index,
                    owner: entry.owner,
                    decay_class: entry.decay_class,
                    true_length: g.len(),
                    padded_length: self.geometry.padded_length(g.len()),
                    shard_length: self.geometry.shard_length(g.len()),
                    hyper: g.hyper,
                }
            })
            .collect();
        OptimMeta {
            layout: self.optim.layout,
            num_ranks: self.geometry.num_ranks,
            t: self.optim.t,
            groups,
        }
    }

    /// Check every structural invariant, including BF16/master agreement.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(TailorError::Consistency(msg));
        self.spec.validate()?;
        if self.geometry.num_ranks == 0 {
            return fail("num_ranks is zero".into());
        }
        if self.manifest.step != self.trainer_state.step {
            return fail(format!(
                "manifest step {} != trainer step {}",
                self.manifest.step, self.trainer_state.step
            ));
        }
        if self.optim.t != self.trainer_state.optimizer_t {
            return fail(format!(
                "optimizer t {} != trainer_state optimizer_t {}",
                self.optim.t, self.trainer_state.optimizer_t
            ));
        }
        let modules = &self.manifest.modules;
        if modules.is_empty() {
            return fail("manifest lists no modules".into());
        }
        if sorted_modules(modules.clone()) != *modules {
            return fail("manifest modules are not in canonical order or repeat".into());
        }
        for &m in modules {
            if self.spec.check_module(m).is_err() {
                return fail(format!("manifest lists invalid module {m}"));
            }
        }

        let table = self.table();
        let expected_groups: Vec<usize> = match self.optim.layout {
            GroupLayout::Coarse => {
                if !self.is_complete() {
                    return fail("coarse-grouped checkpoints must hold every module".into());
                }
                vec![0, 1]
            }
            GroupLayout::LayerAligned => table.groups_for_modules(modules)?,
        };
        let present: Vec<usize> = self.optim.groups.keys().copied().collect();
        if present != expected_groups {
            return fail(format!("optimizer groups {present:?}, modules require {expected_groups:?}"));
        }
        for (&idx, g) in &self.optim.groups {
            let entry = &table.groups[idx];
            if g.len() != entry.element_count || !g.is_consistent() {
                return fail(format!(
                    "group {idx} has {} elements, expected {}",
                    g.len(),
                    entry.element_count
                ));
            }
        }

        let mut expected_tensors = BTreeMap::new();
        for &m in modules {
            for decl in tensors_of(&self.spec, m)? {
                expected_tensors.insert(decl.name, decl.shape);
            }
        }
        if expected_tensors.len() != self.weights.len()
            || expected_tensors.keys().ne(self.weights.keys())
        {
            return fail("weight tensors do not match the saved modules".into());
        }
        for (name, shape) in &expected_tensors {
            let w = &self.weights[name];
            if &w.shape != shape || w.bits.len() != shape.iter().product::<usize>() {
                return fail(format!("tensor {name} has shape {:?}, expected {shape:?}", w.shape));
            }
        }

        for (&idx, g) in &self.optim.groups {
            for seg in &table.groups[idx].segments {
                let stored = &self.weights[&seg.name].bits;
                let master = &g.master[seg.offset_in_group..seg.offset_in_group + seg.len];
                if let Some(k) = master
                    .iter()
                    .zip(stored)
                    .position(|(&m, &w)| bf16_round(m) != w)
                {
                    return fail(format!(
                        "{}[{k}]: stored bf16 {:#06x} != bf16(master {})",
                        seg.name, stored[k], master[k]
                    ));
                }
            }
        }
        Ok(())
    }

    fn weights_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (name, t) in &self.weights {
            c.insert_bf16(name.clone(), t.shape.clone(), &t.bits);
        }
        c
    }

    fn shard_container(&self, rank: usize) -> TensorContainer {
        let mut c = TensorContainer::new();
        for (&idx, g) in &self.optim.groups {
            let fields = [&g.master, &g.exp_avg, &g.exp_avg_sq];
            for (field, values) in STATE_FIELDS.iter().zip(fields) {
                let shard = shard_slice(values, rank, self.geometry);
                c.insert_f32(group_key(idx, field), vec![shard.len()], &shard);
            }
        }
        c
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    // Going through Value sorts every object's keys.
    let value = serde_json::to_value(value).expect("serializable");
    let mut out = serde_json::to_vec_pretty(&value).expect("serializable");
    out.push(b'\n');
    out
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| TailorError::corrupt(path, e.to_string()))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| TailorError::storage(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| TailorError::storage(path, e))
}

/// Staging directory next to `dir`; renamed into place once complete.
pub(crate) fn staging_dir(dir: &Path) -> Result<PathBuf> {
    if dir.exists() {
        return Err(TailorError::storage(
            dir,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "destination exists"),
        ));
    }
    let name = dir
        .file_name()
        .ok_or_else(|| TailorError::Config(format!("bad output path {}", dir.display())))?
        .to_string_lossy();
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| TailorError::storage(parent, e))?;
    let staging = parent.join(format!(".{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| TailorError::storage(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| TailorError::storage(&staging, e))?;
    Ok(staging)
}

pub(crate) fn commit_staging(staging: &Path, dir: &Path) -> Result<()> {
    fs::rename(staging, dir).map_err(|e| TailorError::storage(dir, e))
}

/// Validate and write `ckpt` to `dir`, which must not exist yet.
/// Nothing is left behind when validation fails.
pub fn write_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.validate()?;
    let staging = staging_dir(dir)?;
    let result = write_files(&staging, ckpt);
    match result {
        Ok(()) => commit_staging(&staging, dir),
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn write_files(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir.join(OPTIM_DIR)).map_err(|e| TailorError::storage(dir, e))?;
    ckpt.weights_container().write(&dir.join(WEIGHTS_FILE))?;
    (0..ckpt.geometry.num_ranks)
        .into_par_iter()
        .try_for_each(|r| ckpt.shard_container(r).write(&dir.join(rank_file(r))))?;
    write_bytes(&dir.join(OPTIM_META_FILE), &to_json_bytes(&ckpt.optim_meta()))?;
    write_bytes(&dir.join(CONFIG_FILE), &to_json_bytes(&ckpt.spec))?;
    write_bytes(&dir.join(TRAINER_STATE_FILE), &to_json_bytes(&ckpt.trainer_state))?;
    write_bytes(&dir.join(MANIFEST_FILE), &to_json_bytes(&ckpt.manifest))?;
    Ok(())
}

/// Small metadata files of a checkpoint, without tensor payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub path: PathBuf,
    pub spec: ModelSpec,
    pub trainer_state: TrainerState,
    pub manifest: SaveManifest,
    pub optim_meta: OptimMeta,
}

impl CheckpointMeta {
    pub fn step(&self) -> u64 {
        self.trainer_state.step
    }

    pub fn geometry(&self) -> ShardGeometry {
        ShardGeometry {
            num_ranks: self.optim_meta.num_ranks,
        }
    }

    pub fn group_meta(&self, index: usize) -> Option<&GroupMeta> {
        self.optim_meta.groups.iter().find(|g| g.index == index)
    }
}

pub fn read_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    if !dir.is_dir() {
        return Err(TailorError::MissingArtifact(dir.to_path_buf()));
    }
    let spec: ModelSpec = read_json(&dir.join(CONFIG_FILE))?;
    spec.validate()?;
    let meta = CheckpointMeta {
        path: dir.to_path_buf(),
        spec,
        trainer_state: read_json(&dir.join(TRAINER_STATE_FILE))?,
        manifest: read_json(&dir.join(MANIFEST_FILE))?,
        optim_meta: read_json(&dir.join(OPTIM_META_FILE))?,
    };
    check_meta(&meta)?;
    Ok(meta)
}

fn check_meta(meta: &CheckpointMeta) -> Result<()> {
    let geom = ShardGeometry::new(meta.optim_meta.num_ranks)
        .map_err(|_| TailorError::Geometry("optim_meta has zero ranks".into()))?;
    let table = build_table(&meta.spec, meta.optim_meta.layout);
    let meta_file = meta.path.join(OPTIM_META_FILE);
    for g in &meta.optim_meta.groups {
        let entry = table.group(g.index).ok_or_else(|| {
            TailorError::Geometry(format!("group {} does not exist for this model", g.index))
        })?;
        if entry.owner != g.owner
            || entry.decay_class != g.decay_class
            || entry.element_count != g.true_length
        {
            return Err(TailorError::corrupt(
                &meta_file,
                format!("group {} does not match the model's group table", g.index),
            ));
        }
        if g.padded_length != geom.padded_length(g.true_length)
            || g.shard_length != geom.shard_length(g.true_length)
        {
            return Err(TailorError::Geometry(format!(
                "group {} geometry disagrees with {} ranks",
                g.index, geom.num_ranks
            )));
        }
    }
    let rank_files = list_rank_files(&meta.path.join(OPTIM_DIR))?;
    if let Some(&extra) = rank_files.iter().find(|&&r| r >= geom.num_ranks) {
        return Err(TailorError::Geometry(format!(
            "found rank_{extra}.shard but optim_meta declares {} ranks",
            geom.num_ranks
        )));
    }
    for r in 0..geom.num_ranks {
        if !rank_files.contains(&r) {
            return Err(TailorError::MissingArtifact(meta.path.join(rank_file(r))));
        }
    }
    Ok(())
}

fn list_rank_files(optim_dir: &Path) -> Result<BTreeSet<usize>> {
    let entries = fs::read_dir(optim_dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            TailorError::MissingArtifact(optim_dir.to_path_buf())
        } else {
            TailorError::storage(optim_dir, e)
        }
    })?;
    let mut ranks = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|e| TailorError::storage(optim_dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(r) = name
            .strip_prefix("rank_")
            .and_then(|s| s.strip_suffix(".shard"))
            .and_then(|s| s.parse().ok())
        {
            ranks.insert(r);
        }
    }
    Ok(ranks)
}

/// Read a checkpoint and decode every tensor. Structural problems are
/// reported; BF16/master agreement is left to [`Checkpoint::validate`].
pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta = read_checkpoint_meta(dir)?;
    let geom = meta.geometry();

    let shards: Vec<TensorContainer> = (0..geom.num_ranks)
        .into_par_iter()
        .map(|r| TensorContainer::read(&dir.join(rank_file(r))))
        .collect::<Result<_>>()?;

    let mut groups = BTreeMap::new();
    for g in &meta.optim_meta.groups {
        let mut fields: Vec<Vec<f32>> = Vec::with_capacity(3);
        for field in STATE_FIELDS {
            let key = group_key(g.index, field);
            let mut rank_values = Vec::with_capacity(geom.num_ranks);
            for (r, shard) in shards.iter().enumerate() {
                let path = dir.join(rank_file(r));
                let entry = shard
                    .get(&key)
                    .ok_or_else(|| TailorError::corrupt(&path, format!("missing tensor {key}")))?;
                if entry.shape != [g.shard_length] {
                    return Err(TailorError::Geometry(format!(
                        "{key} in rank {r} has shape {:?}, expected [{}]",
                        entry.shape, g.shard_length
                    )));
                }
                let values = entry
                    .to_f32()
                    .ok_or_else(|| TailorError::corrupt(&path, format!("{key} is not F32")))?;
                rank_values.push(values);
            }
            let full: Vec<f32> = rank_values.concat();
            if full[g.true_length..].iter().any(|&x| x.to_bits() != 0) {
                return Err(TailorError::corrupt(dir, format!("{key} has non-zero padding")));
            }
            fields.push(unshard_group(&rank_values, g.true_length)?);
        }
        let exp_avg_sq = fields.pop().expect("3 fields");
        let exp_avg = fields.pop().expect("3 fields");
        let master = fields.pop().expect("3 fields");
        groups.insert(
            g.index,
            GroupState {
                master,
                exp_avg,
                exp_avg_sq,
                hyper: g.hyper,
            },
        );
    }
    let expected_keys = meta.optim_meta.groups.len() * 3;
    for (r, shard) in shards.iter().enumerate() {
        if shard.tensors.len() != expected_keys {
            return Err(TailorError::corrupt(
                dir.join(rank_file(r)),
                format!("{} tensors, optim_meta implies {expected_keys}", shard.tensors.len()),
            ));
        }
    }

    let weights_path = dir.join(WEIGHTS_FILE);
    let container = TensorContainer::read(&weights_path)?;
    let mut weights = WeightSet::new();
    for (name, entry) in container.tensors {
        let bits = entry
            .to_bf16_bits()
            .ok_or_else(|| TailorError::corrupt(&weights_path, format!("{name} is not BF16")))?;
        weights.insert(
            name,
            Bf16Tensor {
                shape: entry.shape,
                bits,
            },
        );
    }

    Ok(Checkpoint {
        spec: meta.spec,
        trainer_state: meta.trainer_state,
        manifest: meta.manifest,
        weights,
        optim: OptimizerState {
            layout: meta.optim_meta.layout,
            t: meta.optim_meta.t,
            groups,
        },
        geometry: geom,
    })
}

/// `checkpoint-{step}` directories under `run_dir`, ordered by step.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(run_dir).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            TailorError::MissingArtifact(run_dir.to_path_buf())
        } else {
            TailorError::storage(run_dir, e)
        }
    })?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| TailorError::storage(run_dir, e))?;
        let name = entry.file_name();
        if let Some(step) = name
            .to_string_lossy()
            .strip_prefix("checkpoint-")
            .and_then(|s| s.parse::<u64>().ok())
        {
            if entry.path().is_dir() {
                out.push((step, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Total size of all regular files below `dir`.
pub fn dir_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    let entries = fs::read_dir(dir).map_err(|e| TailorError::storage(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| TailorError::storage(dir, e))?;
        let meta = entry.metadata().map_err(|e| TailorError::storage(entry.path(), e))?;
        if meta.is_dir() {
            total += dir_bytes(&entry.path())?;
        } else {
            total += meta.len();
        }
    }
    Ok(total)
}

/// Byte breakdown of one checkpoint directory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CheckpointBytes {
    pub weights: u64,
    pub optimizer: u64,
    pub metadata: u64,
}

impl CheckpointBytes {
    pub fn total(&self) -> u64 {
        self.weights + self.optimizer + self.metadata
    }
}

pub fn measure_checkpoint(dir: &Path) -> Result<CheckpointBytes> {
    let size = |p: PathBuf| -> Result<u64> {
        fs::metadata(&p)
            .map(|m| m.len())
            .map_err(|_| TailorError::MissingArtifact(p))
    };
    let weights = size(dir.join(WEIGHTS_FILE))?;
    let mut optimizer = 0;
    for r in list_rank_files(&dir.join(OPTIM_DIR))? {
        optimizer += size(dir.join(rank_file(r)))?;
    }
    let total = dir_bytes(dir)?;
    Ok(CheckpointBytes {
        weights,
        optimizer,
        metadata: total - weights - optimizer,
    })
}

/// Exact size a layer-aligned checkpoint of `modules` would occupy, computed
/// from tensor shapes and the metadata serializers alone.
pub fn predict_checkpoint_bytes(
    spec: &ModelSpec,
    modules: &[ModuleId],
    geometry: ShardGeometry,
    hyper: AdamHyperparams,
    trainer_state: &TrainerState,
) -> Result<CheckpointBytes> {
    let modules = sorted_modules(modules.to_vec());
    let table = build_table(spec, GroupLayout::LayerAligned);

    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    for &m in &modules {
        tensors.extend(tensors_of(spec, m)?.into_iter().map(|d| (d.name, d.shape)));
    }
    tensors.sort();
    let weights = container_size(tensors.iter().map(|(n, s)| (n.as_str(), Dtype::BF16, s.as_slice())));

    let groups = table.groups_for_modules(&modules)?;
    let mut shard_entries: Vec<(String, Vec<usize>)> = Vec::new();
    let mut group_meta = Vec::new();
    for &idx in &groups {
        let entry = &table.groups[idx];
        let shard_len = geometry.shard_length(entry.element_count);
        for field in STATE_FIELDS {
            shard_entries.push((group_key(idx, field), vec![shard_len]));
        }
        group_meta.push(GroupMeta {
            index: idx,
            owner: entry.owner,
            decay_class: entry.decay_class,
            true_length: entry.element_count,
            padded_length: geometry.padded_length(entry.element_count),
            shard_length: shard_len,
            hyper: hyper.for_class(entry.decay_class),
        });
    }
    shard_entries.sort();
    let per_rank =
        container_size(shard_entries.iter().map(|(n, s)| (n.as_str(), Dtype::F32, s.as_slice())));
    let optimizer = per_rank * geometry.num_ranks as u64;

    let optim_meta = OptimMeta {
        layout: GroupLayout::LayerAligned,
        num_ranks: geometry.num_ranks,
        t: trainer_state.optimizer_t,
        groups: group_meta,
    };
    let manifest = SaveManifest {
        step: trainer_state.step,
        strategy: trainer_state.strategy.clone(),
        modules,
        provenance: None,
    };
    let metadata = [
        to_json_bytes(&optim_meta).len(),
        to_json_bytes(spec).len(),
        to_json_bytes(trainer_state).len(),
        to_json_bytes(&manifest).len(),
    ]
    .iter()
    .sum::<usize>() as u64;
    Ok(CheckpointBytes {
        weights,
        optimizer,
        metadata,
    })
}
