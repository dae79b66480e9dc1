//! Deterministic desk-scale training loop.
//!
//! Gradients are synthesized from a counter-based hash plus a feedback term
//! on the current master weights, so a trajectory is a pure function of
//! (spec, hyperparameters, seed, starting state). That is what makes
//! interrupted-and-resumed runs comparable bit for bit.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TailorError};
use crate::model::{DecayClass, ModelSpec};
use crate::optim::{apply_step, build_table, AdamHyperparams, GroupLayout, Gradients, OptimizerState, ParameterGroupTable};
use crate::store::{
    checkpoint_dir_name, list_checkpoints, read_checkpoint, write_checkpoint, Checkpoint, ShardGeometry, TrainerState,
};
use crate::strategy::{modules_to_save, StrategyConfig, StrategyKind};

pub const LOG_FILE: &str = "log.jsonl";

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless 64-bit hash of (seed, step, element id).
pub fn counter_hash(seed: u64, step: u64, id: u64) -> u64 {
    mix(mix(mix(seed) ^ step) ^ id)
}

/// Map a hash to [-1, 1] using its top 24 bits.
pub fn unit_uniform(h: u64) -> f32 {
    let top = (h >> 40) as f64;
    (top * (2.0 / 16_777_215.0) - 1.0) as f32
}

const INIT_DOMAIN: u64 = 0x1A17_0000_0000_0001;

/// Stand-in for backprop: `g = c1 * w + c2 * u(seed, step, id)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSource {
    pub seed: u64,
    pub feedback: f32,
    pub noise: f32,
}

impl GradientSource {
    pub fn new(seed: u64) -> Self {
        GradientSource {
            seed,
            feedback: 0.05,
            noise: 0.01,
        }
    }
}

/// Gradients for every group present in `state`.
pub fn synth_grad(
    src: &GradientSource,
    step: u64,
    table: &ParameterGroupTable,
    state: &OptimizerState,
) -> Result<Gradients> {
    let mut grads = Gradients::new();
    for (&idx, group) in &state.groups {
        let entry = table
            .group(idx)
            .filter(|e| e.element_count == group.len())
            .ok_or_else(|| TailorError::Geometry(format!("state group {idx} does not match table")))?;
        let mut g = vec![0.0f32; group.len()];
        for seg in &entry.segments {
            for k in 0..seg.len {
                let pos = seg.offset_in_group + k;
                let u = unit_uniform(counter_hash(src.seed, step, (seg.global_offset + k) as u64));
                g[pos] = src.feedback * group.master[pos] + src.noise * u;
            }
        }
        grads.insert(idx, g);
    }
    Ok(grads)
}

/// Fresh optimizer state: norm weights at 1, everything else small noise.
pub fn init_state(spec: &ModelSpec, table: &ParameterGroupTable, hyper: AdamHyperparams) -> OptimizerState {
    let mut state = OptimizerState::zeros(table, hyper);
    for entry in &table.groups {
        let group = state.groups.get_mut(&entry.index).expect("zeros covers table");
        for seg in &entry.segments {
            for k in 0..seg.len {
                group.master[seg.offset_in_group + k] = match entry.decay_class {
                    DecayClass::NoDecay => 1.0,
                    DecayClass::Decay => {
                        0.02 * unit_uniform(counter_hash(spec.seed ^ INIT_DOMAIN, 0, (seg.global_offset + k) as u64))
                    }
                };
            }
        }
    }
    state
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub spec: ModelSpec,
    pub hyper: AdamHyperparams,
    pub strategy: StrategyConfig,
    pub num_ranks: usize,
    pub layout: GroupLayout,
    pub grad: GradientSource,
}

impl TrainerConfig {
    pub fn new(spec: ModelSpec, strategy: StrategyConfig, num_ranks: usize) -> Self {
        TrainerConfig {
            spec,
            hyper: AdamHyperparams::default(),
            strategy,
            num_ranks,
            layout: GroupLayout::LayerAligned,
            grad: GradientSource::new(spec.seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.hyper.validate()?;
        self.strategy.validate(&self.spec)?;
        ShardGeometry::new(self.num_ranks)?;
        if self.layout == GroupLayout::Coarse && self.strategy.kind != StrategyKind::Full {
            return Err(TailorError::Config(
                "partial checkpoint strategies need layer-aligned parameter groups".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub grad_norm: f64,
    pub update_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    spec: ModelSpec,
    table: ParameterGroupTable,
    state: OptimizerState,
    step: u64,
    lr: f64,
    strategy: StrategyConfig,
    geometry: ShardGeometry,
    grad: GradientSource,
}

impl Trainer {
    pub fn new(cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let table = build_table(&cfg.spec, cfg.layout);
        let state = init_state(&cfg.spec, &table, cfg.hyper);
        Ok(Trainer {
            spec: cfg.spec,
            table,
            state,
            step: 0,
            lr: cfg.hyper.lr,
            strategy: cfg.strategy,
            geometry: ShardGeometry::new(cfg.num_ranks)?,
            grad: cfg.grad,
        })
    }

    /// Continue from an in-memory state, e.g. one assembled by hand.
    pub fn from_parts(
        spec: ModelSpec,
        state: OptimizerState,
        step: u64,
        strategy: StrategyConfig,
        geometry: ShardGeometry,
        grad: GradientSource,
    ) -> Result<Self> {
        let table = build_table(&spec, state.layout);
        if state.groups.len() != table.len()
            || table
                .groups
                .iter()
                .any(|e| state.groups.get(&e.index).map(|g| g.len()) != Some(e.element_count))
        {
            return Err(TailorError::Geometry("state does not cover the full group table".into()));
        }
        let lr = state.groups.values().next().map_or(AdamHyperparams::default().lr, |g| g.hyper.lr);
        Ok(Trainer {
            spec,
            table,
            state,
            step,
            lr,
            strategy,
            geometry,
            grad,
        })
    }

    /// Resume from a complete checkpoint. FP32 masters are authoritative.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let missing = ckpt.missing_modules();
        if !missing.is_empty() {
            return Err(TailorError::MissingModules(missing));
        }
        ckpt.validate()?;
        let ts = &ckpt.trainer_state;
        let kind: StrategyKind = ts.strategy.parse()?;
        if ts.checkpoint_counter == 0 || ts.step % ts.checkpoint_counter != 0 {
            return Err(TailorError::Config(format!(
                "cannot recover the checkpoint interval from step {} and counter {}",
                ts.step, ts.checkpoint_counter
            )));
        }
        let strategy = StrategyConfig::new(kind, ts.step / ts.checkpoint_counter);
        let mut trainer = Trainer::from_parts(
            ckpt.spec,
            ckpt.optim.clone(),
            ts.step,
            strategy,
            ckpt.geometry,
            GradientSource::new(ts.rng_seed),
        )?;
        trainer.lr = ts.lr;
        Ok(trainer)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn table(&self) -> &ParameterGroupTable {
        &self.table
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn strategy(&self) -> &StrategyConfig {
        &self.strategy
    }

    pub fn geometry(&self) -> ShardGeometry {
        self.geometry
    }

    pub fn gradient_source(&self) -> &GradientSource {
        &self.grad
    }

    /// Master weights in the model-wide canonical flattening.
    pub fn masters(&self) -> Vec<f32> {
        let mut flat = vec![0.0; self.spec.param_count()];
        for entry in &self.table.groups {
            let group = &self.state.groups[&entry.index];
            for seg in &entry.segments {
                flat[seg.global_offset..seg.global_offset + seg.len]
                    .copy_from_slice(&group.master[seg.offset_in_group..seg.offset_in_group + seg.len]);
            }
        }
        flat
    }

    pub fn step_once(&mut self) -> Result<StepRecord> {
        let next = self.step + 1;
        let grads = synth_grad(&self.grad, next, &self.table, &self.state)?;
        let before: Vec<Vec<f32>> = self.state.groups.values().map(|g| g.master.clone()).collect();
        apply_step(&mut self.state, &grads)?;
        self.step = next;

        let grad_norm = grads
            .values()
            .flatten()
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        let update_norm = before
            .iter()
            .zip(self.state.groups.values())
            .flat_map(|(old, g)| old.iter().zip(&g.master))
            .map(|(&a, &b)| {
                let d = b as f64 - a as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
        Ok(StepRecord {
            step: next,
            grad_norm,
            update_norm,
        })
    }

    pub fn trainer_state(&self, counter: u64) -> TrainerState {
        TrainerState {
            step: self.step,
            lr: self.lr,
            optimizer_t: self.state.t,
            strategy: self.strategy.kind.to_string(),
            checkpoint_counter: counter,
            rng_seed: self.grad.seed,
        }
    }

    /// Snapshot of the modules the strategy saves at checkpoint `counter`.
    pub fn checkpoint(&self, counter: u64) -> Result<Checkpoint> {
        let modules = modules_to_save(&self.strategy, &self.spec, counter);
        Checkpoint::from_state(self.spec, &self.state, &modules, self.trainer_state(counter), self.geometry)
    }

    /// Train until `target_step`, writing scheduled checkpoints and the step
    /// log under `run_dir` when given.
    pub fn run_until(&mut self, target_step: u64, run_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match run_dir {
            Some(dir) => {
                let path = dir.join(LOG_FILE);
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| TailorError::storage(&path, e))?;
                Some((path, file))
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.step < target_step {
            let record = self.step_once()?;
            if let Some((path, file)) = log.as_mut() {
                let mut line = serde_json::to_vec(&serde_json::to_value(record).expect("serializable"))
                    .expect("serializable");
                line.push(b'\n');
                file.write_all(&line).map_err(|e| TailorError::storage(&*path, e))?;
            }
            if let (Some(dir), Some(counter)) = (run_dir, self.strategy.counter_at(self.step)) {
                let ckpt = self.checkpoint(counter)?;
                write_checkpoint(&dir.join(checkpoint_dir_name(self.step)), &ckpt)?;
            }
            records.push(record);
        }
        Ok(records)
    }
}

fn prepare_run_dir(out: &Path) -> Result<()> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| TailorError::storage(out, e))?;
        if entries.next().is_some() {
            return Err(TailorError::Config(format!("run directory {} is not empty", out.display())));
        }
    }
    fs::create_dir_all(out).map_err(|e| TailorError::storage(out, e))
}

/// Fresh run from step 0 to `total_steps`, checkpointing into `out`.
pub fn train(cfg: &TrainerConfig, total_steps: u64, out: &Path) -> Result<Trainer> {
    let mut trainer = Trainer::new(cfg)?;
    prepare_run_dir(out)?;
    trainer.run_until(total_steps, Some(out))?;
    Ok(trainer)
}

/// Resume from the checkpoint at `ckpt_dir` for `additional_steps` more
/// steps. With `out`, scheduled checkpoints and log lines go there; any log
/// lines beyond the resume step are discarded first.
pub fn resume(ckpt_dir: &Path, additional_steps: u64, out: Option<&Path>) -> Result<Trainer> {
    let ckpt = read_checkpoint(ckpt_dir)?;
    let mut trainer = Trainer::from_checkpoint(&ckpt)?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| TailorError::storage(out, e))?;
        truncate_log(&out.join(LOG_FILE), trainer.step())?;
    }
    let target = trainer.step() + additional_steps;
    trainer.run_until(target, out)?;
    Ok(trainer)
}

fn truncate_log(path: &Path, max_step: u64) -> Result<()> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(TailorError::storage(path, e)),
    };
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| TailorError::storage(path, e))?;
        let record: StepRecord =
            serde_json::from_str(&line).map_err(|e| TailorError::corrupt(path, e.to_string()))?;
        if record.step <= max_step {
            kept.extend_from_slice(line.as_bytes());
            kept.push(b'\n');
        }
    }
    fs::write(path, kept).map_err(|e| TailorError::storage(path, e))
}

/// Make `run_dir` look as if the process died right after step `at_step`:
/// later checkpoints and log lines disappear. A checkpoint scheduled exactly
/// at `at_step` survives.
pub fn inject_failure(run_dir: &Path, at_step: u64) -> Result<Vec<PathBuf>> {
    let mut removed = Vec::new();
    for (step, path) in list_checkpoints(run_dir)? {
        if step > at_step {
            fs::remove_dir_all(&path).map_err(|e| TailorError::storage(&path, e))?;
            removed.push(path);
        }
    }
    truncate_log(&run_dir.join(LOG_FILE), at_step)?;
    Ok(removed)
}
