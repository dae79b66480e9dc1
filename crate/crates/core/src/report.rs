//! Read-only inspection of checkpoints and runs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Result, TailorError};
use crate::model::{enumerate_modules, module_param_count, DecayClass, ModelSpec, ModuleId};
use crate::optim::{group_indices_for, AdamHyperparams, GroupLayout};
use crate::store::{
    list_checkpoints, measure_checkpoint, predict_checkpoint_bytes, read_checkpoint, read_checkpoint_meta,
    CheckpointBytes, CheckpointMeta,
};

#[derive(Debug, Clone, Serialize)]
pub struct ModuleRow {
    pub module: ModuleId,
    pub source: String,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub path: PathBuf,
    pub spec: ModelSpec,
    pub step: u64,
    pub strategy: String,
    pub num_ranks: usize,
    pub modules: Vec<ModuleRow>,
    pub missing: Vec<ModuleId>,
    pub bytes: CheckpointBytes,
    /// Payload bytes of each FP32 optimizer tensor kind, padding included.
    pub master_bytes: u64,
    pub exp_avg_bytes: u64,
    pub exp_avg_sq_bytes: u64,
    /// Total checkpoint size over the BF16 size of the saved parameters
    /// (2 bytes each).
    pub size_ratio: f64,
    /// Total checkpoint size over the `model.weights` file size, header
    /// included. Slightly below `size_ratio`'s floor of 7 for full
    /// checkpoints, since the weight header is counted in the denominator.
    pub weights_file_ratio: f64,
}

pub fn inspect(dir: &Path) -> Result<InspectReport> {
    let meta = read_checkpoint_meta(dir)?;
    let bytes = measure_checkpoint(dir)?;
    let modules = meta
        .manifest
        .modules
        .iter()
        .map(|&m| {
            let (source, step) = match meta.manifest.provenance.as_ref().and_then(|p| p.get(&m.to_string())) {
                Some(p) => (p.source.clone(), p.step),
                None => (dir.display().to_string(), meta.step()),
            };
            ModuleRow { module: m, source, step }
        })
        .collect();
    let missing = enumerate_modules(&meta.spec)
        .into_iter()
        .filter(|m| !meta.manifest.contains(*m))
        .collect();
    let model_bytes: u64 = meta
        .manifest
        .modules
        .iter()
        .map(|&m| 2 * module_param_count(&meta.spec, m) as u64)
        .sum();
    let fp32_bytes: u64 = meta.optim_meta.groups.iter().map(|g| g.padded_length as u64 * 4).sum();
    Ok(InspectReport {
        path: dir.to_path_buf(),
        spec: meta.spec,
        step: meta.step(),
        strategy: meta.manifest.strategy.clone(),
        num_ranks: meta.optim_meta.num_ranks,
        modules,
        missing,
        bytes,
        master_bytes: fp32_bytes,
        exp_avg_bytes: fp32_bytes,
        exp_avg_sq_bytes: fp32_bytes,
        size_ratio: bytes.total() as f64 / model_bytes as f64,
        weights_file_ratio: bytes.total() as f64 / bytes.weights as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointSize {
    pub step: u64,
    pub modules: usize,
    pub bytes: CheckpointBytes,
    pub total: u64,
    /// What a full checkpoint at this step would occupy.
    pub full_equivalent: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SizeReport {
    pub run: PathBuf,
    pub checkpoints: Vec<CheckpointSize>,
    pub total_bytes: u64,
    pub full_equivalent_bytes: u64,
    /// `total_bytes / full_equivalent_bytes`.
    pub ratio: f64,
}

fn decay_hyper(meta: &CheckpointMeta) -> AdamHyperparams {
    meta.optim_meta
        .groups
        .iter()
        .find(|g| g.decay_class == DecayClass::Decay)
        .map(|g| g.hyper)
        .unwrap_or_default()
}

pub fn size_report(run: &Path) -> Result<SizeReport> {
    let mut checkpoints = Vec::new();
    for (step, path) in list_checkpoints(run)? {
        let meta = read_checkpoint_meta(&path)?;
        let bytes = measure_checkpoint(&path)?;
        let full_equivalent = match meta.optim_meta.layout {
            GroupLayout::LayerAligned => predict_checkpoint_bytes(
                &meta.spec,
                &enumerate_modules(&meta.spec),
                meta.geometry(),
                decay_hyper(&meta),
                &meta.trainer_state,
            )?
            .total(),
            GroupLayout::Coarse => bytes.total(),
        };
        checkpoints.push(CheckpointSize {
            step,
            modules: meta.manifest.modules.len(),
            bytes,
            total: bytes.total(),
            full_equivalent,
        });
    }
    let total_bytes = checkpoints.iter().map(|c| c.total).sum();
    let full_equivalent_bytes = checkpoints.iter().map(|c| c.full_equivalent).sum::<u64>();
    Ok(SizeReport {
        run: run.to_path_buf(),
        checkpoints,
        total_bytes,
        full_equivalent_bytes,
        ratio: if full_equivalent_bytes == 0 {
            0.0
        } else {
            total_bytes as f64 / full_equivalent_bytes as f64
        },
    })
}

/// Sum of all checkpoint directory sizes in a run (the step log excluded).
pub fn run_checkpoint_bytes(run: &Path) -> Result<u64> {
    let mut total = 0;
    for (_, path) in list_checkpoints(run)? {
        total += measure_checkpoint(&path)?.total();
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct Divergence {
    pub module: ModuleId,
    /// Tensor name, or `g{index}.{field}` for optimizer state.
    pub item: String,
    pub index: usize,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub compared: Vec<ModuleId>,
    pub equal: bool,
    pub first_divergence: Option<Divergence>,
}

fn first_diff<T: PartialEq>(a: &[T], b: &[T]) -> Option<usize> {
    a.iter()
        .zip(b)
        .position(|(x, y)| x != y)
        .or_else(|| (a.len() != b.len()).then(|| a.len().min(b.len())))
}

/// Bitwise comparison of the given modules (default: all modules saved in
/// `a`) across two checkpoints: BF16 weights, FP32 masters, both moments
/// and per-group hyperparameters.
pub fn verify(a_dir: &Path, b_dir: &Path, modules: Option<&[ModuleId]>) -> Result<VerifyReport> {
    let a = read_checkpoint(a_dir)?;
    let b = read_checkpoint(b_dir)?;
    a.validate()?;
    b.validate()?;
    if !a.spec.same_geometry(&b.spec) {
        return Err(TailorError::Geometry(format!(
            "{} and {} describe different models",
            a_dir.display(),
            b_dir.display()
        )));
    }
    if a.optim.layout != GroupLayout::LayerAligned || b.optim.layout != GroupLayout::LayerAligned {
        return Err(TailorError::Geometry("verify needs layer-aligned checkpoints".into()));
    }
    let compared: Vec<ModuleId> = match modules {
        Some(m) => m.to_vec(),
        None => a.manifest.modules.clone(),
    };
    for &m in &compared {
        a.spec.check_module(m)?;
        for (ckpt, dir) in [(&a, a_dir), (&b, b_dir)] {
            if !ckpt.manifest.contains(m) {
                return Err(TailorError::SourceLacksModule {
                    module: m,
                    path: dir.to_path_buf(),
                });
            }
        }
    }

    let table = a.table();
    let mut divergence = None;
    'outer: for &m in &compared {
        for decl in crate::model::tensors_of(&a.spec, m)? {
            let (wa, wb) = (&a.weights[&decl.name].bits, &b.weights[&decl.name].bits);
            if let Some(i) = first_diff(wa, wb) {
                divergence = Some(Divergence {
                    module: m,
                    item: decl.name.clone(),
                    index: i,
                    a: wa.get(i).map_or("-".into(), |v| format!("{v:#06x}")),
                    b: wb.get(i).map_or("-".into(), |v| format!("{v:#06x}")),
                });
                break 'outer;
            }
        }
        for g in group_indices_for(&table, m)? {
            let (ga, gb) = (&a.optim.groups[&g], &b.optim.groups[&g]);
            let fields = [
                ("master", &ga.master, &gb.master),
                ("exp_avg", &ga.exp_avg, &gb.exp_avg),
                ("exp_avg_sq", &ga.exp_avg_sq, &gb.exp_avg_sq),
            ];
            for (field, x, y) in fields {
                let xb: Vec<u32> = x.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.iter().map(|v| v.to_bits()).collect();
                if let Some(i) = first_diff(&xb, &yb) {
                    divergence = Some(Divergence {
                        module: m,
                        item: format!("g{g}.{field}"),
                        index: i,
                        a: x.get(i).map_or("-".into(), |v| v.to_string()),
                        b: y.get(i).map_or("-".into(), |v| v.to_string()),
                    });
                    break 'outer;
                }
            }
            if ga.hyper != gb.hyper {
                divergence = Some(Divergence {
                    module: m,
                    item: format!("g{g}.hyper"),
                    index: 0,
                    a: format!("{:?}", ga.hyper),
                    b: format!("{:?}", gb.hyper),
                });
                break 'outer;
            }
        }
    }
    Ok(VerifyReport {
        compared,
        equal: divergence.is_none(),
        first_divergence: divergence,
    })
}
