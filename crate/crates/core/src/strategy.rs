//! Which modules each periodic checkpoint saves.
//!
//! * `full`: everything, every time.
//! * `parity`: odd counters save the even-indexed layers with lm_head and
//!   norm, even counters save the odd-indexed layers with embed_tokens.
//!   Two consecutive checkpoints always cover the model.
//! * `filter`: every checkpoint saves the first `head_count` and last
//!   `tail_count` layers plus norm. Every `sparse_multiple`-th checkpoint
//!   additionally saves half of the middle layers: the lower half with
//!   embed_tokens on odd sparse rounds, the upper half with lm_head on even
//!   ones.
//!
//! The checkpoint counter starts at 1 for the first checkpoint.

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, TailorError};
use crate::model::{enumerate_modules, ModelSpec, ModuleId};
use crate::optim::AdamHyperparams;
use crate::store::{predict_checkpoint_bytes, ShardGeometry, TrainerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Full,
    Parity,
    Filter {
        head_count: usize,
        tail_count: usize,
        sparse_multiple: u64,
    },
}

impl StrategyKind {
    pub const DEFAULT_FILTER: StrategyKind = StrategyKind::Filter {
        head_count: 2,
        tail_count: 2,
        sparse_multiple: 5,
    };
}

/// Renders as `full`, `parity`, `filter`, or `filter(head=H,tail=T,sparse=S)`
/// when the filter parameters differ from the defaults.
impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StrategyKind::Full => f.write_str("full"),
            StrategyKind::Parity => f.write_str("parity"),
            k if k == StrategyKind::DEFAULT_FILTER => f.write_str("filter"),
            StrategyKind::Filter {
                head_count,
                tail_count,
                sparse_multiple,
            } => write!(f, "filter(head={head_count},tail={tail_count},sparse={sparse_multiple})"),
        }
    }
}

impl FromStr for StrategyKind {
    type Err = TailorError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            TailorError::Config(format!(
                "unknown strategy `{s}` (expected full, parity, filter or filter(head=H,tail=T,sparse=S))"
            ))
        };
        match s {
            "full" => return Ok(StrategyKind::Full),
            "parity" => return Ok(StrategyKind::Parity),
            "filter" => return Ok(StrategyKind::DEFAULT_FILTER),
            _ => {}
        }
        let inner = s
            .strip_prefix("filter(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(bad)?;
        let (mut head, mut tail, mut sparse) = (None, None, None);
        for part in inner.split(',') {
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            let value: u64 = value.trim().parse().map_err(|_| bad())?;
            match key.trim() {
                "head" => head = Some(value as usize),
                "tail" => tail = Some(value as usize),
                "sparse" => sparse = Some(value),
                _ => return Err(bad()),
            }
        }
        Ok(StrategyKind::Filter {
            head_count: head.ok_or_else(bad)?,
            tail_count: tail.ok_or_else(bad)?,
            sparse_multiple: sparse.ok_or_else(bad)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Steps between checkpoints.
    pub interval: u64,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, interval: u64) -> Self {
        StrategyConfig { kind, interval }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.interval == 0 {
            return Err(TailorError::Config("checkpoint interval must be >= 1".into()));
        }
        if let StrategyKind::Filter {
            head_count,
            tail_count,
            sparse_multiple,
        } = self.kind
        {
            if head_count + tail_count > spec.num_layers {
                return Err(TailorError::Config(format!(
                    "filter keeps {head_count}+{tail_count} boundary layers but the model has {}",
                    spec.num_layers
                )));
            }
            if sparse_multiple == 0 {
                return Err(TailorError::Config("sparse multiple must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Checkpoint counter for `step`, `None` when no checkpoint is due.
    pub fn counter_at(&self, step: u64) -> Option<u64> {
        (step > 0 && step % self.interval == 0).then(|| step / self.interval)
    }
}

/// Modules saved by checkpoint number `counter` (1-based), in canonical order.
pub fn modules_to_save(cfg: &StrategyConfig, spec: &ModelSpec, counter: u64) -> Vec<ModuleId> {
    let l = spec.num_layers;
    let mut modules = match cfg.kind {
        StrategyKind::Full => return enumerate_modules(spec),
        StrategyKind::Parity => {
            let odd_counter = counter % 2 == 1;
            let mut set: Vec<ModuleId> = (0..l)
                .filter(|i| (i % 2 == 0) == odd_counter)
                .map(ModuleId::Layer)
                .collect();
            if odd_counter {
                set.push(ModuleId::Norm);
                if !spec.weight_tied {
                    set.push(ModuleId::LmHead);
                }
            } else {
                set.push(ModuleId::EmbedTokens);
            }
            set
        }
        StrategyKind::Filter {
            head_count,
            tail_count,
            sparse_multiple,
        } => {
            let head = head_count.min(l);
            let tail_start = l.saturating_sub(tail_count).max(head);
            let mut set: Vec<ModuleId> = (0..head).chain(tail_start..l).map(ModuleId::Layer).collect();
            set.push(ModuleId::Norm);
            if counter % sparse_multiple == 0 {
                let middle = head..tail_start;
                let split = middle.start + middle.len().div_ceil(2);
                let round = counter / sparse_multiple;
                if round % 2 == 1 {
                    set.extend((middle.start..split).map(ModuleId::Layer));
                    set.push(ModuleId::EmbedTokens);
                } else {
                    set.extend((split..middle.end).map(ModuleId::Layer));
                    if !spec.weight_tied {
                        set.push(ModuleId::LmHead);
                    }
                }
            }
            set
        }
    };
    modules.sort();
    modules.dedup();
    modules
}

/// Exact bytes a run writes over its first `num_checkpoints` checkpoints.
pub fn expected_run_bytes(
    cfg: &StrategyConfig,
    spec: &ModelSpec,
    num_checkpoints: u64,
    geometry: ShardGeometry,
    hyper: AdamHyperparams,
) -> Result<u64> {
    cfg.validate(spec)?;
    let mut total = 0;
    for counter in 1..=num_checkpoints {
        let step = counter * cfg.interval;
        let trainer_state = TrainerState {
            step,
            lr: hyper.lr,
            optimizer_t: step,
            strategy: cfg.kind.to_string(),
            checkpoint_counter: counter,
            rng_seed: spec.seed,
        };
        let modules = modules_to_save(cfg, spec, counter);
        total += predict_checkpoint_bytes(spec, &modules, geometry, hyper, &trainer_state)?.total();
    }
    Ok(total)
}
