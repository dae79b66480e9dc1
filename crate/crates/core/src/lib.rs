//! Layer-wise checkpoint tailoring.
//!
//! Training checkpoints here are split along the model's layer structure:
//! BF16 weights per tensor, and FP32 optimizer state (masters plus both Adam
//! moments) in `2L + x` layer-aligned parameter groups sharded over `N`
//! ranks. That makes it possible to save only part of the model at each
//! checkpoint and later merge modules from several partial checkpoints into
//! one that resumes training exactly.
//!
//! * [`model`]: module and tensor layout of the toy transformer.
//! * [`optim`]: AdamW and the coarse/layer-aligned group tables.
//! * [`store`]: checkpoint directory format.
//! * [`strategy`]: full, parity and filter save schedules.
//! * [`recipe`] and [`merge`]: YAML recipes and passthrough merging.
//! * [`trainer`]: deterministic training loop used to produce and resume
//!   checkpoints.
//! * [`report`]: inspection, size accounting and bitwise verification.

pub mod bf16;
pub mod container;
pub mod error;
pub mod merge;
pub mod model;
pub mod optim;
pub mod recipe;
pub mod report;
pub mod store;
pub mod strategy;
pub mod trainer;

pub use error::{Result, TailorError};
pub use merge::{execute_plan, load_sources, merge, resolve_plan, MergePlan, MergeReport};
pub use model::{enumerate_modules, tensors_of, DecayClass, ModelSpec, ModuleId, TensorDecl};
pub use optim::{
    apply_step, build_coarse_table, build_group_table, coarse_to_fine, fine_to_coarse, group_indices_for,
    AdamHyperparams, GroupLayout, GroupState, OptimizerState, ParameterGroupTable,
};
pub use recipe::{parse_recipe, recipe_from_manifests, MergeRecipe};
pub use store::{read_checkpoint, write_checkpoint, Checkpoint, SaveManifest, ShardGeometry};
pub use strategy::{expected_run_bytes, modules_to_save, StrategyConfig, StrategyKind};
pub use trainer::{inject_failure, resume, train, Trainer, TrainerConfig};
