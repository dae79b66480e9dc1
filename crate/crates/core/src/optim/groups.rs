//! Optimizer parameter groups.
//!
//! A coarse table has two groups (every no-decay tensor, then every decay
//! tensor, each in module order). A layer-aligned table has `2L + x` groups
//! where every transformer layer owns a no-decay and a decay group and each
//! auxiliary module owns one. The layer-aligned order is fixed:
//!
//! | index              | contents                          |
//! |--------------------|-----------------------------------|
//! | 0                  | norm                              |
//! | 1 ..= L            | no-decay part of layer `i` at 1+i |
//! | L + 1              | embed_tokens                      |
//! | L + 2              | lm_head (untied only)             |
//! | remaining          | decay part of layer `i`, in order |

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TailorError};
use crate::model::{enumerate_modules, flat_tensors, tensors_of, DecayClass, ModelSpec, ModuleId};
use crate::optim::{AdamHyperparams, GroupState, OptimizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupLayout {
    Coarse,
    LayerAligned,
}

/// A contiguous run of one tensor inside a group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSegment {
    pub module: ModuleId,
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in the model-wide canonical flattening.
    pub global_offset: usize,
    pub offset_in_group: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupEntry {
    pub index: usize,
    /// Owning module; `None` for coarse groups that span the whole model.
    pub owner: Option<ModuleId>,
    pub decay_class: DecayClass,
    pub element_count: usize,
    pub segments: Vec<GroupSegment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterGroupTable {
    pub layout: GroupLayout,
    pub spec: ModelSpec,
    pub groups: Vec<GroupEntry>,
}

impl ParameterGroupTable {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    pub fn weight_tied(&self) -> bool {
        self.spec.weight_tied
    }

    pub fn group(&self, index: usize) -> Option<&GroupEntry> {
        self.groups.get(index)
    }

    /// Groups owned by any of `modules`, in ascending index order.
    pub fn groups_for_modules(&self, modules: &[ModuleId]) -> Result<Vec<usize>> {
        let mut indices = Vec::new();
        for &m in modules {
            indices.extend(group_indices_for(self, m)?);
        }
        indices.sort_unstable();
        indices.dedup();
        Ok(indices)
    }

    pub fn total_elements(&self) -> usize {
        self.groups.iter().map(|g| g.element_count).sum()
    }
}

fn make_group(
    spec: &ModelSpec,
    index: usize,
    owner: Option<ModuleId>,
    decay_class: DecayClass,
    modules: &[ModuleId],
    offsets: &HashMap<String, usize>,
) -> GroupEntry {
    let mut segments = Vec::new();
    let mut offset_in_group = 0;
    for &module in modules {
        for decl in tensors_of(spec, module).expect("valid module") {
            if decl.decay_class != decay_class {
                continue;
            }
            let len = decl.numel();
            segments.push(GroupSegment {
                module,
                global_offset: offsets[&decl.name],
                name: decl.name,
                shape: decl.shape,
                offset_in_group,
                len,
            });
            offset_in_group += len;
        }
    }
    GroupEntry {
        index,
        owner,
        decay_class,
        element_count: offset_in_group,
        segments,
    }
}

fn global_offsets(spec: &ModelSpec) -> HashMap<String, usize> {
    flat_tensors(spec)
        .into_iter()
        .map(|t| (t.decl.name, t.offset))
        .collect()
}

/// The layer-aligned `2L + x` group table.
pub fn build_group_table(spec: &ModelSpec) -> ParameterGroupTable {
    let l = spec.num_layers;
    let mut owners: Vec<(ModuleId, DecayClass)> = Vec::with_capacity(2 * l + 3);
    owners.push((ModuleId::Norm, DecayClass::NoDecay));
    owners.extend((0..l).map(|i| (ModuleId::Layer(i), DecayClass::NoDecay)));
    owners.push((ModuleId::EmbedTokens, DecayClass::Decay));
    if !spec.weight_tied {
        owners.push((ModuleId::LmHead, DecayClass::Decay));
    }
    owners.extend((0..l).map(|i| (ModuleId::Layer(i), DecayClass::Decay)));

    let offsets = global_offsets(spec);
    let groups = owners
        .into_iter()
        .enumerate()
        .map(|(index, (module, class))| make_group(spec, index, Some(module), class, &[module], &offsets))
        .collect();
    ParameterGroupTable {
        layout: GroupLayout::LayerAligned,
        spec: *spec,
        groups,
    }
}

/// The conventional two-group table: group 0 no-decay, group 1 decay.
pub fn build_coarse_table(spec: &ModelSpec) -> ParameterGroupTable {
    let modules = enumerate_modules(spec);
    let offsets = global_offsets(spec);
    let groups = vec![
        make_group(spec, 0, None, DecayClass::NoDecay, &modules, &offsets),
        make_group(spec, 1, None, DecayClass::Decay, &modules, &offsets),
    ];
    ParameterGroupTable {
        layout: GroupLayout::Coarse,
        spec: *spec,
        groups,
    }
}

pub fn build_table(spec: &ModelSpec, layout: GroupLayout) -> ParameterGroupTable {
    match layout {
        GroupLayout::Coarse => build_coarse_table(spec),
        GroupLayout::LayerAligned => build_group_table(spec),
    }
}

/// Group indices owned by `module`: `[no_decay, decay]` for a layer, one index otherwise.
pub fn group_indices_for(table: &ParameterGroupTable, module: ModuleId) -> Result<Vec<usize>> {
    if table.layout != GroupLayout::LayerAligned {
        return Err(TailorError::Geometry(
            "coarse group tables have no per-module groups".into(),
        ));
    }
    table.spec.check_module(module)?;
    let l = table.num_layers();
    let decay_base = if table.weight_tied() { l + 2 } else { l + 3 };
    Ok(match module {
        ModuleId::Layer(i) => vec![1 + i, decay_base + i],
        ModuleId::Norm => vec![0],
        ModuleId::EmbedTokens => vec![l + 1],
        ModuleId::LmHead => vec![l + 2],
    })
}

/// Source location of each tensor: tensor name -> (group index, offset in group).
fn tensor_locations(table: &ParameterGroupTable) -> HashMap<&str, (usize, usize)> {
    table
        .groups
        .iter()
        .flat_map(|g| {
            g.segments
                .iter()
                .map(move |s| (s.name.as_str(), (g.index, s.offset_in_group)))
        })
        .collect()
}

/// Re-slice `state` (laid out per `from`) into the layout of `to`.
///
/// Every target group takes the hyperparameters of the source group holding
/// its first tensor. Element values are moved, never recomputed.
pub fn regroup(
    state: &OptimizerState,
    from: &ParameterGroupTable,
    to: &ParameterGroupTable,
) -> Result<OptimizerState> {
    if !from.spec.same_geometry(&to.spec) {
        return Err(TailorError::Geometry("group tables describe different models".into()));
    }
    if state.groups.len() != from.len() {
        return Err(TailorError::Geometry(format!(
            "state has {} groups, table expects {}",
            state.groups.len(),
            from.len()
        )));
    }
    for entry in &from.groups {
        let g = state.groups.get(&entry.index).ok_or_else(|| {
            TailorError::Geometry(format!("state lacks group {}", entry.index))
        })?;
        if g.len() != entry.element_count || !g.is_consistent() {
            return Err(TailorError::Geometry(format!(
                "group {} has {} elements, table expects {}",
                entry.index,
                g.len(),
                entry.element_count
            )));
        }
    }

    let locations = tensor_locations(from);
    let mut groups = BTreeMap::new();
    for entry in &to.groups {
        let mut out = GroupState::zeros(entry.element_count, AdamHyperparams::default());
        for (k, seg) in entry.segments.iter().enumerate() {
            let (src_group, src_off) = locations[seg.name.as_str()];
            let src = &state.groups[&src_group];
            if k == 0 {
                out.hyper = src.hyper;
            }
            let dst = seg.offset_in_group..seg.offset_in_group + seg.len;
            let from_range = src_off..src_off + seg.len;
            out.master[dst.clone()].copy_from_slice(&src.master[from_range.clone()]);
            out.exp_avg[dst.clone()].copy_from_slice(&src.exp_avg[from_range.clone()]);
            out.exp_avg_sq[dst].copy_from_slice(&src.exp_avg_sq[from_range]);
        }
        groups.insert(entry.index, out);
    }
    Ok(OptimizerState {
        layout: to.layout,
        t: state.t,
        groups,
    })
}

/// Split a two-group state into the layer-aligned layout of `table`.
pub fn coarse_to_fine(coarse: &OptimizerState, table: &ParameterGroupTable) -> Result<OptimizerState> {
    if coarse.layout != GroupLayout::Coarse || table.layout != GroupLayout::LayerAligned {
        return Err(TailorError::Geometry("expected coarse state and layer-aligned table".into()));
    }
    regroup(coarse, &build_coarse_table(&table.spec), table)
}

/// Concatenate a layer-aligned state back into the two-group layout.
pub fn fine_to_coarse(fine: &OptimizerState, table: &ParameterGroupTable) -> Result<OptimizerState> {
    if fine.layout != GroupLayout::LayerAligned || table.layout != GroupLayout::LayerAligned {
        return Err(TailorError::Geometry("expected layer-aligned state and table".into()));
    }
    regroup(fine, table, &build_coarse_table(&table.spec))
}
