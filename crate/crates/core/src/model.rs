//! Layer-wise model description.
//!
//! The model here is only a named, shaped and decay-classified parameter
//! set. Every other module relies on two orderings defined in this file:
//! the module order returned by [`enumerate_modules`] and the per-module
//! tensor order returned by [`tensors_of`]. Flattening anywhere in the
//! crate walks tensors in exactly that order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, TailorError};

/// Geometry of the toy transformer. Serialized verbatim as `config.json`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub weight_tied: bool,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            num_layers: 4,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab_size: 32,
            weight_tied: false,
            seed: 0,
        }
    }
}

impl ModelSpec {
    /// Desk-scale spec with the default dimensions and `num_layers` layers.
    pub fn desk(num_layers: usize) -> Self {
        ModelSpec {
            num_layers,
            ..ModelSpec::default()
        }
    }

    pub fn tied(mut self, tied: bool) -> Self {
        self.weight_tied = tied;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(TailorError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// L + 3 untied, L + 2 tied.
    pub fn module_count(&self) -> usize {
        self.num_layers + self.aux_count()
    }

    /// Number of auxiliary (non-transformer) modules.
    pub fn aux_count(&self) -> usize {
        if self.weight_tied {
            2
        } else {
            3
        }
    }

    pub fn check_module(&self, module: ModuleId) -> Result<()> {
        match module {
            ModuleId::Layer(i) if i >= self.num_layers => Err(TailorError::InvalidModule(module)),
            ModuleId::LmHead if self.weight_tied => Err(TailorError::InvalidModule(module)),
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        enumerate_modules(self)
            .into_iter()
            .map(|m| module_param_count(self, m))
            .sum()
    }

    /// True when the two specs describe identically shaped models.
    /// The initialization seed is ignored.
    pub fn same_geometry(&self, other: &ModelSpec) -> bool {
        ModelSpec { seed: 0, ..*self } == ModelSpec { seed: 0, ..*other }
    }
}

/// One layer-wise unit of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleId {
    EmbedTokens,
    Layer(usize),
    Norm,
    LmHead,
}

impl ModuleId {
    pub fn is_aux(&self) -> bool {
        !matches!(self, ModuleId::Layer(_))
    }

    /// Prefix shared by every tensor name of this module.
    fn tensor_prefix(&self) -> String {
        match self {
            ModuleId::EmbedTokens => "model.embed_tokens".to_string(),
            ModuleId::Layer(i) => format!("model.layers.{i}"),
            ModuleId::Norm => "model.norm".to_string(),
            ModuleId::LmHead => "lm_head".to_string(),
        }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModuleId::EmbedTokens => f.write_str("embed_tokens"),
            ModuleId::Layer(i) => write!(f, "layers.{i}"),
            ModuleId::Norm => f.write_str("norm"),
            ModuleId::LmHead => f.write_str("lm_head"),
        }
    }
}

impl FromStr for ModuleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embed_tokens" => Ok(ModuleId::EmbedTokens),
            "norm" => Ok(ModuleId::Norm),
            "lm_head" => Ok(ModuleId::LmHead),
            _ => s
                .strip_prefix("layers.")
                .and_then(|i| i.parse().ok())
                .map(ModuleId::Layer)
                .ok_or_else(|| format!("unknown module `{s}`")),
        }
    }
}

impl Serialize for ModuleId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModuleId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayClass {
    Decay,
    NoDecay,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay_class: DecayClass,
}

impl TensorDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Modules in canonical order: embed, layers 0..L, norm, then lm_head when untied.
pub fn enumerate_modules(spec: &ModelSpec) -> Vec<ModuleId> {
    let mut modules = Vec::with_capacity(spec.module_count());
    modules.push(ModuleId::EmbedTokens);
    modules.extend((0..spec.num_layers).map(ModuleId::Layer));
    modules.push(ModuleId::Norm);
    if !spec.weight_tied {
        modules.push(ModuleId::LmHead);
    }
    modules
}

/// Tensors owned by `module`, in canonical declaration order.
pub fn tensors_of(spec: &ModelSpec, module: ModuleId) -> Result<Vec<TensorDecl>> {
    spec.check_module(module)?;
    let h = spec.hidden_dim;
    let ffn = spec.ffn_dim;
    let prefix = module.tensor_prefix();
    let decl = |suffix: &str, shape: Vec<usize>, decay_class| TensorDecl {
        name: format!("{prefix}.{suffix}"),
        shape,
        decay_class,
    };
    let tensors = match module {
        ModuleId::Layer(_) => vec![
            decl("input_layernorm.weight", vec![h], DecayClass::NoDecay),
            decl("post_attention_layernorm.weight", vec![h], DecayClass::NoDecay),
            decl("attn.q_proj.weight", vec![h, h], DecayClass::Decay),
            decl("attn.k_proj.weight", vec![h, h], DecayClass::Decay),
            decl("attn.v_proj.weight", vec![h, h], DecayClass::Decay),
            decl("attn.o_proj.weight", vec![h, h], DecayClass::Decay),
            decl("mlp.gate_proj.weight", vec![ffn, h], DecayClass::Decay),
            decl("mlp.up_proj.weight", vec![ffn, h], DecayClass::Decay),
            decl("mlp.down_proj.weight", vec![h, ffn], DecayClass::Decay),
        ],
        ModuleId::EmbedTokens | ModuleId::LmHead => {
            vec![decl("weight", vec![spec.vocab_size, h], DecayClass::Decay)]
        }
        ModuleId::Norm => vec![decl("weight", vec![h], DecayClass::NoDecay)],
    };
    Ok(tensors)
}

pub fn module_param_count(spec: &ModelSpec, module: ModuleId) -> usize {
    tensors_of(spec, module)
        .map(|ts| ts.iter().map(TensorDecl::numel).sum())
        .unwrap_or(0)
}

/// A tensor placed in the canonical flattening of the whole model.
#[derive(Debug, Clone)]
pub struct FlatTensor {
    pub module: ModuleId,
    pub decl: TensorDecl,
    /// Offset of the first element in the model-wide flattening.
    pub offset: usize,
}

/// Every tensor of the model with its model-wide element offset.
pub fn flat_tensors(spec: &ModelSpec) -> Vec<FlatTensor> {
    let mut offset = 0;
    let mut out = Vec::new();
    for module in enumerate_modules(spec) {
        for decl in tensors_of(spec, module).expect("enumerated module is valid") {
            let numel = decl.numel();
            out.push(FlatTensor {
                module,
                decl,
                offset,
            });
            offset += numel;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn module_counts_match_reference_models() {
        // 32-layer untied and 16-layer tied geometries.
        let untied = ModelSpec::desk(32);
        assert_eq!(enumerate_modules(&untied).len(), 35);
        let tied = ModelSpec::desk(16).tied(true);
        assert_eq!(enumerate_modules(&tied).len(), 18);
    }

    #[test]
    fn minimal_spec_order() {
        let spec = ModelSpec::desk(1);
        assert_eq!(
            enumerate_modules(&spec),
            vec![
                ModuleId::EmbedTokens,
                ModuleId::Layer(0),
                ModuleId::Norm,
                ModuleId::LmHead
            ]
        );
    }

    #[test]
    fn layer_tensor_classes() {
        let spec = ModelSpec::default();
        let ts = tensors_of(&spec, ModuleId::Layer(0)).unwrap();
        assert_eq!(ts.len(), 9);
        let no_decay = ts
            .iter()
            .filter(|t| t.decay_class == DecayClass::NoDecay)
            .count();
        assert_eq!(no_decay, 2);
        assert_eq!(ts[0].name, "model.layers.0.input_layernorm.weight");
    }

    #[test]
    fn aux_tensor_shapes() {
        let spec = ModelSpec::default();
        let norm = tensors_of(&spec, ModuleId::Norm).unwrap();
        assert_eq!(norm.len(), 1);
        assert_eq!(norm[0].shape, vec![8]);
        assert_eq!(norm[0].decay_class, DecayClass::NoDecay);

        let embed = tensors_of(&spec, ModuleId::EmbedTokens).unwrap();
        assert_eq!(embed[0].shape, vec![32, 8]);
        assert_eq!(embed[0].decay_class, DecayClass::Decay);
    }

    #[test]
    fn lm_head_rejected_when_tied() {
        let spec = ModelSpec::default().tied(true);
        assert!(matches!(
            tensors_of(&spec, ModuleId::LmHead),
            Err(TailorError::InvalidModule(ModuleId::LmHead))
        ));
        assert!(tensors_of(&spec, ModuleId::Layer(4)).is_err());
    }

    #[test]
    fn tensor_names_unique_and_offsets_tile() {
        for tied in [false, true] {
            let spec = ModelSpec::desk(5).tied(tied);
            let flat = flat_tensors(&spec);
            let names: HashSet<_> = flat.iter().map(|t| t.decl.name.clone()).collect();
            assert_eq!(names.len(), flat.len());
            let mut expected = 0;
            for t in &flat {
                assert_eq!(t.offset, expected);
                expected += t.decl.numel();
            }
            assert_eq!(expected, spec.param_count());
        }
    }

    #[test]
    fn module_id_text_round_trip() {
        for m in enumerate_modules(&ModelSpec::desk(12)) {
            assert_eq!(m.to_string().parse::<ModuleId>().unwrap(), m);
        }
        assert!("layers.x".parse::<ModuleId>().is_err());
        assert!("head".parse::<ModuleId>().is_err());
    }

    #[test]
    fn zero_dims_rejected() {
        let spec = ModelSpec {
            hidden_dim: 0,
            ..ModelSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(ModelSpec::desk(0).validate().is_err());
    }
}
