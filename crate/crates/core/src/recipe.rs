//! YAML merge recipes.
//!
//! ```yaml
//! merge_method: passthrough
//! num_ranks: 4
//! base_checkpoint: run/checkpoint-200     # optional fallback source
//! slices:
//!   - source: run/checkpoint-100
//!     layers: [0, 2]                       # or {start: 0, end: 2}, end exclusive
//!     targets: [0, 2]                      # optional, defaults to `layers`
//! aux:
//!   embed_tokens: run/checkpoint-200
//!   norm: run/checkpoint-100
//!   lm_head: run/checkpoint-100
//! config_from: latest                      # or a checkpoint path
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, TailorError};
use crate::model::{enumerate_modules, ModuleId};
use crate::store::{list_checkpoints, read_checkpoint_meta, CheckpointMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSelection {
    List(Vec<usize>),
    Range(LayerRange),
}

impl LayerSelection {
    pub fn indices(&self) -> Vec<usize> {
        match self {
            LayerSelection::List(v) => v.clone(),
            LayerSelection::Range(r) => (r.start..r.end).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub source: PathBuf,
    pub layers: LayerSelection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
}

impl SliceSpec {
    /// (source layer, target layer) pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let layers = self.layers.indices();
        let targets = self.targets.clone().unwrap_or_else(|| layers.clone());
        layers.into_iter().zip(targets).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxSources {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_tokens: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lm_head: Option<PathBuf>,
}

impl AuxSources {
    pub fn is_empty(&self) -> bool {
        self.embed_tokens.is_none() && self.norm.is_none() && self.lm_head.is_none()
    }

    pub fn entries(&self) -> Vec<(&'static str, ModuleId, &PathBuf)> {
        let mut out = Vec::new();
        if let Some(p) = &self.embed_tokens {
            out.push(("aux.embed_tokens", ModuleId::EmbedTokens, p));
        }
        if let Some(p) = &self.norm {
            out.push(("aux.norm", ModuleId::Norm, p));
        }
        if let Some(p) = &self.lm_head {
            out.push(("aux.lm_head", ModuleId::LmHead, p));
        }
        out
    }

    fn set(&mut self, module: ModuleId, path: PathBuf) {
        match module {
            ModuleId::EmbedTokens => self.embed_tokens = Some(path),
            ModuleId::Norm => self.norm = Some(path),
            ModuleId::LmHead => self.lm_head = Some(path),
            ModuleId::Layer(_) => unreachable!("layers go in slices"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum ConfigSource {
    /// The source with the greatest step.
    #[default]
    Latest,
    Path(PathBuf),
}

impl fmt::Display for ConfigSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigSource::Latest => f.write_str("latest"),
            ConfigSource::Path(p) => write!(f, "{}", p.display()),
        }
    }
}

impl Serialize for ConfigSource {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConfigSource {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(if s == "latest" {
            ConfigSource::Latest
        } else {
            ConfigSource::Path(PathBuf::from(s))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub merge_method: MergeMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_checkpoint: Option<PathBuf>,
    pub num_ranks: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slices: Vec<SliceSpec>,
    #[serde(default, skip_serializing_if = "AuxSources::is_empty")]
    pub aux: AuxSources,
    #[serde(default)]
    pub config_from: ConfigSource,
}

impl MergeRecipe {
    /// Recipe drawing every module from `checkpoint`.
    pub fn identity(checkpoint: impl Into<PathBuf>, num_ranks: usize) -> Self {
        let checkpoint = checkpoint.into();
        MergeRecipe {
            merge_method: MergeMethod::Passthrough,
            base_checkpoint: Some(checkpoint.clone()),
            num_ranks,
            slices: Vec::new(),
            aux: AuxSources::default(),
            config_from: ConfigSource::Path(checkpoint),
        }
    }

    /// Every checkpoint path the recipe mentions, deduplicated.
    pub fn referenced_paths(&self) -> Vec<PathBuf> {
        let mut paths: Vec<PathBuf> = self.base_checkpoint.iter().cloned().collect();
        paths.extend(self.slices.iter().map(|s| s.source.clone()));
        paths.extend(self.aux.entries().into_iter().map(|(_, _, p)| p.clone()));
        if let ConfigSource::Path(p) = &self.config_from {
            paths.push(p.clone());
        }
        paths.sort();
        paths.dedup();
        paths
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("recipe serializes")
    }
}

/// Parse and schema-check a recipe. Errors name the offending field.
pub fn parse_recipe(text: &str) -> Result<MergeRecipe> {
    let de = serde_yaml::Deserializer::from_str(text);
    let recipe: MergeRecipe = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        TailorError::recipe(if path == "." { "<root>".to_string() } else { path }, e.inner().to_string())
    })?;
    if recipe.num_ranks == 0 {
        return Err(TailorError::recipe("num_ranks", "must be >= 1"));
    }
    for (i, slice) in recipe.slices.iter().enumerate() {
        let layers = slice.layers.indices();
        if layers.is_empty() {
            return Err(TailorError::recipe(format!("slices[{i}].layers"), "selects no layers"));
        }
        if let Some(targets) = &slice.targets {
            if targets.len() != layers.len() {
                return Err(TailorError::recipe(
                    format!("slices[{i}].targets"),
                    format!("{} targets for {} layers", targets.len(), layers.len()),
                ));
            }
        }
    }
    Ok(recipe)
}

pub fn read_recipe(path: &Path) -> Result<MergeRecipe> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            TailorError::MissingArtifact(path.to_path_buf())
        } else {
            TailorError::storage(path, e)
        }
    })?;
    parse_recipe(&text)
}

/// Build the recovery recipe for a run that failed at `failure_step`: each
/// module comes from the latest checkpoint at or before the failure that
/// saved it, and configuration from the latest checkpoint overall.
pub fn recipe_from_manifests(run_dir: &Path, failure_step: u64) -> Result<MergeRecipe> {
    let all = list_checkpoints(run_dir)?;
    let Some((_, any_ckpt)) = all.first() else {
        return Err(TailorError::Config(format!("{} holds no checkpoints", run_dir.display())));
    };
    let spec = read_checkpoint_meta(any_ckpt)?.spec;
    let run_dir = run_dir
        .canonicalize()
        .map_err(|e| TailorError::storage(run_dir, e))?;

    let metas: Vec<CheckpointMeta> = all
        .iter()
        .filter(|(step, _)| *step <= failure_step)
        .map(|(_, p)| read_checkpoint_meta(&run_dir.join(p.file_name().expect("listed dir"))))
        .collect::<Result<_>>()?;

    let mut chosen: BTreeMap<ModuleId, &CheckpointMeta> = BTreeMap::new();
    let mut missing = Vec::new();
    for module in enumerate_modules(&spec) {
        match metas.iter().rev().find(|m| m.manifest.contains(module)) {
            Some(meta) => {
                chosen.insert(module, meta);
            }
            None => missing.push(module),
        }
    }
    if !missing.is_empty() {
        return Err(TailorError::UnrecoverableModule(missing));
    }

    let latest = metas.last().expect("some module was found");
    let num_ranks = latest.optim_meta.num_ranks;
    if let Some(m) = metas.iter().find(|m| m.optim_meta.num_ranks != num_ranks) {
        return Err(TailorError::Geometry(format!(
            "{} uses {} ranks, {} uses {num_ranks}",
            m.path.display(),
            m.optim_meta.num_ranks,
            latest.path.display()
        )));
    }

    let first = chosen.values().next().expect("non-empty").path.clone();
    if chosen.values().all(|m| m.path == first) {
        return Ok(MergeRecipe {
            config_from: ConfigSource::Path(latest.path.clone()),
            ..MergeRecipe::identity(first, num_ranks)
        });
    }

    let mut layers_by_source: BTreeMap<(u64, PathBuf), Vec<usize>> = BTreeMap::new();
    let mut aux = AuxSources::default();
    for (module, meta) in &chosen {
        match module {
            ModuleId::Layer(i) => layers_by_source
                .entry((meta.step(), meta.path.clone()))
                .or_default()
                .push(*i),
            aux_module => aux.set(*aux_module, meta.path.clone()),
        }
    }
    let slices = layers_by_source
        .into_iter()
        .map(|((_, source), layers)| SliceSpec {
            source,
            layers: LayerSelection::List(layers),
            targets: None,
        })
        .collect();
    Ok(MergeRecipe {
        merge_method: MergeMethod::Passthrough,
        base_checkpoint: None,
        num_ranks,
        slices,
        aux,
        config_from: ConfigSource::Path(latest.path.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const PARITY: &str = r#"
merge_method: passthrough
num_ranks: 2
slices:
  - source: run/checkpoint-100
    layers: [1, 3]
  - source: run/checkpoint-200
    layers: {start: 0, end: 4}
    targets: [0, 2, 4, 6]
aux:
  embed_tokens: run/checkpoint-100
  norm: run/checkpoint-200
  lm_head: run/checkpoint-200
config_from: latest
"#;

    #[test]
    fn parses_parity_recipe() {
        let r = parse_recipe(PARITY).unwrap();
        assert_eq!(r.slices.len(), 2);
        assert_eq!(r.aux.entries().len(), 3);
        assert_eq!(r.config_from, ConfigSource::Latest);
        assert_eq!(r.slices[0].pairs(), vec![(1, 1), (3, 3)]);
        assert_eq!(r.slices[1].pairs(), vec![(0, 0), (1, 2), (2, 4), (3, 6)]);
        assert_eq!(parse_recipe(&r.to_yaml()).unwrap(), r);
    }

    #[test]
    fn base_only_recipe() {
        let r = parse_recipe("merge_method: passthrough\nnum_ranks: 1\nbase_checkpoint: ckpt\n").unwrap();
        assert_eq!(r.base_checkpoint, Some(PathBuf::from("ckpt")));
        assert!(r.slices.is_empty());
        assert!(r.aux.is_empty());
    }

    fn field_of(text: &str) -> String {
        match parse_recipe(text) {
            Err(TailorError::Recipe { field, .. }) => field,
            other => panic!("expected recipe error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected_with_path() {
        assert_eq!(field_of("merge_method: passthrough\nnum_ranks: 1\nbase: x\n"), "base");
        assert_eq!(
            field_of("merge_method: passthrough\nnum_ranks: 1\naux: {embed: x}\n"),
            "aux.embed"
        );
        let f = field_of("merge_method: passthrough\nnum_ranks: 1\nslices: [{source: a, layers: [0], extra: 1}]\n");
        assert_eq!(f, "slices[0].extra");
    }

    #[test]
    fn only_passthrough_accepted() {
        assert_eq!(field_of("merge_method: slerp\nnum_ranks: 1\n"), "merge_method");
    }

    #[test]
    fn target_count_must_match() {
        let text = "merge_method: passthrough\nnum_ranks: 1\nslices: [{source: a, layers: [0, 1], targets: [3]}]\n";
        assert_eq!(field_of(text), "slices[0].targets");
        let text = "merge_method: passthrough\nnum_ranks: 0\nbase_checkpoint: a\n";
        assert_eq!(field_of(text), "num_ranks");
    }
}
