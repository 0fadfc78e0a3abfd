//! Tool configuration: a TOML file merged with dotted-key overrides,
//! where overrides win and unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srdistill_core::latent_distill::{
    LatentConfig, PretrainConfig, DEFAULT_LATENT_DIM, DEFAULT_OUT_SIZE,
};
use srdistill_core::models::{ArchConfig, Architecture, TrainSchedule};
use srdistill_core::pixel_distill::DistillConfig;
use srdistill_core::{Result, SrError};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Defaults for the prepare subcommand; flags override per run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSection {
    pub scale: usize,
    pub size: usize,
    pub stride: usize,
}

impl Default for PrepareSection {
    fn default() -> Self {
        Self { scale: 2, size: 96, stride: 48 }
    }
}

/// Toy generator shape used by the latent pathway.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub latent_dim: usize,
    pub out_size: usize,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self { latent_dim: DEFAULT_LATENT_DIM, out_size: DEFAULT_OUT_SIZE }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub border_crop: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { border_crop: 0 }
    }
}

/// The whole resolved tool configuration; a copy is written next to the
/// outputs of every run before any work starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_root: PathBuf,
    pub distill_architecture: Architecture,
    pub prepare: PrepareSection,
    pub arch: ArchConfig,
    pub train: TrainSchedule,
    pub distill: DistillConfig,
    pub latent: LatentConfig,
    pub pretrain: PretrainConfig,
    pub generator: GeneratorSection,
    pub eval: EvalSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            out_root: PathBuf::from("runs"),
            distill_architecture: Architecture::Srcnn,
            prepare: PrepareSection::default(),
            arch: ArchConfig::default(),
            train: TrainSchedule::default(),
            distill: DistillConfig::default(),
            latent: LatentConfig::default(),
            pretrain: PretrainConfig::default(),
            generator: GeneratorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    if let Ok(table) = doc.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Applies `KEY=VALUE` items onto a parsed TOML table, creating
/// intermediate tables along dotted paths.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| SrError::Config(format!("override {item:?} must be KEY=VALUE")))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(SrError::Config(format!("override key {key:?} has an empty segment")));
        }
        let mut node = &mut *table;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| {
                    SrError::Config(format!(
                        "override key {key:?} descends into non-table value at {part:?}"
                    ))
                })?;
        }
        node.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    }
    Ok(())
}

fn read_table(file: Option<&Path>) -> Result<toml::Table> {
    match file {
        None => Ok(toml::Table::new()),
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            text.parse::<toml::Table>()
                .map_err(|e| SrError::Config(format!("{}: {e}", path.display())))
        }
    }
}

/// File values merged under overrides, deserialized strictly so an
/// unknown or misspelled key fails naming the offender.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
    let mut table = read_table(file)?;
    apply_overrides(&mut table, overrides)?;
    toml::Value::Table(table)
        .try_into::<CliConfig>()
        .map_err(|e| SrError::Config(e.to_string()))
}

/// Same merge for an experiment grid spec, rebasing relative paths onto
/// the spec file's directory.
pub fn resolve_spec(
    path: &Path,
    overrides: &[String],
) -> Result<srdistill_core::harness::ExperimentSpec> {
    let mut table = read_table(Some(path))?;
    apply_overrides(&mut table, overrides)?;
    let mut spec: srdistill_core::harness::ExperimentSpec = toml::Value::Table(table)
        .try_into()
        .map_err(|e| SrError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let rebase = |p: &mut PathBuf| {
        if p.is_relative() && !p.as_os_str().is_empty() {
            *p = base.join(&*p);
        }
    };
    rebase(&mut spec.data_dir);
    for ts in &mut spec.testsets {
        rebase(&mut ts.dir);
    }
    if let Some(p) = &mut spec.distill.pretrained_checkpoint {
        rebase(p);
    }
    if let Some(p) = &mut spec.latent.pretrained_checkpoint {
        rebase(p);
    }
    Ok(spec)
}
