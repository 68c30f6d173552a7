//! Application configuration.
//!
//! Layers, lowest first: built-in defaults, `CASCADE_` environment
//! variables, the TOML config file, then command-line flags. Environment
//! keys use `__` between levels, e.g. `CASCADE_DEFAULTS__TOP_K=5` or
//! `CASCADE_PATHS__OUTPUT_DIR=out`.

use std::path::{Path, PathBuf};

use cascade_core::eval::SimSettings;
use cascade_core::gateway::BackendDescriptor;
use cascade_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "CASCADE_";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Items, one JSON record per line.
    pub corpus: Option<PathBuf>,
    /// Candidate embeddings (`CRV1`).
    pub embeddings: Option<PathBuf>,
    pub query_embeddings: Option<PathBuf>,
    /// Extra candidate traces, `{"id": .., "ecr": {..}}` per line.
    pub ecr_store: Option<PathBuf>,
    /// Planted relevance, needed by simulated backends and metrics.
    pub judgments: Option<PathBuf>,
    /// Training pairs for `mine`.
    pub pairs: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Logging {
    pub level: String,
}

impl Default for Logging {
    fn default() -> Self {
        Logging {
            level: "warn".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub paths: Paths,
    /// Registered backends; empty means the standard simulated set.
    pub backends: Vec<BackendDescriptor>,
    /// Fidelity and noise of simulated backends. Their seeds are derived
    /// from the run seed.
    pub sim: SimSettings,
    pub defaults: PipelineConfig,
    pub logging: Logging,
}

impl AppConfig {
    /// Defaults, then environment, then the file at `path` if given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let mut table =
            Table::try_from(AppConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut table, env_table(env)?);
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            let file: Table = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, file);
        }
        let mut cfg: AppConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.paths.resolve_relative_to(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let mut ids = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate()?;
            if !ids.insert(&b.backend_id) {
                return Err(CliError::Config(format!(
                    "backend id `{}` listed twice",
                    b.backend_id
                )));
            }
        }
        self.defaults.validate()?;
        Ok(())
    }
}

impl Paths {
    fn resolve_relative_to(&mut self, dir: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.embeddings,
            &mut self.query_embeddings,
            &mut self.ecr_store,
            &mut self.judgments,
            &mut self.pairs,
            &mut self.templates,
            &mut self.cache_dir,
            &mut self.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

/// A path that a read command needs: set and present on disk.
pub fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    let p = path
        .as_deref()
        .ok_or_else(|| CliError::Config(format!("no {what} path configured")))?;
    if !p.exists() {
        return Err(CliError::Config(format!(
            "{what} path {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn env_table(env: impl IntoIterator<Item = (String, String)>) -> Result<Table, CliError> {
    let mut out = Table::new();
    let mut vars: Vec<(String, String)> = env.into_iter().collect();
    vars.sort();
    for (key, raw) in vars {
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        // single-level names such as CASCADE_CACHE_DIR are read elsewhere
        if !rest.contains("__") {
            continue;
        }
        let parts: Vec<String> = rest.split("__").map(str::to_ascii_lowercase).collect();
        let mut node = &mut out;
        for part in &parts[..parts.len() - 1] {
            node = match node
                .entry(part.clone())
                .or_insert_with(|| Value::Table(Table::new()))
            {
                Value::Table(t) => t,
                _ => {
                    return Err(CliError::Config(format!(
                        "{key}: conflicts with another variable"
                    )))
                }
            };
        }
        node.insert(parts[parts.len() - 1].clone(), env_value(&raw));
    }
    Ok(out)
}

/// TOML literal if it parses as one, otherwise a plain string.
fn env_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Overlay `top` onto `base`, recursing into tables.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
