use std::fs;
use std::path::{Path, PathBuf};

use ecotoll::datagen::DatagenConfig;
use ecotoll::embedding::WalkConfig;
use ecotoll::evaluation::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::CliError;

/// Every tunable of a run. Unknown keys are rejected at every level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of data generation, embedding and
    /// training.
    pub seed: Option<u64>,
    pub data: DatagenConfig,
    pub embedding: WalkConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Defaults, then the config file, then `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.apply_seed();
        Ok(cfg)
    }

    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.embedding.seed = s;
            self.experiment.train.seed = s;
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Sets a dotted key such as `experiment.train.max_epochs=5`. The value is
/// read as a TOML value, falling back to a plain string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// What a run did and with which inputs; its hash names the run directory.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub inputs: Vec<(String, String)>,
    pub config: &'a RunConfig,
}

impl RunManifest<'_> {
    pub fn render(&self) -> Result<String, CliError> {
        let mut inputs = Table::new();
        for (k, v) in &self.inputs {
            inputs.insert(k.clone(), Value::String(v.clone()));
        }
        let mut top = Table::new();
        top.insert("command".into(), Value::String(self.command.into()));
        top.insert("inputs".into(), Value::Table(inputs));
        let cfg: Table = toml::from_str(&self.config.to_toml()?).map_err(|e| CliError::Config(e.to_string()))?;
        top.insert("config".into(), Value::Table(cfg));
        toml::to_string(&top).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String, CliError> {
        let digest = Sha256::digest(self.render()?.as_bytes());
        Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
    }

    /// Creates `<out>/<command>-<hash>/` and writes `run.toml` into it.
    pub fn create_dir(&self, out: &Path) -> Result<PathBuf, CliError> {
        let dir = out.join(format!("{}-{}", self.command, self.hash()?));
        fs::create_dir_all(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        fs::write(dir.join("run.toml"), self.render()?).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(dir)
    }
}
