//! Run configuration: TOML file, then `TRNA_*` environment variables, then
//! `--set section.key=value` and dedicated flags, in increasing precedence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bagging::{BaggingParams, Split};
use crate::error::{bail, Error, Result};
use crate::eval::{ApNorm, DEFAULT_ALPHA};
use crate::genes::DEFAULT_FRACTIONS;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "TRNA_";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: DEFAULT_FRACTIONS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub subsets: usize,
    pub ks: Vec<usize>,
    pub ap_norm: ApNorm,
    pub seed: u64,
    pub split: Split,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            subsets: 100,
            ks: vec![5, 10],
            ap_norm: ApNorm::K,
            seed: 0,
            split: Split::Test,
        }
    }
}

/// Everything a subcommand may read. The model section supplies
/// architecture hyperparameters; `k`, `d`, `genes` and `classes` are taken
/// from the dataset at training time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Worker threads for every parallel section; all cores when unset.
    pub workers: Option<usize>,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub bagging: BaggingParams,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            workers: None,
            paths: Paths::default(),
            model: ModelConfig::desk(synth.d, synth.genes, synth.classes),
            synth,
            bagging: BaggingParams::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!(Config, "override {} descends into a non-table", path.join(".")),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies one `section.key=value` override.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, value)) = assignment.split_once('=') else {
        bail!(Config, "override {assignment:?} is not of the form key=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    set_path(table, &path, parse_value(value.trim()))
}

/// Maps `TRNA_SECTION_KEY=value` onto `section.key`; `TRNA_WORKERS` is the
/// single top-level key.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (name, value) in vars {
        let key = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let path: Vec<&str> = match key.split_once('_') {
            _ if key == "workers" => vec!["workers"],
            Some((section, rest)) => vec![section, rest],
            None => bail!(Config, "environment variable {name} names no config key"),
        };
        set_path(table, &path, parse_value(&value))?;
    }
    Ok(())
}

impl RunConfig {
    /// Resolves defaults, file, environment and overrides into a validated
    /// configuration.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_env(&mut table, env)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == Some(0) {
            bail!(Config, "workers must be positive");
        }
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.bagging.k == 0 || self.bagging.bags_per_slide == 0 {
            bail!(Config, "bagging k and bags_per_slide must be positive");
        }
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) {
            bail!(Config, "eval alpha must lie in (0, 1)");
        }
        if self.search.subsets == 0 || self.search.ks.is_empty() || self.search.ks.contains(&0) {
            bail!(Config, "search needs a positive subset count and positive K values");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(env: &[(&str, &str)], overrides: &[&str]) -> Result<RunConfig> {
        RunConfig::resolve(
            None,
            env.iter().map(|(k, v)| (k.to_string(), v.to_string())),
            &overrides.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        )
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn precedence_is_env_then_override() {
        let c = resolve(&[("TRNA_TRAIN_LR", "0.01"), ("TRNA_TRAIN_WEIGHT_DECAY", "0.2")], &[]).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.weight_decay, 0.2);
        let c = resolve(&[("TRNA_TRAIN_LR", "0.01")], &["train.lr=0.5"]).unwrap();
        assert_eq!(c.train.lr, 0.5);
        let c = resolve(&[("TRNA_WORKERS", "3"), ("OTHER", "x")], &["search.ks=[1, 3]"]).unwrap();
        assert_eq!(c.workers, Some(3));
        assert_eq!(c.search.ks, vec![1, 3]);
        let c = resolve(&[], &["eval.split=val", "train.gene_loss=absolute"]).unwrap();
        assert_eq!(c.eval.split, Split::Val);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for o in ["train.learning_rate=1", "nosuch.key=1", "model.depth=0", "train.lr=-1", "oops"] {
            assert!(matches!(resolve(&[], &[o]), Err(Error::Config(_))), "{o}");
        }
        assert!(matches!(resolve(&[("TRNA_MODEL_DEPTHS", "2")], &[]), Err(Error::Config(_))));
    }
}
