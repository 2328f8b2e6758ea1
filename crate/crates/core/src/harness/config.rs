use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::TrainConfig;
use crate::embed::{DEFAULT_DIM, DEFAULT_HASH_SEED};
use crate::error::{Error, Result};
use crate::parser::{FormatSpec, ParserConfig};

use super::synth::SynthSpec;

/// Prefix of environment variables that override file values:
/// `LOGTGN_<SECTION>_<KEY>` for sectioned keys, `LOGTGN_<KEY>` for top-level ones.
pub const ENV_PREFIX: &str = "LOGTGN_";

const SECTIONS: [&str; 5] = ["data", "parser", "embedding", "train", "synth"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub input: Option<PathBuf>,
    /// `bgl`, `synthetic`, or a layout such as `<Label> <Timestamp> <Content>`.
    pub format: String,
    pub head_limit: Option<usize>,
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input: None,
            format: "synthetic".into(),
            head_limit: None,
            split_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Hashed,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: ProviderKind,
    /// Precomputed vector table for the external provider.
    pub path: Option<PathBuf>,
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: ProviderKind::Hashed,
            path: None,
            dim: DEFAULT_DIM,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }
}

/// Everything a run needs. The top-level `seed` drives training, negative sampling,
/// projections and the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub parser: ParserConfig,
    pub embedding: EmbeddingConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            parser: ParserConfig::default(),
            embedding: EmbeddingConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        }
    }
}

fn env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Parses a TOML document and applies overrides from `(name, value)` pairs.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (name, raw) in overrides {
            let key = name[ENV_PREFIX.len()..].to_lowercase();
            let section = SECTIONS
                .iter()
                .find(|s| key.starts_with(&format!("{s}_")))
                .copied();
            let value = env_value(&raw);
            match section {
                Some(s) => {
                    let field = key[s.len() + 1..].to_string();
                    let entry = table
                        .entry(s.to_string())
                        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                    let sub = entry
                        .as_table_mut()
                        .ok_or_else(|| Error::Config(format!("[{s}] is not a section")))?;
                    sub.insert(field, value);
                }
                None => {
                    table.insert(key, value);
                }
            }
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file (if any) and applies `LOGTGN_*` environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::Config("split ratio must lie in (0, 1)".into()));
        }
        FormatSpec::named(&self.data.format)?;
        self.parser.validate()?;
        self.train.validate()?;
        if self.embedding.dim != self.train.tgn.dim {
            return Err(Error::Config(format!(
                "embedding dimension {} differs from model width {}",
                self.embedding.dim, self.train.tgn.dim
            )));
        }
        if self.embedding.provider == ProviderKind::External && self.embedding.path.is_none() {
            return Err(Error::Config("external embeddings need embedding.path".into()));
        }
        Ok(())
    }

    /// Training configuration with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn format(&self) -> Result<FormatSpec> {
        FormatSpec::named(&self.data.format)
    }
}
