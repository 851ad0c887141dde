use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sar_core::fmt::FmtConfig;
use sar_core::policy::PlanPolicy;
use sar_core::schedule::GridShape;
use sar_core::synthdata::{read_jsonl, PatternMixtureSource, TokenGrid};
use sar_core::training::TrainConfig;
use sar_core::SarError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Validation,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Validation => 2,
            ErrorKind::Runtime => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<SarError> for CliError {
    fn from(e: SarError) -> Self {
        let kind = match e {
            SarError::Io(_) | SarError::Checkpoint(_) | SarError::Contract(_) => ErrorKind::Runtime,
            _ => ErrorKind::Validation,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::validation(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Where training grids come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// A random pattern mixture over the model's grid and vocabulary.
    Pattern { templates: usize, flip_prob: f64, seed: u64 },
    /// A pattern-mixture source stored as JSON.
    File { path: PathBuf },
    /// Token grids stored as JSON lines.
    Dataset { path: PathBuf },
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Pattern { templates: 4, flip_prob: 0.1, seed: 0 }
    }
}

pub enum LoadedSource {
    Pattern(PatternMixtureSource),
    Dataset(Vec<TokenGrid>),
}

/// Everything a run depends on. `sar train` writes the effective
/// configuration next to its outputs; feeding it back reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub plan: PlanPolicy,
    pub model: FmtConfig,
    pub train: TrainConfig,
    pub source: SourceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            command: "train".into(),
            seed: 0,
            out: None,
            plan: train.policy,
            model: FmtConfig::tiny(GridShape::new(4, 4).expect("4x4 is valid"), 8, 4),
            train,
            source: SourceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::runtime(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.policy != self.plan || self.train.seed != self.seed {
            return Err(CliError::validation("train.policy and train.seed must match plan and seed"));
        }
        Ok(())
    }

    pub fn load_source(&self) -> CliResult<LoadedSource> {
        let m = &self.model;
        let src = match &self.source {
            SourceConfig::Pattern { templates, flip_prob, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                LoadedSource::Pattern(PatternMixtureSource::random(
                    m.grid,
                    m.vocab,
                    *templates,
                    m.num_classes,
                    *flip_prob,
                    &mut rng,
                )?)
            }
            SourceConfig::File { path } => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::runtime(format!("cannot read source {}: {e}", path.display())))?;
                LoadedSource::Pattern(PatternMixtureSource::from_json(&text)?)
            }
            SourceConfig::Dataset { path } => LoadedSource::Dataset(read_jsonl(path)?),
        };
        match &src {
            LoadedSource::Pattern(s) => {
                if s.shape != m.grid || s.vocab != m.vocab || s.num_classes() != m.num_classes {
                    return Err(CliError::validation("source grid, vocabulary or classes do not match the model"));
                }
            }
            LoadedSource::Dataset(grids) => {
                if grids.is_empty() {
                    return Err(CliError::validation("dataset is empty"));
                }
                for g in grids {
                    if g.shape != m.grid || g.class_id >= m.num_classes {
                        return Err(CliError::validation("dataset grid or class does not match the model"));
                    }
                    g.validate(m.vocab)?;
                }
            }
        }
        Ok(src)
    }
}

/// Worker threads allowed by `SAR_NUM_THREADS` (default 1). All work
/// currently runs on one thread, which every valid cap admits.
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var("SAR_NUM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::validation(format!("SAR_NUM_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}
