use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::bench::BenchSpec;
use crate::model::{ModelConfig, TrainConfig};
use crate::pattern::{PatternConfig, Preset};
use crate::pipeline::{Gain, Metric, SyntheticSpec};
use crate::tensor::Precision;

/// Encoder shape; the vocabulary size comes from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub pattern: PatternConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            num_layers: 2,
            dim: 64,
            heads: 4,
            max_len: 512,
            dropout_rate: 0.1,
            pattern: PatternConfig {
                preset: Preset::Qds,
                window: 8,
                symmetric_globals: true,
            },
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.num_layers, self.dim, self.heads, vocab_size, self.pattern);
        cfg.max_len = self.max_len;
        cfg.dropout_rate = self.dropout_rate;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metric: String,
    pub gain: Gain,
    pub positive_threshold: u32,
    /// Evaluate every this many training steps (0 = only at the end).
    pub eval_every: usize,
    /// Stop training once the metric reaches this value.
    pub target: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metric: "mrr@10".into(),
            gain: Gain::Exp,
            positive_threshold: 1,
            eval_every: 50,
            target: None,
        }
    }
}

/// Dataset files. `dir` supplies the standard file names; explicit paths
/// override them. With neither, a synthetic task is generated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
}

impl DataSection {
    pub fn is_synthetic(&self) -> bool {
        self.dir.is_none() && self.corpus.is_none() && self.queries.is_none() && self.candidates.is_none()
    }

    fn pick(&self, explicit: &Option<PathBuf>, names: &[&str]) -> Option<PathBuf> {
        if let Some(p) = explicit {
            return Some(p.clone());
        }
        let dir = self.dir.as_ref()?;
        names.iter().map(|n| dir.join(n)).find(|p| p.exists()).or_else(|| Some(dir.join(names[0])))
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        self.pick(&self.corpus, &["corpus.tsv", "corpus.jsonl"])
    }

    pub fn queries_path(&self) -> Option<PathBuf> {
        self.pick(&self.queries, &["queries.tsv"])
    }

    pub fn qrels_path(&self) -> Option<PathBuf> {
        self.pick(&self.qrels, &["qrels.txt"])
    }

    pub fn candidates_path(&self) -> Option<PathBuf> {
        self.pick(&self.candidates, &["candidates.run"])
    }
}

/// Everything a command may read from `--config`. Command-line flags
/// override the matching fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialisation, training, data sampling and benchmarks.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub precision: Option<Precision>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataSection,
    pub synthetic: SyntheticSpec,
    pub bench: BenchSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    /// Pushes the shared seed and thread count into the sections.
    pub fn resolve(&mut self) {
        let seed = self.seed();
        self.train.seed = seed;
        self.bench.seed = seed;
        if let Some(t) = self.threads {
            self.bench.threads = t;
        }
    }

    pub fn metric(&self) -> Result<Metric, CliError> {
        self.eval.metric.parse().map_err(|e: crate::QdstError| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: crate::QdstError| CliError::Config(e.to_string());
        self.model.pattern.validate().map_err(cfg)?;
        self.model.model_config(usize::MAX).validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.metric()?;
        if self.eval.positive_threshold == 0 {
            return Err(CliError::Config("positive_threshold must be >= 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be >= 1".into()));
        }
        Ok(())
    }
}
