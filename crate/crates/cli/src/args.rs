use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kgc_core::eval::{ThresholdMode, TieRule};
use kgc_core::scorers::{EmbeddingLoss, Norm, ScorerKind, Task, TrainConfig};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "kgc-forge",
    version,
    about = "Knowledge graph completion: ingest, train, evaluate, ablate"
)]
pub struct Cli {
    /// Directory receiving report.json, tables/ and manifest.json.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Seed for splitting, sampling and training.
    #[arg(long, global = true, env = "KGC_FORGE_SEED")]
    pub seed: Option<u64>,

    /// Worker threads for evaluation and sampling (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Leave timestamps out of the manifest so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Load a dataset, split it if needed, and write the normalized bundle.
    Ingest(IngestArgs),
    /// Train a scorer and save a checkpoint.
    Train(TrainArgs),
    /// Triple-classification accuracy on a balanced test set.
    EvalTc(EvalArgs),
    /// Filtered link prediction (head and tail).
    EvalLp(EvalArgs),
    /// Filtered relation prediction.
    EvalRp(EvalArgs),
    /// Link-prediction breakdown by relation category.
    Ablate(AblateArgs),
    /// Write the bundle plus labeled wire-protocol items for external scorers.
    Export(ExportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Train(_) => "train",
            Command::EvalTc(_) => "eval-tc",
            Command::EvalLp(_) => "eval-lp",
            Command::EvalRp(_) => "eval-rp",
            Command::Ablate(_) => "ablate",
            Command::Export(_) => "export",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Dataset directory (train/dev|valid/test.tsv, or all.tsv).
    #[arg(long)]
    pub data: PathBuf,

    /// Replace literal tails with `/literal_k` entities.
    #[arg(long)]
    pub literalize: bool,

    /// Train/dev/test ratios used when only all.tsv is present.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.6, 0.2, 0.2])]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScorerArg {
    Classifier,
    Transe,
    Distmult,
    Bridge,
}

impl From<ScorerArg> for ScorerKind {
    fn from(s: ScorerArg) -> ScorerKind {
        match s {
            ScorerArg::Classifier => ScorerKind::Classifier,
            ScorerArg::Transe => ScorerKind::Transe,
            ScorerArg::Distmult => ScorerKind::Distmult,
            ScorerArg::Bridge => ScorerKind::Bridge,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    Tc,
    Lp,
    Rp,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Tc => Task::Tc,
            TaskArg::Lp => Task::Lp,
            TaskArg::Rp => Task::Rp,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormArg {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Margin,
    CrossEntropy,
}

/// Hyperparameter overrides; unset flags keep the per-scorer, per-task
/// defaults.
#[derive(Debug, Args, Serialize, Default)]
pub struct HyperArgs {
    /// Negatives per positive.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Hidden width of the text classifier.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Embedding dimension of TransE / DistMult.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    #[arg(long, value_enum)]
    pub embedding_loss: Option<LossArg>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Draw fresh negatives every epoch.
    #[arg(long)]
    pub resample_negatives: bool,
}

impl HyperArgs {
    pub fn apply(&self, mut cfg: TrainConfig, seed: Option<u64>) -> TrainConfig {
        if let Some(v) = self.negatives {
            cfg.negative_ratio = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.dropout {
            cfg.dropout = v;
        }
        if let Some(v) = self.hidden {
            cfg.hidden_size = v;
        }
        if let Some(v) = self.dim {
            cfg.embedding_dim = v;
        }
        if let Some(v) = self.margin {
            cfg.margin = v;
        }
        if let Some(v) = self.norm {
            cfg.norm = match v {
                NormArg::L1 => Norm::L1,
                NormArg::L2 => Norm::L2,
            };
        }
        if let Some(v) = self.embedding_loss {
            cfg.embedding_loss = match v {
                LossArg::Margin => EmbeddingLoss::Margin,
                LossArg::CrossEntropy => EmbeddingLoss::CrossEntropy,
            };
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.max_len {
            cfg.max_len = v;
        }
        if self.resample_negatives {
            cfg.resample_negatives = true;
        }
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        cfg
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "classifier")]
    pub scorer: ScorerArg,
    #[arg(long, value_enum, default_value = "tc")]
    pub task: TaskArg,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

/// Where scores come from: a saved checkpoint, an external endpoint, or a
/// model trained for this run.
#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "classifier")]
    pub scorer: ScorerArg,
    /// Checkpoint written by `train`.
    #[arg(long, conflicts_with = "endpoint")]
    pub model: Option<PathBuf>,
    /// External scorer: `host:port` or `exec:<command>`.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieArg {
    Mean,
    Optimistic,
    Pessimistic,
}

impl From<TieArg> for TieRule {
    fn from(t: TieArg) -> TieRule {
        match t {
            TieArg::Mean => TieRule::Mean,
            TieArg::Optimistic => TieRule::Optimistic,
            TieArg::Pessimistic => TieRule::Pessimistic,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdArg {
    Auto,
    Natural,
    Dev,
    DevPerRelation,
}

impl From<ThresholdArg> for ThresholdMode {
    fn from(t: ThresholdArg) -> ThresholdMode {
        match t {
            ThresholdArg::Auto => ThresholdMode::Auto,
            ThresholdArg::Natural => ThresholdMode::Natural,
            ThresholdArg::Dev => ThresholdMode::DevGlobal,
            ThresholdArg::DevPerRelation => ThresholdMode::DevPerRelation,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct MetricArgs {
    /// Cut-offs for Hits@N.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 10])]
    pub hits: Vec<usize>,
    #[arg(long, value_enum, default_value = "mean")]
    pub tie: TieArg,
    /// Triple-classification decision rule.
    #[arg(long, value_enum, default_value = "auto")]
    pub threshold: ThresholdArg,
    /// Length of the best / worst relation lists.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Minimum distinct test triples for a relation to be listed.
    #[arg(long, default_value_t = 5)]
    pub min_support: usize,
    /// Average tails-per-head / heads-per-tail above which a side is "many".
    #[arg(long, default_value_t = kgc_core::graph::DEFAULT_CARDINALITY_THRESHOLD)]
    pub cardinality_threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub metrics: MetricArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblateBy {
    Cardinality,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value = "cardinality")]
    pub by: AblateBy,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Corruptions written per positive.
    #[arg(long, default_value_t = 1)]
    pub negatives: usize,
}
