use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use evomem_core::eval::DEFAULT_SWEEP_KS;
use evomem_core::retrieval::Variant;
use serde::{Deserialize, Serialize};

use crate::config::DatasetFormat;

#[derive(Debug, Parser)]
#[command(name = "evomem", version, about = "Evolving conversational memory pipeline")]
pub struct Cli {
    /// TOML config file. Without one the scripted offline backend is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides paths.out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log more (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Load and validate a corpus into the workspace.
    Ingest(IngestArgs),
    /// Extract observations for each speaker of each session.
    Extract(PairArgs),
    /// Run the memory manager over sessions in timestamp order.
    Evolve(EvolveArgs),
    /// Build a retrieval index for one variant.
    Index(IndexArgs),
    /// Answer one question from retrieved memories.
    Query(QueryArgs),
    /// Generate and filter synthetic QA pairs.
    Synthesize(SynthArgs),
    /// Export teacher decodes with top-d alternatives as JSONL.
    ExportDistill(ExportArgs),
    /// Score answers against the corpus QA items.
    Eval(EvalArgs),
    /// Input-length versus quality table over variants and k.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest and compare artifacts.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Extract(_) => "extract",
            Command::Evolve(_) => "evolve",
            Command::Index(_) => "index",
            Command::Query(_) => "query",
            Command::Synthesize(_) => "synthesize",
            Command::ExportDistill(_) => "export-distill",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// Dataset file. Default: paths.dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dataset format. Default: paths.format.
    #[arg(long, value_enum)]
    pub format: Option<DatasetFormat>,
    /// LoCoMo question ids to drop, one per line. Default: paths.exclusions.
    #[arg(long)]
    pub exclusions: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PairArgs {
    /// Restrict to these conversation ids (repeatable). Default: all.
    #[arg(long)]
    pub pair: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvolveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pairs: PairArgs,
    /// Apply sessions even when they precede ones already applied.
    #[arg(long)]
    pub force: bool,
    /// Print the decisions without writing stores.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IndexArgs {
    /// utterance, observation or evolving.
    #[arg(long, default_value = "evolving")]
    pub variant: Variant,
    #[command(flatten)]
    #[serde(flatten)]
    pub pairs: PairArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct QueryArgs {
    /// Conversation id to answer from.
    #[arg(long)]
    pub pair: String,
    #[arg(long)]
    pub question: String,
    /// utterance, observation, evolving, session or no_grounding.
    #[arg(long, default_value = "evolving")]
    pub variant: Variant,
    /// Entries to retrieve. Default: the profile's k.
    #[arg(long)]
    pub k: Option<usize>,
    /// default (k=3, d=10) or pro (k=10, d=20, concise answers).
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pairs: PairArgs,
    /// Target speakers (repeatable). Default: both participants.
    #[arg(long)]
    pub speaker: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pairs: PairArgs,
    /// Alternatives per step. Default: the profile's d.
    #[arg(long)]
    pub d: Option<u32>,
    /// default (k=3, d=10) or pro (k=10, d=20, concise answers).
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Variant to score (repeatable).
    #[arg(long = "variant", default_value = "evolving")]
    pub variants: Vec<Variant>,
    /// Retrieval depth. Default: the profile's k.
    #[arg(long)]
    pub k: Option<usize>,
    /// Take QA items from this dataset file instead of the ingested corpus.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// default (k=3, d=10) or pro (k=10, d=20, concise answers).
    #[arg(long)]
    pub profile: Option<String>,
    /// Score only the first N items of each conversation.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    /// Variant to include (repeatable).
    #[arg(
        long = "variant",
        default_values_t = [Variant::Utterance, Variant::Observation, Variant::Evolving, Variant::Session, Variant::NoGrounding]
    )]
    pub variants: Vec<Variant>,
    /// Retrieval depths, comma-separated.
    #[arg(long = "k", value_delimiter = ',', default_values_t = DEFAULT_SWEEP_KS)]
    pub ks: Vec<usize>,
    /// Take QA items from this dataset file instead of the ingested corpus.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// default (k=3, d=10) or pro (k=10, d=20, concise answers).
    #[arg(long)]
    pub profile: Option<String>,
    /// Score only the first N items of each conversation.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run (`<out>/manifests/<command>.json`).
    pub manifest: PathBuf,
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn commands_round_trip_through_json() {
        let cli = Cli::parse_from(["evomem", "eval", "--variant", "utterance", "--variant", "session", "--k", "5"]);
        let json = serde_json::to_string(&cli.command).unwrap();
        assert!(json.contains("\"name\":\"eval\""));
        let back: Command = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cli.command);
    }

    #[test]
    fn sweep_defaults() {
        let cli = Cli::parse_from(["evomem", "sweep"]);
        let Command::Sweep(args) = cli.command else { panic!() };
        assert_eq!(args.ks, vec![1, 2, 3, 5, 10]);
        assert_eq!(args.variants.len(), 5);
    }
}
