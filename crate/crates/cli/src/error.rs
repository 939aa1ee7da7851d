use evomem_core::answer::AnswerError;
use evomem_core::datasets::DatasetError;
use evomem_core::distill::DistillError;
use evomem_core::evolve::EvolveError;
use evomem_core::extract::ExtractError;
use evomem_core::gateway::GatewayError;
use evomem_core::prompts::PromptError;
use evomem_core::retrieval::RetrievalError;
use evomem_core::synth::SynthError;
use thiserror::Error;

/// Process exit codes. Kept in sync with the table in the README.
pub mod code {
    // Returned by the process directly and by clap for usage errors.
    #[allow(dead_code)]
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    #[allow(dead_code)]
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const DATASET: u8 = 4;
    pub const GATEWAY: u8 = 5;
    pub const MODEL_OUTPUT: u8 = 6;
    pub const EVOLVE: u8 = 7;
    pub const OUT_OF_ORDER: u8 = 8;
    pub const RETRIEVAL: u8 = 9;
    pub const REPLAY_MISMATCH: u8 = 10;
    pub const DISTILL: u8 = 11;
    pub const MISSING_ARTIFACT: u8 = 12;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `evomem {hint}` first")]
    MissingArtifact { path: String, hint: &'static str },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error("session {session} ({at}) precedes {previous} already applied to {owner}; pass --force to evolve anyway")]
    OutOfOrder {
        owner: String,
        session: String,
        at: String,
        previous: String,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error("replay mismatch: {}", .0.join("; "))]
    ReplayMismatch(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use CliError::*;
        match self {
            Config(_) | Prompt(_) => code::CONFIG,
            MissingArtifact { .. } => code::MISSING_ARTIFACT,
            Io(_) => code::INTERNAL,
            Dataset(_) => code::DATASET,
            Gateway(_) => code::GATEWAY,
            Extract(ExtractError::Gateway(_)) => code::GATEWAY,
            Extract(_) => code::MODEL_OUTPUT,
            Evolve(EvolveError::Gateway(_)) => code::GATEWAY,
            Evolve(_) => code::EVOLVE,
            OutOfOrder { .. } => code::OUT_OF_ORDER,
            Retrieval(RetrievalError::Gateway(_)) => code::GATEWAY,
            Retrieval(_) => code::RETRIEVAL,
            Synth(SynthError::Gateway(_)) => code::GATEWAY,
            Synth(SynthError::InvalidConfig(_)) => code::CONFIG,
            Synth(_) => code::MODEL_OUTPUT,
            Distill(DistillError::Gateway(_)) => code::GATEWAY,
            Distill(_) => code::DISTILL,
            Answer(AnswerError::Gateway(_)) => code::GATEWAY,
            Answer(_) => code::CONFIG,
            ReplayMismatch(_) => code::REPLAY_MISMATCH,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_err(context: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}
