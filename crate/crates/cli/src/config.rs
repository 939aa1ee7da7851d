//! TOML configuration. Every field has a default, so an empty file (or no
//! file at all) runs fully offline on the scripted backend.

use std::path::{Path, PathBuf};

use evomem_core::distill::Profile;
use evomem_core::evolve::EvolveConfig;
use evomem_core::synth::{FilterConfig, SynthConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const API_KEY_ENV: &str = "EVOMEM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Built-in rule-based responder; no network.
    Scripted,
    /// OpenAI-compatible HTTP server.
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    Live,
    Record,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub mode: CassetteMode,
    pub cassette: Option<PathBuf>,
    pub base_url: String,
    pub chat_model: String,
    pub embed_model: Option<String>,
    pub logprobs: bool,
    pub tokenize_url: Option<String>,
    pub timeout_secs: u64,
    /// Dimension of the offline hashing embedder, used when no embedding model is configured.
    pub embed_dim: usize,
    pub max_inflight: usize,
    pub retry_attempts: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            mode: CassetteMode::Live,
            cassette: None,
            base_url: "http://localhost:8000/v1".into(),
            chat_model: String::new(),
            embed_model: None,
            logprobs: false,
            tokenize_url: None,
            timeout_secs: 120,
            embed_dim: 512,
            max_inflight: 8,
            retry_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Locomo,
    Longmemeval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    /// Question ids to drop from LoCoMo, one per line.
    pub exclusions: Option<PathBuf>,
    pub out: PathBuf,
    /// Directory of prompt overrides (`<name>.txt`).
    pub prompts: Option<PathBuf>,
    pub include_adversarial: bool,
    pub all_pairs: bool,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset: None,
            format: DatasetFormat::Locomo,
            exclusions: None,
            out: PathBuf::from("out"),
            prompts: None,
            include_adversarial: false,
            all_pairs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveSection {
    pub max_tokens: u32,
    pub entry_budget: usize,
    pub grounding_veto: bool,
}

impl Default for EvolveSection {
    fn default() -> Self {
        let d = EvolveConfig::default();
        EvolveSection {
            max_tokens: d.max_tokens,
            entry_budget: d.entry_budget,
            grounding_veto: d.grounding_veto,
        }
    }
}

impl From<&EvolveSection> for EvolveConfig {
    fn from(s: &EvolveSection) -> Self {
        EvolveConfig {
            max_tokens: s.max_tokens,
            entry_budget: s.entry_budget,
            grounding_veto: s.grounding_veto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub pairs_per_session: usize,
    pub generation_max_tokens: u32,
    pub teacher_max_tokens: u32,
    pub samples: u32,
    pub sample_temperature: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            pairs_per_session: d.pairs_per_session,
            generation_max_tokens: d.generation_max_tokens,
            teacher_max_tokens: d.teacher_max_tokens,
            samples: 1,
            sample_temperature: 1.0,
        }
    }
}

impl From<&SynthSection> for SynthConfig {
    fn from(s: &SynthSection) -> Self {
        SynthConfig {
            pairs_per_session: s.pairs_per_session,
            generation_max_tokens: s.generation_max_tokens,
            teacher_max_tokens: s.teacher_max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub profile: String,
    pub answer_max_tokens: u32,
    pub extract_max_tokens: u32,
    pub backend: BackendConfig,
    pub paths: PathsConfig,
    pub evolve: EvolveSection,
    pub synth: SynthSection,
    pub filter: FilterConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            profile: "default".into(),
            answer_max_tokens: 128,
            extract_max_tokens: 1024,
            backend: BackendConfig::default(),
            paths: PathsConfig::default(),
            evolve: EvolveSection::default(),
            synth: SynthSection::default(),
            filter: FilterConfig::default(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> CliResult<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Config::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.out);
        for p in [
            &mut self.paths.dataset,
            &mut self.paths.exclusions,
            &mut self.paths.prompts,
            &mut self.backend.cassette,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.profile()?;
        self.filter
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.backend.mode != CassetteMode::Live && self.backend.cassette.is_none() {
            return Err(CliError::Config(
                "backend.mode record/replay needs backend.cassette".into(),
            ));
        }
        if self.backend.kind == BackendKind::Http && self.backend.chat_model.is_empty() {
            return Err(CliError::Config("backend.chat_model is required for http".into()));
        }
        if self.backend.embed_dim == 0 || self.backend.max_inflight == 0 {
            return Err(CliError::Config(
                "backend.embed_dim and backend.max_inflight must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn profile(&self) -> CliResult<Profile> {
        Profile::by_name(&self.profile)
            .ok_or_else(|| CliError::Config(format!("unknown profile {:?}", self.profile)))
    }
}
