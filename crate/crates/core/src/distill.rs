//! Teacher distribution export and the reference truncated KL.
//!
//! The JSONL written by [`write_records`] is the only interface between this
//! engine and an external trainer. Bump [`SCHEMA_VERSION`] on any change.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::QAPair;
use crate::evolve::{read_jsonl, write_jsonl};
use crate::gateway::{Gateway, GatewayError, TokenLogprob};
use crate::prompts::{PromptError, PromptSet};
use crate::synth::teacher_request;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("step {step}: chosen token {token:?} is not the top alternative")]
    NotArgmax { step: usize, token: String },
    #[error("d must be at least 1")]
    ZeroD,
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherStep {
    pub chosen_token: String,
    pub chosen_logprob: f64,
    /// Top alternatives by descending logprob; the first is the chosen token.
    pub alternatives: Vec<TokenLogprob>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub schema_version: u32,
    pub question: String,
    /// SHA-256 of the full history the teacher saw.
    pub context_hash: String,
    pub teacher_text: String,
    pub steps: Vec<TeacherStep>,
    pub d: u32,
    pub decode: DecodeParams,
    /// Exactly what the student is conditioned on: the question and nothing else.
    pub student_prompt: String,
    pub reference_answer: String,
    pub source_session: String,
    pub sample: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    pub d: u32,
    pub max_tokens: u32,
    /// Teacher samples per question. With more than one, sampling uses `sample_temperature`.
    pub samples: u32,
    pub sample_temperature: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig {
            d: 10,
            max_tokens: 64,
            samples: 1,
            sample_temperature: 1.0,
        }
    }
}

pub fn context_hash(context: &str) -> String {
    hex::encode(Sha256::digest(context.as_bytes()))
}

fn build_steps(
    tokens: &[TokenLogprob],
    alternatives: Vec<Vec<TokenLogprob>>,
) -> Result<Vec<TeacherStep>, DistillError> {
    tokens
        .iter()
        .zip(alternatives)
        .enumerate()
        .map(|(step, (tok, mut alts))| {
            let top = alts.first().map(|a| a.logprob).unwrap_or(f64::NEG_INFINITY);
            let pos = alts.iter().position(|a| a.token == tok.token);
            match pos {
                // Ties at the top may come back in either order.
                Some(i) if alts[i].logprob >= top - 1e-9 => {
                    let chosen = alts.remove(i);
                    alts.insert(0, chosen);
                }
                _ => {
                    return Err(DistillError::NotArgmax {
                        step,
                        token: tok.token.clone(),
                    })
                }
            }
            Ok(TeacherStep {
                chosen_token: tok.token.clone(),
                chosen_logprob: tok.logprob,
                alternatives: alts,
            })
        })
        .collect()
}

/// Decodes the teacher on `[history; question]` for each pair and captures top-d alternatives.
pub fn export_records(
    gateway: &Gateway,
    prompts: &PromptSet,
    pairs: &[QAPair],
    context: &str,
    cfg: ExportConfig,
) -> Result<Vec<DistillRecord>, DistillError> {
    if cfg.d == 0 {
        return Err(DistillError::ZeroD);
    }
    if !gateway.supports_logprobs() {
        return Err(GatewayError::CapabilityMissing(format!(
            "{} does not return token alternatives",
            gateway.chat_id()
        ))
        .into());
    }
    let hash = context_hash(context);
    let jobs: Vec<(&QAPair, u32)> = pairs
        .iter()
        .flat_map(|p| (0..cfg.samples.max(1)).map(move |s| (p, s)))
        .collect();
    jobs.par_iter()
        .map(|(pair, sample)| {
            let mut req = teacher_request(prompts, context, &pair.question, cfg.max_tokens)?
                .with_logprobs(cfg.d);
            if cfg.samples > 1 {
                req.temperature = cfg.sample_temperature;
                // Keeps repeated samples distinct on a record/replay cassette.
                req.stop = Some(vec![format!("<sample:{sample}>")]);
            }
            let resp = gateway.complete(&req)?;
            let alternatives = resp.top_alternatives.clone().ok_or_else(|| {
                GatewayError::CapabilityMissing("response carried no alternatives".into())
            })?;
            Ok(DistillRecord {
                schema_version: SCHEMA_VERSION,
                question: pair.question.clone(),
                context_hash: hash.clone(),
                teacher_text: resp.text.clone(),
                steps: build_steps(&resp.tokens, alternatives)?,
                d: cfg.d,
                decode: DecodeParams {
                    temperature: req.temperature,
                    max_tokens: req.max_tokens,
                },
                student_prompt: pair.question.clone(),
                reference_answer: pair.answer.clone(),
                source_session: pair.source_session.clone(),
                sample: *sample,
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[DistillRecord]) -> Result<(), DistillError> {
    write_jsonl(path, records).map_err(|e| DistillError::Io(e.to_string()))
}

pub fn read_records(path: &Path) -> Result<Vec<DistillRecord>, DistillError> {
    let records: Vec<DistillRecord> =
        read_jsonl(path).map_err(|e| DistillError::Io(e.to_string()))?;
    if let Some(r) = records.iter().find(|r| r.schema_version != SCHEMA_VERSION) {
        return Err(DistillError::Io(format!(
            "unsupported schema version {}",
            r.schema_version
        )));
    }
    Ok(records)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KlError {
    #[error("student assigns zero mass to support token {0}")]
    ZeroStudentMass(usize),
    #[error("teacher has {teacher} entries, student {student}")]
    LengthMismatch { teacher: usize, student: usize },
    #[error("d must be at least 1")]
    ZeroD,
    #[error("teacher mass on the top-d support is zero")]
    ZeroTeacherMass,
}

/// Indices of the `d` largest teacher probabilities, ties broken by lower index.
pub fn top_d_support(teacher: &[f64], d: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..teacher.len()).collect();
    order.sort_by(|&a, &b| teacher[b].total_cmp(&teacher[a]).then(a.cmp(&b)));
    order.truncate(d);
    order
}

/// KL(p̃ ‖ q) over the teacher's top-d support, with p̃ the teacher renormalized
/// on that support and q the raw student probabilities. Natural log.
pub fn truncated_kl(teacher: &[f64], student: &[f64], d: usize) -> Result<f64, KlError> {
    if d == 0 {
        return Err(KlError::ZeroD);
    }
    if teacher.len() != student.len() {
        return Err(KlError::LengthMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    let support = top_d_support(teacher, d);
    let mass: f64 = support.iter().map(|&i| teacher[i]).sum();
    if mass <= 0.0 {
        return Err(KlError::ZeroTeacherMass);
    }
    let mut total = 0.0;
    for &i in &support {
        if student[i] <= 0.0 {
            return Err(KlError::ZeroStudentMass(i));
        }
        let p = teacher[i] / mass;
        if p > 0.0 {
            total += p * (p / student[i]).ln();
        }
    }
    Ok(total)
}

/// Retrieval depth, distillation width and answer style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub k: usize,
    pub d: u32,
    pub concise: bool,
}

impl Profile {
    pub fn default_profile() -> Profile {
        Profile {
            name: "default".into(),
            k: 3,
            d: 10,
            concise: false,
        }
    }

    pub fn pro() -> Profile {
        Profile {
            name: "pro".into(),
            k: 10,
            d: 20,
            concise: true,
        }
    }

    pub fn by_name(name: &str) -> Option<Profile> {
        match name {
            "default" => Some(Self::default_profile()),
            "pro" => Some(Self::pro()),
            _ => None,
        }
    }
}
