//! The output directory: every read and write goes through here so the run
//! manifest can list input and artifact hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cli::Command;
use crate::config::Config;
use crate::error::{io_err, CliError, CliResult};

pub const MANIFEST_DIR: &str = "manifests";
pub const MANIFEST_VERSION: u32 = 1;
/// Copies of inputs a command overwrote, so a replay can restore the pre-state.
pub const PREIMAGE_DIR: &str = ".preimage";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path.display(), e))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    command: String,
    inputs: Mutex<BTreeMap<String, String>>,
    external: Mutex<BTreeMap<String, String>>,
    artifacts: Mutex<BTreeMap<String, String>>,
}

impl Workspace {
    pub fn open(root: &Path, command: &str) -> CliResult<Workspace> {
        fs::create_dir_all(root).map_err(|e| io_err(root.display(), e))?;
        Ok(Workspace {
            root: root.to_path_buf(),
            command: command.to_string(),
            inputs: Mutex::default(),
            external: Mutex::default(),
            artifacts: Mutex::default(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    /// Reads an artifact produced by an earlier step and records its hash.
    pub fn read(&self, rel: &str, hint: &'static str) -> CliResult<Vec<u8>> {
        let path = self.path(rel);
        if !path.exists() {
            return Err(CliError::MissingArtifact {
                path: path.display().to_string(),
                hint,
            });
        }
        let bytes = fs::read(&path).map_err(|e| io_err(path.display(), e))?;
        self.inputs
            .lock()
            .unwrap()
            .insert(rel.to_string(), sha256_bytes(&bytes));
        Ok(bytes)
    }

    pub fn read_jsonl<T: for<'de> Deserialize<'de>>(
        &self,
        rel: &str,
        hint: &'static str,
    ) -> CliResult<Vec<T>> {
        let bytes = self.read(rel, hint)?;
        let text = String::from_utf8(bytes).map_err(|e| io_err(rel, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| io_err(format!("{rel}:{}", i + 1), e)))
            .collect()
    }

    /// Records a file outside the workspace (dataset, exclusion list, cassette).
    pub fn note_external(&self, path: &Path) -> CliResult<()> {
        let hash = sha256_file(path)?;
        self.external
            .lock()
            .unwrap()
            .insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn preimage_path(root: &Path, command: &str, rel: &str) -> PathBuf {
        root.join(PREIMAGE_DIR).join(command).join(rel)
    }

    /// Keeps a copy of `rel` if this run read it and is about to replace it.
    pub fn preserve(&self, rel: &str) -> CliResult<()> {
        let read = self.inputs.lock().unwrap().contains_key(rel);
        let written = self.artifacts.lock().unwrap().contains_key(rel);
        if !read || written || !self.path(rel).exists() {
            return Ok(());
        }
        let src = self.path(rel);
        let dst = Self::preimage_path(&self.root, &self.command, rel);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent.display(), e))?;
        }
        fs::copy(&src, &dst).map_err(|e| io_err(src.display(), e))?;
        Ok(())
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        self.preserve(rel)?;
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent.display(), e))?;
        }
        fs::write(&path, bytes).map_err(|e| io_err(path.display(), e))?;
        self.artifacts
            .lock()
            .unwrap()
            .insert(rel.to_string(), sha256_bytes(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(rel, e))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&self, rel: &str, items: &[T]) -> CliResult<()> {
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).map_err(|e| io_err(rel, e))?);
            text.push('\n');
        }
        self.write(rel, text.as_bytes())
    }

    /// Registers a file written by other code (e.g. store persistence).
    pub fn track(&self, rel: &str) -> CliResult<()> {
        let hash = sha256_file(&self.path(rel))?;
        self.artifacts.lock().unwrap().insert(rel.to_string(), hash);
        Ok(())
    }

    pub fn finish(&self, manifest: ManifestHeader, command: &Command) -> CliResult<Manifest> {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            tool: concat!("evomem ", env!("CARGO_PKG_VERSION")).into(),
            command: command.clone(),
            config: manifest.config,
            backend: manifest.backend,
            prompts: manifest.prompts,
            inputs: self.inputs.lock().unwrap().clone(),
            external: self.external.lock().unwrap().clone(),
            artifacts: self.artifacts.lock().unwrap().clone(),
            calls: manifest.calls,
            warnings: manifest.warnings,
        };
        self.write_json(&format!("{MANIFEST_DIR}/{}.json", command.name()), &manifest)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIds {
    pub chat: String,
    pub embed: String,
    pub tokenizer: String,
    pub logprobs: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CallCounts {
    pub completions: u64,
    pub embed_calls: u64,
    pub embedded_texts: u64,
}

/// The parts of a manifest a command supplies; hashes come from the workspace.
#[derive(Debug, Clone)]
pub struct ManifestHeader {
    pub config: Config,
    pub backend: BackendIds,
    pub prompts: BTreeMap<String, String>,
    pub calls: CallCounts,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool: String,
    pub command: Command,
    pub config: Config,
    pub backend: BackendIds,
    pub prompts: BTreeMap<String, String>,
    /// Workspace-relative files the command read, with SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Files outside the workspace the command read, with SHA-256.
    pub external: BTreeMap<String, String>,
    /// Workspace-relative files the command wrote, with SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub calls: CallCounts,
    pub warnings: Vec<String>,
}
