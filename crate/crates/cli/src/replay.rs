//! Re-runs the command recorded in a manifest into a fresh directory and
//! checks that every artifact comes out byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use crate::commands::dispatch;
use crate::config::{Config, CassetteMode};
use crate::error::{io_err, CliError, CliResult};
use crate::workspace::{sha256_file, Manifest, Workspace, MANIFEST_DIR};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub command: String,
    pub artifacts: usize,
    pub out: PathBuf,
}

fn source_root(manifest_path: &Path) -> CliResult<PathBuf> {
    manifest_path
        .parent()
        .filter(|p| p.file_name().is_some_and(|n| n == MANIFEST_DIR))
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .ok_or_else(|| {
            CliError::Config(format!(
                "{} is not inside a {MANIFEST_DIR}/ directory",
                manifest_path.display()
            ))
        })
}

pub fn replay(manifest_path: &Path, out: &Path) -> CliResult<ReplayReport> {
    let text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path.display(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let source = source_root(manifest_path)?;
    if out.exists() && fs::canonicalize(out).ok() == fs::canonicalize(&source).ok() {
        return Err(CliError::Config("replay needs an --out different from the original run".into()));
    }
    let name = manifest.command.name();

    let mut problems = Vec::new();
    for (path, hash) in &manifest.external {
        match sha256_file(Path::new(path)) {
            Ok(h) if &h == hash => {}
            Ok(_) => problems.push(format!("external input {path} changed")),
            Err(e) => problems.push(e.to_string()),
        }
    }
    for (rel, hash) in &manifest.inputs {
        let pre = Workspace::preimage_path(&source, name, rel);
        let src = if pre.exists() { pre } else { source.join(rel) };
        match sha256_file(&src) {
            Ok(h) if &h == hash => {
                let dst = out.join(rel);
                if let Some(parent) = dst.parent() {
                    fs::create_dir_all(parent).map_err(|e| io_err(parent.display(), e))?;
                }
                fs::copy(&src, &dst).map_err(|e| io_err(src.display(), e))?;
            }
            Ok(_) => problems.push(format!("input {rel} changed since the recorded run")),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::ReplayMismatch(problems));
    }

    let mut cfg: Config = manifest.config.clone();
    cfg.paths.out = out.to_path_buf();
    if cfg.backend.mode == CassetteMode::Record {
        cfg.backend.mode = CassetteMode::Replay;
    }
    let fresh = dispatch(cfg, &manifest.command)?
        .ok_or_else(|| CliError::Config(format!("recorded {name} run wrote nothing")))?;

    let relevant = |rel: &String| !rel.starts_with(&format!("{MANIFEST_DIR}/"));
    let mut mismatches = Vec::new();
    for (rel, hash) in manifest.artifacts.iter().filter(|(r, _)| relevant(r)) {
        match fresh.artifacts.get(rel) {
            Some(h) if h == hash => {}
            Some(_) => mismatches.push(format!("{rel} differs")),
            None => mismatches.push(format!("{rel} not produced")),
        }
    }
    for rel in fresh.artifacts.keys().filter(|r| relevant(r)) {
        if !manifest.artifacts.contains_key(rel) {
            mismatches.push(format!("{rel} is new"));
        }
    }
    if !mismatches.is_empty() {
        return Err(CliError::ReplayMismatch(mismatches));
    }
    Ok(ReplayReport {
        command: name.to_string(),
        artifacts: manifest.artifacts.keys().filter(|r| relevant(r)).count(),
        out: out.to_path_buf(),
    })
}
