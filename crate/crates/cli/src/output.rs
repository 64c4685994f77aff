//! Output directories and the per-run `manifest.json`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::canonical;

pub const OUT_ENV: &str = "GPO_LAB_OUT";
pub const DEFAULT_ROOT: &str = "gpo-lab-out";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub seed: u64,
    pub timestamp: String,
    pub output_files: Vec<String>,
}

/// SHA-256 of the canonical JSON rendering, hex encoded.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical(config)?.as_bytes())))
}

/// Collects files for one run and writes the manifest last.
pub struct RunDir {
    dir: PathBuf,
    command: String,
    hash: String,
    seed: u64,
    files: Vec<String>,
}

impl RunDir {
    /// `explicit` when given, else `<root>/<command>-<hash prefix>` with the
    /// root taken from `GPO_LAB_OUT` or [`DEFAULT_ROOT`].
    pub fn create<T: Serialize>(
        command: &str,
        explicit: Option<&Path>,
        config: &T,
        seed: u64,
    ) -> Result<Self> {
        let hash = config_hash(config)?;
        let dir = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| DEFAULT_ROOT.into());
                root.join(format!("{command}-{}", &hash[..12]))
            }
        };
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Self {
            dir,
            command: command.to_string(),
            hash,
            seed,
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            output_files: self.files,
        };
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(self.dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"x":1,"y":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"y":[1,2],"x":1}"#).unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn manifest_lists_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = RunDir::create("demo", Some(dir.path()), &1, 7).unwrap();
        run.write("a.csv", "x\n").unwrap();
        let out = run.finish().unwrap();
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(m["output_files"], serde_json::json!(["a.csv"]));
        assert_eq!(m["seed"], 7);
        assert_eq!(m["command"], "demo");
    }
}
