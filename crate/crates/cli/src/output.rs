//! Report files, the run manifest and error records.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use gas_storage::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Shortest representation that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Output directory that remembers what was written, for the manifest.
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let stale = dir.join("error.json");
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::Io { path: stale, source: e })?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, body: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Error::Io { path: p, source: e })?;
        self.written.push((name.to_string(), sha256_hex(body)));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, v: &Value) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn written(&self) -> &[(String, String)] {
        &self.written
    }

    /// Writes `manifest.json`: command, canonical config and its hash, seeds,
    /// input file digests and output digests.
    pub fn finish(mut self, command: &str, config_text: &str, seeds: Value, inputs: &[(String, PathBuf)]) -> Result<()> {
        let mut ins = serde_json::Map::new();
        for (key, p) in inputs {
            ins.insert(
                key.clone(),
                json!({ "path": p.display().to_string(), "sha256": file_digest(p)? }),
            );
        }
        let outs: serde_json::Map<String, Value> = self
            .written
            .iter()
            .map(|(n, h)| (n.clone(), Value::String(h.clone())))
            .collect();
        let manifest = json!({
            "tool": "gas-storage",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config_text,
            "config_sha256": sha256_hex(config_text.as_bytes()),
            "seeds": seeds,
            "inputs": Value::Object(ins),
            "outputs": Value::Object(outs),
        });
        self.write_json("manifest.json", &manifest)
    }
}

pub fn error_record(e: &Error) -> Value {
    let mut chain = Vec::new();
    let mut src: Option<&dyn std::error::Error> = std::error::Error::source(e);
    while let Some(s) = src {
        chain.push(Value::String(s.to_string()));
        src = s.source();
    }
    json!({ "error": e.kind(), "message": e.to_string(), "causes": chain })
}
