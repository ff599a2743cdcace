use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Written at the top of every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, InputFile>,
    pub parameters: BTreeMap<String, serde_json::Value>,
}

impl Provenance {
    pub fn new(command: &str) -> Self {
        Provenance {
            tool: env!("CARGO_BIN_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: None,
            inputs: BTreeMap::new(),
            parameters: BTreeMap::new(),
        }
    }

    /// Reads `path`, records its hash under `label` and returns the bytes.
    pub fn read_input(&mut self, label: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(
            label.into(),
            InputFile {
                path: path.display().to_string(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
        Ok(bytes)
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("parameters serialize");
        self.parameters.insert(key.into(), v);
    }

    /// CSV comment lines carrying the same information as the JSON header.
    fn comment_lines(&self) -> String {
        let mut s = format!("# {} {} {}\n", self.tool, self.version, self.command);
        if let Some(seed) = self.seed {
            s.push_str(&format!("# seed: {seed}\n"));
        }
        for (label, f) in &self.inputs {
            s.push_str(&format!("# input {label}: {} sha256={}\n", f.path, f.sha256));
        }
        for (k, v) in &self.parameters {
            s.push_str(&format!("# param {k}: {v}\n"));
        }
        s
    }
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, prov: &Provenance, body: &T) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(&Stamped { provenance: prov, body })?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Writes `# ` provenance lines followed by the CSV rows.
pub fn write_csv<R: Serialize>(dir: &Path, name: &str, prov: &Provenance, rows: &[R]) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(prov.comment_lines().as_bytes())?;
    let mut w = csv::Writer::from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(path)
}

/// Parses a JSON file whose provenance field (if any) is ignored.
pub fn parse_json<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    serde_json::from_slice(bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}
