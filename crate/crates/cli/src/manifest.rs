use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::fail::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to re-execute a command: the fully resolved
/// arguments, inputs with their content hashes, and hashes of what the run
/// wrote (relative to the output directory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub args: Value,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

/// Git-style blob hash (SHA-256 object format): `sha256("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, args: Value, inputs: &[PathBuf]) -> CliResult<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: p.clone(),
                    sha256: hash_file(p)?,
                })
            })
            .collect::<CliResult<_>>()?;
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            args,
            inputs,
            outputs: Vec::new(),
        })
    }

    /// Hashes `names` inside `out_dir` and writes the manifest beside them.
    pub fn finish(mut self, out_dir: &Path, names: &[String]) -> CliResult<Self> {
        self.outputs = names
            .iter()
            .map(|n| {
                Ok(FileHash {
                    path: PathBuf::from(n),
                    sha256: hash_file(&out_dir.join(n))?,
                })
            })
            .collect::<CliResult<_>>()?;
        let path = out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::internal(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::schema(format!("{}: {e}", path.display())))
    }

    /// Inputs whose current content differs from the recorded hash.
    pub fn changed_inputs(&self) -> CliResult<Vec<PathBuf>> {
        let mut out = Vec::new();
        for f in &self.inputs {
            if hash_file(&f.path)? != f.sha256 {
                out.push(f.path.clone());
            }
        }
        Ok(out)
    }
}

/// Overlays `config` onto `resolved` for every key whose flag was not given
/// explicitly. Unknown keys are rejected.
pub fn overlay(resolved: &mut Value, config: &Value, explicit: &dyn Fn(&str) -> bool) -> CliResult<()> {
    let (Value::Object(dst), Value::Object(src)) = (resolved, config) else {
        return Err(CliError::usage("--config must hold a JSON object"));
    };
    for (k, v) in src {
        if !dst.contains_key(k) {
            return Err(CliError::usage(format!("unknown config key `{k}`")));
        }
        if !explicit(k) {
            dst.insert(k.clone(), v.clone());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_format() {
        // printf 'hello\n' | git hash-object --object-format=sha256 --stdin
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn overlay_respects_explicit_flags() {
        let mut v = serde_json::json!({"rows": 10, "features": 5});
        let cfg = serde_json::json!({"rows": 20, "features": 7});
        overlay(&mut v, &cfg, &|k| k == "rows").unwrap();
        assert_eq!(v, serde_json::json!({"rows": 10, "features": 7}));
        let bad = serde_json::json!({"nope": 1});
        assert!(overlay(&mut v, &bad, &|_| false).is_err());
    }
}
