use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Record of one command-line run, written next to its primary output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, flags: serde_json::Value) -> Self {
        RunManifest {
            command: command.into(),
            argv,
            flags,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    /// `<output>.manifest.json`
    pub fn path_for(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    /// Hash the listed files and write the manifest beside the first output.
    pub fn finish(mut self, inputs: &[&Path], outputs: &[&Path]) -> Result<PathBuf> {
        self.inputs = inputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?;
        self.outputs = outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_>>()?;
        let first = outputs
            .first()
            .ok_or_else(|| Error::input("a manifest needs at least one output"))?;
        let path = Self::path_for(first);
        crate::jsonl::write_json(&path, &self)?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.jsonl");
        std::fs::write(&out, b"abc").unwrap();
        let m = RunManifest::new("x", vec!["synfaith".into()], serde_json::json!({}));
        let p = m.finish(&[], &[&out]).unwrap();
        assert_eq!(p, dir.path().join("a.jsonl.manifest.json"));
        let back: RunManifest = crate::jsonl::read_json(&p).unwrap();
        // sha256("abc")
        assert_eq!(
            back.outputs[0].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn missing_input_names_the_path() {
        let m = RunManifest::new("x", vec![], serde_json::json!({}));
        let err = m.finish(&[Path::new("/nonexistent/in")], &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/in"));
    }
}
