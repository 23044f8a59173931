//! Run manifests and config-file resolution.
//!
//! A config file is TOML with one table per subcommand (`[extract]`,
//! `[train]`, ...). Keys mirror the long flag names with `_` for `-`; a flag
//! given on the command line replaces the file's value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

pub const DEFAULT_SEED: u64 = 0;

/// Provenance embedded in every file a run writes. Contains no timestamps, so
/// identical manifests imply bit-identical outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: Option<String>,
    /// SHA-256 of the effective settings (file values overlaid by flags).
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new<T: Serialize>(subcommand: &str, config: Option<&Path>, settings: &T, seed: u64) -> Result<Self> {
        let effective = toml::to_string(settings).context("serializing settings")?;
        let digest = Sha256::digest(effective.as_bytes());
        let mut config_hash = String::with_capacity(64);
        for b in digest {
            let _ = write!(config_hash, "{b:02x}");
        }
        Ok(Self {
            tool: "vemis".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            config: config.map(display_abs),
            config_hash,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(display_abs(p));
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(display_abs(p));
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest is plain data")
    }

    /// Single `#` line for CSV outputs.
    pub fn comment_line(&self) -> String {
        format!("# manifest: {}\n", self.to_json())
    }
}

/// Absolute path without touching the filesystem.
pub fn display_abs(p: &Path) -> String {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

/// Reads `[section]` of the config file (if any) and overlays the flags set on
/// the command line. Unset flags serialize to nothing and leave file values.
pub fn resolve<T>(flags: &T, config: Option<&Path>, section: &str) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut table = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let mut doc: toml::Table =
                toml::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
            match doc.remove(section) {
                Some(toml::Value::Table(t)) => t,
                Some(_) => return Err(UsageError(format!("config: `{section}` must be a table")).into()),
                None => toml::Table::new(),
            }
        }
        None => toml::Table::new(),
    };
    let overlay = toml::Table::try_from(flags).context("serializing flags")?;
    table.extend(overlay);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| UsageError(format!("config [{section}]: {e}")).into())
}

/// Writes `text` through a sibling temp file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

/// `{"manifest": ..., "<key>": value}` as pretty JSON.
pub fn json_with_manifest<T: Serialize>(manifest: &RunManifest, key: &str, value: &T) -> Result<String> {
    let mut map = serde_json::Map::new();
    map.insert("manifest".into(), serde_json::to_value(manifest)?);
    map.insert(key.into(), serde_json::to_value(value)?);
    Ok(serde_json::to_string_pretty(&serde_json::Value::Object(map))? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct S {
        epochs: Option<usize>,
        seed: Option<u64>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        data: Vec<String>,
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "[train]\nepochs = 5\nseed = 3\ndata = [\"a\"]\n").unwrap();
        let flags = S {
            seed: Some(9),
            ..S::default()
        };
        let s = resolve(&flags, Some(&cfg), "train").unwrap();
        assert_eq!(
            s,
            S {
                epochs: Some(5),
                seed: Some(9),
                data: vec!["a".into()]
            }
        );
        let none = resolve(&flags, Some(&cfg), "extract").unwrap();
        assert_eq!(none.epochs, None);
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "[train]\nepoch = 5\n").unwrap();
        let err = resolve(&S::default(), Some(&cfg), "train").unwrap_err();
        assert!(err.is::<UsageError>());
    }

    #[test]
    fn hash_tracks_settings() {
        let a = RunManifest::new("train", None, &S::default(), 0).unwrap();
        let b = RunManifest::new("train", None, &S::default(), 0).unwrap();
        let c = RunManifest::new(
            "train",
            None,
            &S {
                epochs: Some(1),
                ..S::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }
}
