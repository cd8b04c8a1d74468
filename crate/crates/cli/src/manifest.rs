//! Flat `key=value` manifests written beside every output, and the
//! `--config` mechanism that reads them back as default flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    /// Flattens a serializable argument struct. `None` fields are omitted and
    /// empty lists are omitted, other lists are comma-joined.
    pub fn from_args<T: Serialize>(command: &str, args: &T) -> Result<Self> {
        let mut entries = BTreeMap::new();
        entries.insert("command".to_string(), command.to_string());
        entries.insert("version".to_string(), env!("CARGO_PKG_VERSION").to_string());
        let Value::Object(map) = serde_json::to_value(args)? else {
            bail!("arguments must serialize to an object");
        };
        for (k, v) in map {
            let s = match v {
                Value::Null => continue,
                Value::Array(items) if items.is_empty() => continue,
                Value::String(s) => s,
                Value::Array(items) => items
                    .into_iter()
                    .map(|i| match i {
                        Value::String(s) => s,
                        other => other.to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            entries.insert(k, s);
        }
        Ok(Manifest { entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("line {}: expected key=value", i + 1);
            };
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    #[cfg(test)]
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// Where the manifest for an output file or directory goes.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.txt")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }
}

/// Inserts `--key value` pairs from the manifest named by `--config` right
/// after the subcommand, so that flags given on the command line (which come
/// later and override) win over the manifest. Keys the subcommand does not
/// accept are ignored.
pub fn expand_config(argv: Vec<String>, known: impl Fn(&str, &str) -> bool) -> Result<Vec<String>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(argv);
    };
    let (path, drop) = match argv[pos].strip_prefix("--config=") {
        Some(p) => (p.to_string(), 1),
        None => match argv.get(pos + 1) {
            Some(p) => (p.clone(), 2),
            None => bail!("--config needs a file"),
        },
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let manifest = Manifest::parse(&text)?;
    let Some(sub_at) = argv.iter().skip(1).position(|a| !a.starts_with('-')).map(|i| i + 1) else {
        bail!("--config given without a subcommand");
    };
    let sub = argv[sub_at].clone();
    let mut out: Vec<String> = Vec::with_capacity(argv.len() + 2 * manifest.entries.len());
    for (i, a) in argv.iter().enumerate() {
        if i >= pos && i < pos + drop {
            continue;
        }
        out.push(a.clone());
        if i == sub_at {
            for (k, v) in &manifest.entries {
                if k == "command" || k == "version" {
                    continue;
                }
                let flag = k.replace('_', "-");
                if known(&sub, &flag) {
                    out.push(format!("--{flag}"));
                    out.push(v.clone());
                }
            }
        }
    }
    Ok(out)
}
