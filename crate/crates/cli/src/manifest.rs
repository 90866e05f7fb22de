//! `manifest.json` of a run directory: SHA-256 of every output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = e?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes of every file below `root` keyed by `/`-separated relative path,
/// the manifest itself excluded.
pub fn hashes(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut out = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(root).expect("below root");
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/");
        if key == FILE {
            continue;
        }
        let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
        out.insert(key, sha256_hex(&bytes));
    }
    Ok(out)
}

/// Rewrites the manifest from the current directory contents.
pub fn refresh(root: &Path) -> Result<BTreeMap<String, String>> {
    let h = hashes(root)?;
    let mut text = serde_json::to_string_pretty(&serde_json::json!({ "files": h }))?;
    text.push('\n');
    let path = root.join(FILE);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(h)
}

pub fn read(root: &Path) -> Result<BTreeMap<String, String>> {
    let path = root.join(FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(serde_json::from_value(v["files"].clone())?)
}
