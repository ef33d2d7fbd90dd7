//! CSV and JSON emission. Every artifact starts with the config hash.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::failure::Failure;

pub struct Csv {
    text: String,
    width: usize,
}

impl Csv {
    pub fn new(hash: &str, meta: &[(&str, String)], columns: &[String]) -> Self {
        let mut text = format!("# config_hash: {hash}\n");
        for (k, v) in meta {
            let _ = writeln!(text, "# {k}: {v}");
        }
        text.push_str(&columns.join(","));
        text.push('\n');
        Self { text, width: columns.len() }
    }

    pub fn row(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.width);
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            push_float(&mut self.text, *v);
        }
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<(), Failure> {
        write_text(path, &self.text)
    }
}

/// Shortest round-trip form; exponent notation outside `[1e-4, 1e7)`.
fn push_float(out: &mut String, v: f64) {
    let a = v.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e7).contains(&a) {
        let _ = write!(out, "{v}");
    } else {
        let _ = write!(out, "{v:e}");
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

/// Writes `payload` as a JSON object carrying a top-level `config_hash`.
pub fn write_json(path: &Path, hash: &str, payload: &impl Serialize) -> Result<(), Failure> {
    let mut value = serde_json::to_value(payload).map_err(|e| Failure::Io(e.to_string()))?;
    match &mut value {
        Value::Object(map) => {
            map.insert("config_hash".into(), Value::String(hash.into()));
        }
        other => value = json!({ "config_hash": hash, "data": other.take() }),
    }
    let mut text = serde_json::to_string_pretty(&value).map_err(|e| Failure::Io(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// `dir/name.ext` next to `path` with the stem of `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn write_provenance(
    main: &Path,
    command: &str,
    cfg: &RunConfig,
    hash: &str,
    outputs: &[PathBuf],
) -> Result<PathBuf, Failure> {
    let path = sibling(main, "provenance.json");
    let names: Vec<String> =
        outputs.iter().map(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()).collect();
    let record = json!({
        "command": command,
        "config": cfg,
        "outputs": names,
        "versions": {
            "tpshock-cli": env!("CARGO_PKG_VERSION"),
            "tpshock-core": tpshock_core::VERSION,
        },
    });
    write_json(&path, hash, &record)?;
    Ok(path)
}
