//! Flat `key = value` config files whose keys mirror long flag names.
//!
//! Entries are appended to the command line only for flags the user did not
//! pass, so explicit flags win over the file and the file wins over defaults.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected `key = value`", no + 1);
        };
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", no + 1);
        }
        out.push((key, v.trim().trim_matches('"').to_string()));
    }
    Ok(out)
}

fn flag_present(args: &[String], key: &str) -> bool {
    let long = format!("--{key}");
    let with_eq = format!("--{key}=");
    args.iter().any(|a| a == &long || a.starts_with(&with_eq))
}

/// Locates `--config PATH` (or `--config=PATH`) and merges the file into the
/// argument list. Boolean entries take `true`/`false`.
pub fn merge(args: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config file {path}"))?;
    let mut merged = args;
    for (key, value) in parse(&text)? {
        if key == "config" || flag_present(&merged, &key) {
            continue;
        }
        match value.to_ascii_lowercase().as_str() {
            "true" => merged.push(format!("--{key}")),
            "false" => {}
            _ => {
                merged.push(format!("--{key}"));
                merged.push(value);
            }
        }
    }
    Ok(merged)
}
