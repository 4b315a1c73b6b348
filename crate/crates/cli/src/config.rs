//! Flat key-value configuration files (TOML or JSON) turned into command-line flags.

use std::ffi::OsString;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

/// Read a flat table of scalars or scalar lists. The format follows the extension;
/// anything other than `.json` is parsed as TOML.
pub fn load_flat(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
    } else {
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?;
        serde_json::to_value(table)?
    };
    let Value::Object(map) = value else {
        bail!("config {} must be a key-value table", path.display());
    };
    let mut out = Vec::with_capacity(map.len());
    for (k, v) in map {
        let scalar = |v: &Value| matches!(v, Value::String(_) | Value::Number(_) | Value::Bool(_));
        let ok = scalar(&v) || matches!(&v, Value::Array(items) if items.iter().all(scalar));
        if !ok {
            bail!("config key '{k}' must be a scalar or a list of scalars");
        }
        out.push((k, v));
    }
    Ok(out)
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flags equivalent to the config entries. Keys may use snake_case; `true` becomes a
/// bare switch, `false` is dropped, lists are comma-joined. The `config` key itself is
/// ignored.
pub fn to_flags(entries: &[(String, Value)]) -> Vec<OsString> {
    let mut out = Vec::new();
    for (k, v) in entries {
        let flag = format!("--{}", k.replace('_', "-"));
        if flag == "--config" {
            continue;
        }
        match v {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) => {}
            Value::Array(items) => {
                out.push(flag.into());
                out.push(items.iter().map(scalar_text).collect::<Vec<_>>().join(",").into());
            }
            other => {
                out.push(flag.into());
                out.push(scalar_text(other).into());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_give_the_same_flags() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "batch_size = 16\nlr = 0.001\nno_vflip = true\nencoder_widths = [4, 8]\nname = \"e\"\n").unwrap();
        let j = dir.path().join("c.json");
        std::fs::write(&j, r#"{"batch_size": 16, "lr": 0.001, "no_vflip": true, "encoder_widths": [4, 8], "name": "e"}"#)
            .unwrap();
        let mut a = to_flags(&load_flat(&t).unwrap());
        let mut b = to_flags(&load_flat(&j).unwrap());
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert!(a.contains(&"--encoder-widths".into()) && a.contains(&"4,8".into()));
    }

    #[test]
    fn nested_tables_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "[gan]\nsteps = 3\n").unwrap();
        assert!(load_flat(&t).is_err());
    }
}
