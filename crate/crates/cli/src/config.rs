//! `--config file.json`: a section per command, keys named like the long
//! flags (`out_dir` or `out-dir`). The section is spliced in as flags right
//! after the command name, so anything given on the command line wins.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde_json::Value;

use crate::MissingInput;

const COMMANDS: [&str; 5] = ["gen", "train", "rollout", "eval", "plot"];

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Flags for one command section, in key order.
pub fn section_flags(section: &Value, command: &str) -> anyhow::Result<Vec<OsString>> {
    let Some(obj) = section.as_object() else {
        bail!("config section {command:?} must be an object");
    };
    let mut out = Vec::new();
    for (key, value) in obj {
        let flag = OsString::from(format!("--{}", key.replace('_', "-")));
        match value {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag),
            Value::Number(n) => out.extend([flag, n.to_string().into()]),
            Value::String(s) => out.extend([flag, s.into()]),
            Value::Array(items) => {
                let parts: Vec<String> = items
                    .iter()
                    .map(|v| match v {
                        Value::Number(n) => Ok(n.to_string()),
                        Value::String(s) => Ok(s.clone()),
                        other => bail!("{command}.{key}: unsupported list item {other}"),
                    })
                    .collect::<anyhow::Result<_>>()?;
                out.extend([flag, parts.join(",").into()]);
            }
            Value::Object(_) => bail!("{command}.{key}: nested objects are not flags"),
        }
    }
    Ok(out)
}

fn load(path: &Path) -> anyhow::Result<Value> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !v.is_object() {
        bail!("{}: top level must be an object keyed by command", path.display());
    }
    Ok(v)
}

/// Return `argv` with the config section for the chosen command inserted.
pub fn expand_args(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let cfg = load(&path)?;
    let Some(pos) = argv.iter().position(|a| COMMANDS.iter().any(|c| a == *c)) else {
        return Ok(argv);
    };
    let command = argv[pos].to_string_lossy().into_owned();
    let Some(section) = cfg.get(&command) else {
        return Ok(argv);
    };
    let flags = section_flags(section, &command)?;
    let mut out = argv[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}
