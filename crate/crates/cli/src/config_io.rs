//! Config loading: built-in defaults, a JSON file merged over them, then
//! `--set key=value` overrides. Unknown keys are rejected with their dotted
//! path; invariant violations come back from `RunConfig::validate`.

use anyhow::{anyhow, bail, Context, Result};
use ipl_core::RunConfig;
use serde_json::Value;
use std::path::Path;

pub fn load_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut resolved = serde_json::to_value(RunConfig::default()).expect("defaults serialize");

    if let Some(path) = file {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let overlay: Value =
            serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
        merge(&mut resolved, &overlay, String::new())?;
    }

    for set in sets {
        let (key, value) = set
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{set}`"))?;
        // Values parse as JSON when possible, otherwise as a bare string.
        let value: Value = serde_json::from_str(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        set_path(&mut resolved, key, value)?;
    }

    let config: RunConfig = serde_json::from_value(resolved.clone())
        .map_err(|e| anyhow!("config does not match schema: {e}"))?;
    config.validate()?;
    Ok(config)
}

/// Recursive merge that only follows keys present in the defaults, so typos
/// are reported with their full path instead of being silently dropped.
fn merge(base: &mut Value, overlay: &Value, path: String) -> Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let child_path = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, child_path)?,
                    None => bail!("unknown config key `{child_path}`"),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| anyhow!("`{}` is not a section", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            match obj.get_mut(*part) {
                Some(slot) => {
                    *slot = value;
                    return Ok(());
                }
                None => bail!("unknown config key `{key}`"),
            }
        }
        cursor = obj
            .get_mut(*part)
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    unreachable!("empty key paths are rejected by the splitter")
}

/// Flattens the default config to `key = value` lines for `--help`.
pub fn config_key_help() -> String {
    let defaults = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    let mut lines = Vec::new();
    flatten(&defaults, String::new(), &mut lines);
    let mut out = String::from("Config keys (current defaults, override with --set key=value):\n");
    for line in lines {
        out.push_str("  ");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn flatten(value: &Value, path: String, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let child = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                flatten(v, child, out);
            }
        }
        other => out.push(format!("{path} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_load_without_file() {
        let cfg = load_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn set_overrides_and_validates() {
        let cfg = load_config(None, &["ipl.rounds=2".into(), "seeds.run=9".into()]).unwrap();
        assert_eq!(cfg.ipl.rounds, 2);
        assert_eq!(cfg.seeds.run, 9);

        let err = load_config(None, &["ipl.subset_fraction=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("ipl.subset_fraction"), "{err}");
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = load_config(None, &["ipl.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("ipl.bogus"), "{err}");
    }

    #[test]
    fn help_lists_keys() {
        let help = config_key_help();
        assert!(help.contains("ipl.subset_fraction = 0.25"));
        assert!(help.contains("train.learning_rate"));
    }
}
