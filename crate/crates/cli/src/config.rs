//! Parameter blocks: defaults, then the JSON config file, then `--set`
//! overrides, deserialized with unknown keys rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Parses `key=value`; the value is read as JSON when possible and as a bare
/// string otherwise. Dotted keys address nested objects.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("empty key segment in `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

fn set_path(target: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut cur = target;
    for (k, key) in path.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not an object", path[..k].join("."))))?;
        if k + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

/// Recursive merge; objects merge key by key, anything else is replaced.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(CliError::Config(format!("{}: top level must be an object", path.display())));
    }
    Ok(v)
}

/// Builds the parameter block for one subcommand.
pub fn resolve<P: Serialize + DeserializeOwned>(
    defaults: &P,
    file: Option<Value>,
    overrides: &[(Vec<String>, Value)],
) -> Result<P, CliError> {
    let mut v = serde_json::to_value(defaults).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(f) = file {
        merge(&mut v, f);
    }
    for (path, value) in overrides {
        set_path(&mut v, path, value.clone())?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Block {
        n: usize,
        inner: Inner,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        sigma: f64,
        label: String,
    }

    fn defaults() -> Block {
        Block { n: 3, inner: Inner { sigma: 1.0, label: "a".into() } }
    }

    #[test]
    fn overrides_apply_in_order() {
        let file = json!({"n": 5, "inner": {"sigma": 2.0}});
        let ov = vec![parse_override("inner.label=bee").unwrap(), parse_override("n=7").unwrap()];
        let b: Block = resolve(&defaults(), Some(file), &ov).unwrap();
        assert_eq!(b, Block { n: 7, inner: Inner { sigma: 2.0, label: "bee".into() } });
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = resolve::<Block>(&defaults(), Some(json!({"m": 1})), &[]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let ov = vec![parse_override("inner.extra=1").unwrap()];
        assert!(resolve::<Block>(&defaults(), None, &ov).is_err());
    }

    #[test]
    fn malformed_overrides_rejected() {
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
        let ov = vec![parse_override("n.deep=1").unwrap()];
        assert!(resolve::<Block>(&defaults(), None, &ov).is_err());
    }

    #[test]
    fn values_parse_as_json_first() {
        assert_eq!(parse_override("x=[1,2]").unwrap().1, json!([1, 2]));
        assert_eq!(parse_override("x=0.5").unwrap().1, json!(0.5));
        assert_eq!(parse_override("x=diffusion").unwrap().1, json!("diffusion"));
    }
}
