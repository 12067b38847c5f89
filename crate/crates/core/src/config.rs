//! Layered TOML configuration: defaults, then a file, then dotted-key overrides.
//!
//! Every layer is checked against the default tree, so a misspelled key fails
//! with its full dotted path instead of being silently ignored.

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Error, Result};

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

/// Replaces `base` by `over`, coercing integers to floats where the default is
/// a float and rejecting type changes.
fn assign(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => merge_tables(b, o, path),
        (b @ Value::Float(_), Value::Integer(i)) => {
            *b = Value::Float(i as f64);
            Ok(())
        }
        (b @ Value::Array(_), Value::Array(o)) => {
            *b = Value::Array(o);
            Ok(())
        }
        (b @ Value::Array(_), scalar) if !scalar.is_table() => {
            *b = Value::Array(vec![scalar]);
            Ok(())
        }
        (b, o) if std::mem::discriminant(b) == std::mem::discriminant(&o) => {
            *b = o;
            Ok(())
        }
        (b, o) => Err(Error::config(
            path,
            format!("expected {}, found {}", type_name(b), type_name(&o)),
        )),
    }
}

fn merge_tables(base: &mut Table, over: Table, path: &str) -> Result<()> {
    for (key, value) in over {
        let here = join(path, &key);
        match base.get_mut(&key) {
            Some(slot) => assign(slot, value, &here)?,
            None => return Err(Error::config(here, "unknown key")),
        }
    }
    Ok(())
}

/// Reads an override value: TOML syntax when it parses, a comma-separated list
/// as an array, anything else as a bare string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    let parse = |text: &str| -> Option<Value> {
        let table: Table = toml::from_str(&format!("v = {text}")).ok()?;
        table.get("v").cloned()
    };
    if let Some(v) = parse(raw) {
        return v;
    }
    if raw.contains(',') && !raw.starts_with('[') {
        if let Some(v) = parse(&format!("[{raw}]")) {
            return v;
        }
        return Value::Array(raw.split(',').map(|s| Value::String(s.trim().to_string())).collect());
    }
    Value::String(raw.to_string())
}

/// Splits `key=value`.
pub fn split_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(Error::config(arg, "override must have the form key=value")),
    }
}

/// Sets the dotted `key` (array elements addressed by index) in `tree`.
pub fn apply_override(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = tree;
    let mut path = String::new();
    for segment in key.split('.') {
        path = join(&path, segment);
        node = match node {
            Value::Table(t) => t
                .get_mut(segment)
                .ok_or_else(|| Error::config(path.clone(), "unknown key"))?,
            Value::Array(items) => {
                let len = items.len();
                let index: usize = segment
                    .parse()
                    .map_err(|_| Error::config(path.clone(), "expected an array index"))?;
                items
                    .get_mut(index)
                    .ok_or_else(|| Error::config(path.clone(), format!("index out of range (length {len})")))?
            }
            _ => return Err(Error::config(path, "not a section")),
        };
    }
    assign(node, parse_value(raw), key)
}

/// Builds a `T` from its defaults, an optional TOML document and overrides.
pub fn layered<T>(defaults: &T, document: Option<&str>, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut tree = Value::try_from(defaults).map_err(|e| Error::Serialize(e.to_string()))?;
    if let Some(text) = document {
        let parsed: Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        assign(&mut tree, Value::Table(parsed), "")?;
    }
    for (key, raw) in overrides {
        apply_override(&mut tree, key, raw)?;
    }
    tree.try_into().map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))
}

/// TOML text of `value`.
pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        rate: f64,
        name: String,
    }

    impl Default for Inner {
        fn default() -> Self {
            Inner {
                rate: 0.5,
                name: "a".into(),
            }
        }
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        counts: Vec<u64>,
        inner: Inner,
        items: Vec<Inner>,
    }

    impl Default for Outer {
        fn default() -> Self {
            Outer {
                counts: vec![4, 2],
                inner: Inner::default(),
                items: vec![Inner::default(), Inner::default()],
            }
        }
    }

    fn build(doc: Option<&str>, sets: &[(&str, &str)]) -> Result<Outer> {
        let sets: Vec<(String, String)> = sets.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        layered(&Outer::default(), doc, &sets)
    }

    #[test]
    fn defaults_survive() {
        assert_eq!(build(None, &[]).unwrap(), Outer::default());
    }

    #[test]
    fn file_then_override() {
        let o = build(Some("[inner]\nrate = 2\n"), &[("inner.name", "zed"), ("counts", "8,4,0")]).unwrap();
        assert_eq!(o.inner.rate, 2.0);
        assert_eq!(o.inner.name, "zed");
        assert_eq!(o.counts, vec![8, 4, 0]);
        assert_eq!(build(None, &[("counts", "3")]).unwrap().counts, vec![3]);
        assert_eq!(build(None, &[("items.1.rate", "0.25")]).unwrap().items[1].rate, 0.25);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = build(None, &[("inner.rat", "1")]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "inner.rat"), "{err}");
        let err = build(Some("[inner]\nbogus = 1\n"), &[]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "inner.bogus"), "{err}");
        assert!(build(None, &[("items.7.rate", "1")]).is_err());
        assert!(build(Some("items = [{ rate = 1.0, extra = 2 }]"), &[]).unwrap_err().is_config_error());
    }

    #[test]
    fn type_changes_rejected() {
        let err = build(None, &[("inner.rate", "fast")]).unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "inner.rate"), "{err}");
    }

    #[test]
    fn override_syntax() {
        assert!(split_override("novalue").is_err());
        assert_eq!(split_override("a.b=1=2").unwrap(), ("a.b".into(), "1=2".into()));
        assert_eq!(parse_value("x,y"), Value::Array(vec![Value::String("x".into()), Value::String("y".into())]));
        assert_eq!(parse_value("plain"), Value::String("plain".into()));
    }
}
