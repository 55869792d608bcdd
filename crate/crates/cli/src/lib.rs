//! Request assembly for the `docsieve` command line: a JSON config file as
//! the base document, then typed flags, then `--set key.path=value`
//! assignments, each overriding the last.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Reads a JSON object from `path`, or starts from `{}`.
pub fn load_base(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !v.is_object() {
        bail!("{} must hold a JSON object", path.display());
    }
    Ok(v)
}

/// Sets a dot-separated `key` inside `doc`, creating intermediate objects.
pub fn set_key(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut node = doc;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            bail!("empty segment in key {key:?}");
        }
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let obj = node.as_object_mut().expect("object");
        if parts.peek().is_none() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one segment")
}

/// Reads a dot-separated `key` from `doc`.
pub fn get_key<'a>(doc: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(doc, |node, part| node.get(part))
}

/// `key=value`; the value is parsed as JSON when possible, otherwise kept as a string.
pub fn parse_assignment(text: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = text.split_once('=') else {
        bail!("expected key=value, got {text:?}");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Makes relative paths absolute against the current directory, so a
/// service running elsewhere on the same machine resolves them the same way.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}

/// Accumulates overrides on top of a base document.
pub struct Request {
    doc: Value,
}

impl Request {
    pub fn new(config: Option<&Path>) -> Result<Self> {
        Ok(Self {
            doc: load_base(config)?,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) -> Result<&mut Self> {
        set_key(&mut self.doc, key, value.into())?;
        Ok(self)
    }

    pub fn set_opt<T: Into<Value>>(&mut self, key: &str, value: Option<T>) -> Result<&mut Self> {
        if let Some(v) = value {
            self.set(key, v)?;
        }
        Ok(self)
    }

    pub fn set_path(&mut self, key: &str, path: Option<&Path>) -> Result<&mut Self> {
        if let Some(p) = path {
            let abs = absolute(p)?;
            self.set(key, abs.to_string_lossy().into_owned())?;
        }
        Ok(self)
    }

    pub fn assign(&mut self, assignments: &[String]) -> Result<&mut Self> {
        for a in assignments {
            let (k, v) = parse_assignment(a)?;
            set_key(&mut self.doc, &k, v)?;
        }
        Ok(self)
    }

    /// Absolutizes any of `keys` holding a relative path string.
    pub fn resolve_paths(&mut self, keys: &[&str]) -> Result<&mut Self> {
        for key in keys {
            if let Some(Value::String(s)) = get_key(&self.doc, key) {
                let p = Path::new(s);
                if p.is_relative() {
                    let abs = absolute(p)?.to_string_lossy().into_owned();
                    set_key(&mut self.doc, key, Value::String(abs))?;
                }
            }
        }
        Ok(self)
    }

    pub fn doc(&self) -> &Value {
        &self.doc
    }

    pub fn build<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.doc.clone()).context("incomplete or invalid request")
    }
}
