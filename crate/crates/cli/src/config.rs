//! Flat key=value run configuration: defaults, overlaid by an optional
//! config file, overlaid by explicit command-line flags. Every run writes
//! its fully resolved configuration next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new(defaults: &[(&str, String)]) -> Self {
        let mut map = BTreeMap::new();
        for (k, v) in defaults {
            map.insert((*k).to_string(), v.clone());
        }
        Self { map }
    }

    /// Overlay `key = value` lines; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value, got '{raw}'", path.display(), ln + 1);
            };
            self.map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    /// Overlay a flag value only when it was actually given.
    pub fn set_opt(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(|s| s.as_str())
            .with_context(|| format!("missing config key '{key}'"))
    }

    pub fn opt_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.str(key)?
            .parse()
            .with_context(|| format!("config key '{key}' is not a number"))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.str(key)?
            .parse()
            .with_context(|| format!("config key '{key}' is not an integer"))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.str(key)?
            .parse()
            .with_context(|| format!("config key '{key}' is not an integer"))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.str(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => bail!("config key '{key}' is not a boolean: '{other}'"),
        }
    }

    /// Comma-separated list of numbers.
    pub fn list_f64(&self, key: &str) -> Result<Vec<f64>> {
        self.str(key)?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("bad number '{s}' in '{key}'"))
            })
            .collect()
    }

    pub fn list_usize(&self, key: &str) -> Result<Vec<usize>> {
        self.str(key)?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .with_context(|| format!("bad integer '{s}' in '{key}'"))
            })
            .collect()
    }

    /// Write the resolved configuration for reproducibility.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (k, v) in &self.map {
            text.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
