//! Flat key = value run configuration; command-line flags override file
//! values.

use robmix::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

/// Keys understood by the config file.
pub const KNOWN_KEYS: &[&str] = &[
    "data",
    "layout",
    "mean_terms",
    "dispersion_terms",
    "outer_tol",
    "inner_tol",
    "mean_tol",
    "target",
    "n_starts",
    "n_sim",
    "alpha",
    "mode",
    "seed",
    "out",
    "format",
];

#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                context: format!("{} line {}", path.display(), lineno + 1),
                message: "expected `key = value`".to_string(),
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Parse {
                    context: format!("{} line {}", path.display(), lineno + 1),
                    message: format!("unknown key {key:?}"),
                });
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    context: format!("config key {key}"),
                    message: format!("expected a number, got {v:?}"),
                })
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| Error::Parse {
                    context: format!("config key {key}"),
                    message: format!("expected an integer, got {v:?}"),
                })
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| Error::Parse {
                    context: format!("config key {key}"),
                    message: format!("expected an integer, got {v:?}"),
                })
            })
            .transpose()
    }
}
