//! Flat key-value experiment configs with typed, schema-checked access.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, blank lines
//! ignored. Grids are comma lists (`lambdas = 0.01,0.1,1`); dropout
//! architectures use `WIDTHxDEPTH` tokens (`architectures = 16x1,32x1`).
//! Every key must be consumed by the experiment schema: unknown keys are
//! rejected up front, and missing required keys are reported by name.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("bad value for `{key}`: {value:?} ({expected})")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("unknown config key(s): {0}")]
    UnknownKeys(String),
    #[error("config syntax error on line {line}: {text:?}")]
    Syntax { line: usize, text: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Parsed key-value pairs with consumption tracking.
#[derive(Debug, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(ConfigMap {
            entries,
            used: BTreeSet::new(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Overrides or inserts a key (used for CLI-level overrides).
    pub fn set(&mut self, key: &str, value: String) {
        self.entries.insert(key.to_string(), value);
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.used.insert(key.to_string());
        self.entries.get(key).cloned()
    }

    pub fn require(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key)
            .ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn parse_as<T: std::str::FromStr>(
        key: &str,
        value: &str,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        value.parse::<T>().map_err(|_| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        })
    }

    pub fn require_u64(&mut self, key: &str) -> Result<u64, ConfigError> {
        let v = self.require(key)?;
        Self::parse_as(key, &v, "unsigned integer")
    }

    pub fn require_usize(&mut self, key: &str) -> Result<usize, ConfigError> {
        let v = self.require(key)?;
        Self::parse_as(key, &v, "unsigned integer")
    }

    pub fn require_f64(&mut self, key: &str) -> Result<f64, ConfigError> {
        let v = self.require(key)?;
        Self::parse_as(key, &v, "number")
    }

    pub fn require_path(&mut self, key: &str) -> Result<PathBuf, ConfigError> {
        Ok(PathBuf::from(self.require(key)?))
    }

    pub fn opt_usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.take(key) {
            Some(v) => Self::parse_as(key, &v, "unsigned integer"),
            None => Ok(default),
        }
    }

    pub fn opt_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.take(key) {
            Some(v) => Self::parse_as(key, &v, "number"),
            None => Ok(default),
        }
    }

    pub fn opt_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key) {
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    key: key.to_string(),
                    value: v,
                    expected: "boolean (true/false)",
                }),
            },
            None => Ok(default),
        }
    }

    pub fn require_f64_list(&mut self, key: &str) -> Result<Vec<f64>, ConfigError> {
        let v = self.require(key)?;
        v.split(',')
            .map(|s| Self::parse_as(key, s.trim(), "comma list of numbers"))
            .collect()
    }

    pub fn require_usize_list(&mut self, key: &str) -> Result<Vec<usize>, ConfigError> {
        let v = self.require(key)?;
        v.split(',')
            .map(|s| Self::parse_as(key, s.trim(), "comma list of unsigned integers"))
            .collect()
    }

    pub fn opt_f64_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, ConfigError> {
        match self.take(key) {
            Some(v) => v
                .split(',')
                .map(|s| Self::parse_as(key, s.trim(), "comma list of numbers"))
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    pub fn opt_usize_list(
        &mut self,
        key: &str,
        default: &[usize],
    ) -> Result<Vec<usize>, ConfigError> {
        match self.take(key) {
            Some(v) => v
                .split(',')
                .map(|s| Self::parse_as(key, s.trim(), "comma list of unsigned integers"))
                .collect(),
            None => Ok(default.to_vec()),
        }
    }

    /// Echo of all entries for the manifest.
    pub fn echo(&self) -> BTreeMap<String, String> {
        self.entries.clone()
    }

    /// Fails if any key was never consumed by the schema.
    pub fn finish(self) -> Result<(), ConfigError> {
        let unknown: Vec<String> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(unknown.join(", ")))
        }
    }
}

/// Keys shared by every experiment.
#[derive(Clone, Debug)]
pub struct CommonConfig {
    pub master_seed: u64,
    pub seeds: usize,
    pub output_dir: PathBuf,
    pub parallelism: usize,
    /// Exit code 2 fires when the failed-run fraction exceeds this.
    pub fail_tolerance: f64,
}

impl CommonConfig {
    pub fn from_map(map: &mut ConfigMap) -> Result<Self, ConfigError> {
        let common = CommonConfig {
            master_seed: map.require_u64("master_seed")?,
            seeds: map.require_usize("seeds")?,
            output_dir: map.require_path("output_dir")?,
            parallelism: map.require_usize("parallelism")?,
            fail_tolerance: map.opt_f64("fail_tolerance", 0.0)?,
        };
        if common.seeds == 0 {
            return Err(ConfigError::BadValue {
                key: "seeds".into(),
                value: "0".into(),
                expected: "at least 1",
            });
        }
        if common.parallelism == 0 {
            return Err(ConfigError::BadValue {
                key: "parallelism".into(),
                value: "0".into(),
                expected: "at least 1",
            });
        }
        Ok(common)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_types() {
        let mut map = ConfigMap::parse(
            "# comment\nmaster_seed = 42\nseeds=3\noutput_dir = out\nparallelism = 2\nlambdas = 0.1, 1\n",
        )
        .unwrap();
        let common = CommonConfig::from_map(&mut map).unwrap();
        assert_eq!(common.master_seed, 42);
        assert_eq!(map.require_f64_list("lambdas").unwrap(), vec![0.1, 1.0]);
        map.finish().unwrap();
    }

    #[test]
    fn missing_key_named() {
        let mut map = ConfigMap::parse("master_seed = 1\n").unwrap();
        let err = CommonConfig::from_map(&mut map).unwrap_err();
        assert!(err.to_string().contains("seeds"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let mut map =
            ConfigMap::parse("master_seed=1\nseeds=1\noutput_dir=o\nparallelism=1\nwat=1\n")
                .unwrap();
        CommonConfig::from_map(&mut map).unwrap();
        let err = map.finish().unwrap_err();
        assert!(err.to_string().contains("wat"), "{err}");
    }

    #[test]
    fn syntax_error_line_number() {
        let err = ConfigMap::parse("a = 1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
    }
}
