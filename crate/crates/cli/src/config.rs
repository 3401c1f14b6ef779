//! Flat `key = value` run configuration with flag overrides and a manifest
//! of every value a command resolved.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, CliResult};

/// Keys naming input files; they must exist when the configuration is
/// loaded and are stored as absolute paths.
const PATH_KEYS: &[&str] = &["field", "covariates", "fit", "initial", "future"];

/// Values of these keys may be a built-in source instead of a file.
const BUILTIN_SOURCES: &[&str] = &["study", "none"];

const KNOWN_KEYS: &[&str] = &[
    "command",
    "version",
    "seed",
    "out",
    "family",
    "threads",
    "runs",
    "threshold",
    "preset",
    "nx",
    "ny",
    "n_times",
    "delta",
    "spacing",
    "t0",
    "burn_in",
    "truncation_sigmas",
    "lambda",
    "v1",
    "v2",
    "rho1",
    "rho2",
    "theta1",
    "theta2",
    "theta3",
    "beta",
    "field",
    "covariates",
    "fit",
    "initial",
    "future",
    "horizon",
    "max_evals",
    "starts",
    "bin_width",
    "max_distance",
    "n_boot",
    "lags",
    "half_width",
    "n_terms",
    "k_par",
    "k_perp",
    "tau",
    "domain",
    "tolerance",
    "true_family",
];

#[derive(Debug, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
    resolved: RefCell<BTreeMap<String, String>>,
}

impl Config {
    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets a key, replacing any earlier value.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Usage(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Replaces every file-valued key by its absolute path, failing if the
    /// file does not exist.
    pub fn resolve_paths(&mut self) -> CliResult<()> {
        for key in PATH_KEYS {
            let Some(value) = self.values.get(*key) else { continue };
            if BUILTIN_SOURCES.contains(&value.as_str()) {
                continue;
            }
            let mut parts = Vec::new();
            for item in value.split(',').map(str::trim) {
                let p = std::fs::canonicalize(item)
                    .map_err(|_| CliError::Usage(format!("{key}: file `{item}` does not exist")))?;
                parts.push(p.display().to_string());
            }
            self.values.insert(key.to_string(), parts.join(","));
        }
        Ok(())
    }

    fn record(&self, key: &str, value: String) {
        self.resolved.borrow_mut().insert(key.to_string(), value);
    }

    pub fn str_opt(&self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if let Some(v) = &v {
            self.record(key, v.clone());
        }
        v
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        let v = self.values.get(key).cloned().unwrap_or_else(|| default.to_string());
        self.record(key, v.clone());
        v
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.str_opt(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| CliError::Usage(format!("{key} = `{v}`: {e}"))),
        }
    }

    pub fn get_or<T: FromStr + Display>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        match self.get_opt(key)? {
            Some(v) => Ok(v),
            None => {
                self.record(key, default.to_string());
                Ok(default)
            }
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        self.get_opt(key)?.ok_or_else(|| CliError::Usage(format!("missing required key `{key}`")))
    }

    /// Comma-separated list.
    pub fn list_opt<T: FromStr>(&self, key: &str) -> CliResult<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        match self.str_opt(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| CliError::Usage(format!("{key} = `{v}`: {e}"))))
                .collect::<CliResult<Vec<T>>>()
                .map(Some),
        }
    }

    /// A required input file.
    pub fn path(&self, key: &str) -> CliResult<PathBuf> {
        self.str_opt(key)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::Usage(format!("missing required input `{key}`")))
    }

    /// Every explicit value plus every default a command consulted, as
    /// `key = value` lines headed by the command and the tool version.
    pub fn manifest(&self, command: &str) -> String {
        let mut all = self.values.clone();
        all.extend(self.resolved.borrow().iter().map(|(k, v)| (k.clone(), v.clone())));
        all.remove("command");
        all.remove("version");
        let mut out = format!("command = {command}\nversion = {}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in all {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
