//! Run configuration: JSON text, dot-path overrides and validation.
//!
//! A config file is one JSON object. Top-level keys are the study settings
//! plus `output_path`, and three optional sections (`linear_demo`,
//! `enkf_run`, `schrodinger`) hold the settings of the demo subcommands.
//! Every key has a documented default, so `{}` is a complete config. Keys
//! that are not part of the schema are rejected.

use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::experiments::{
    bad, EnkfRunConfig, InitKind, LinearDemoConfig, NonlinearDemoConfig, StudyConfig,
    ValidationError,
};
use crate::spectral_model::SignalKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file `{}` does not exist", path.display())]
    MissingFile { path: PathBuf },

    #[error("cannot read config file `{}`: {source}", path.display())]
    Unreadable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{origin}: parse error at line {line}, column {column}: {message}")]
    Parse {
        origin: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("malformed override `{text}`: {reason}")]
    Override { text: String, reason: String },

    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },

    #[error("config key `{key}` has the wrong type: {message}")]
    TypeMismatch { key: String, message: String },

    #[error("invalid config value: {0}")]
    Invalid(#[from] ValidationError),
}

impl ConfigError {
    /// Process exit status; all config failures share the 2x range.
    pub fn exit_code(&self) -> u8 {
        match self {
            ConfigError::MissingFile { .. } | ConfigError::Unreadable { .. } => 20,
            ConfigError::Parse { .. } | ConfigError::Override { .. } => 21,
            ConfigError::UnknownKey { .. } => 22,
            ConfigError::TypeMismatch { .. } => 23,
            ConfigError::Invalid(_) => 24,
        }
    }
}

/// Settings for `linear-demo`. `p`, `alpha`, `C` and `seed` come from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearDemoSection {
    pub dim: usize,
    pub ensemble_size: usize,
    pub noise_levels: Vec<f64>,
    pub signals: Vec<SignalKind>,
    pub dt_scale: f64,
    pub k_max: usize,
}

impl Default for LinearDemoSection {
    fn default() -> Self {
        let d = LinearDemoConfig::default();
        LinearDemoSection {
            dim: d.dim,
            ensemble_size: d.ensemble_size,
            noise_levels: d.noise_levels,
            signals: d.signals,
            dt_scale: d.dt_scale,
            k_max: d.k_max,
        }
    }
}

/// Settings for `enkf-run`. Model, signal, `C` and `seed` come from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnkfRunSection {
    pub n: u64,
    /// `null` means `D(n)`.
    pub dim: Option<usize>,
    /// `null` means `D + 1` for exact and 100 for random initialisation.
    pub ensemble_size: Option<usize>,
    pub init: InitKind,
    /// `null` means `dt_scale * n`.
    pub dt: Option<f64>,
    pub dt_scale: f64,
    pub k_max: usize,
}

impl Default for EnkfRunSection {
    fn default() -> Self {
        let d = EnkfRunConfig::default();
        EnkfRunSection {
            n: d.n,
            dim: d.dim,
            ensemble_size: d.ensemble_size,
            init: d.init,
            dt: d.dt,
            dt_scale: d.dt_scale,
            k_max: d.k_max,
        }
    }
}

/// Settings for `schrodinger`. Only `seed` comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchrodingerSection {
    pub dg: usize,
    pub ensemble_size: usize,
    #[serde(rename = "C")]
    pub c: f64,
    pub noise_levels: Vec<f64>,
    pub dt_scale: f64,
    pub k_max: usize,
    pub mu: f64,
    pub replicates: usize,
}

impl Default for SchrodingerSection {
    fn default() -> Self {
        let d = NonlinearDemoConfig::default();
        SchrodingerSection {
            dg: d.dg,
            ensemble_size: d.ensemble_size,
            c: d.c,
            noise_levels: d.noise_levels,
            dt_scale: d.dt_scale,
            k_max: d.k_max,
            mu: d.mu,
            replicates: d.replicates,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub study: StudyConfig,
    /// Output directory used when the command line gives none.
    pub output_path: Option<String>,
    pub linear_demo: LinearDemoSection,
    pub enkf_run: EnkfRunSection,
    pub schrodinger: SchrodingerSection,
}

impl RunConfig {
    /// The config as a JSON object in file layout, with every default filled in.
    pub fn to_value(&self) -> Value {
        let mut top = match serde_json::to_value(&self.study) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("study settings serialise to an object"),
        };
        top.insert(
            "output_path".into(),
            self.output_path.clone().map_or(Value::Null, Value::String),
        );
        top.insert("linear_demo".into(), to_json(&self.linear_demo));
        top.insert("enkf_run".into(), to_json(&self.enkf_run));
        top.insert("schrodinger".into(), to_json(&self.schrodinger));
        Value::Object(top)
    }

    fn from_value(value: Value) -> Result<Self, ConfigError> {
        let Value::Object(mut top) = value else {
            return Err(ConfigError::TypeMismatch {
                key: "<root>".into(),
                message: "expected a JSON object".into(),
            });
        };
        let linear_demo = section(&mut top, "linear_demo")?;
        let enkf_run = section(&mut top, "enkf_run")?;
        let schrodinger = section(&mut top, "schrodinger")?;
        let output_path = match top.remove("output_path") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s),
            Some(other) => {
                return Err(ConfigError::TypeMismatch {
                    key: "output_path".into(),
                    message: format!("expected a string, found {}", kind_name(&other)),
                })
            }
        };
        let study = typed("", Value::Object(top))?;
        Ok(RunConfig {
            study,
            output_path,
            linear_demo,
            enkf_run,
            schrodinger,
        })
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        self.study.validate()?;
        let l = &self.linear_demo;
        if l.dim == 0 {
            return Err(bad("linear_demo.dim", "must be at least 1"));
        }
        if l.ensemble_size < 2 {
            return Err(bad("linear_demo.ensemble_size", "must be at least 2"));
        }
        check_noise("linear_demo.noise_levels", &l.noise_levels)?;
        if l.signals.is_empty() {
            return Err(bad("linear_demo.signals", "must not be empty"));
        }
        check_positive("linear_demo.dt_scale", l.dt_scale)?;
        if l.k_max == 0 {
            return Err(bad("linear_demo.k_max", "must be at least 1"));
        }

        let e = &self.enkf_run;
        if e.n == 0 {
            return Err(bad("enkf_run.n", "must be at least 1"));
        }
        if e.dim == Some(0) {
            return Err(bad("enkf_run.dim", "must be at least 1"));
        }
        if matches!(e.ensemble_size, Some(j) if j < 2) {
            return Err(bad("enkf_run.ensemble_size", "must be at least 2"));
        }
        if let Some(dt) = e.dt {
            check_positive("enkf_run.dt", dt)?;
        }
        check_positive("enkf_run.dt_scale", e.dt_scale)?;

        let s = &self.schrodinger;
        if s.dg < 3 {
            return Err(bad("schrodinger.dg", "must be at least 3"));
        }
        if s.ensemble_size < 2 {
            return Err(bad("schrodinger.ensemble_size", "must be at least 2"));
        }
        if !(s.c > 0.0 && s.c <= 1.0) {
            return Err(bad("schrodinger.C", "must lie in (0, 1]"));
        }
        check_noise("schrodinger.noise_levels", &s.noise_levels)?;
        check_positive("schrodinger.dt_scale", s.dt_scale)?;
        check_positive("schrodinger.mu", s.mu)?;
        if s.replicates == 0 {
            return Err(bad("schrodinger.replicates", "must be at least 1"));
        }
        Ok(())
    }

    pub fn linear_demo_config(&self) -> LinearDemoConfig {
        let l = &self.linear_demo;
        LinearDemoConfig {
            p: self.study.p,
            alpha: self.study.alpha,
            dim: l.dim,
            ensemble_size: l.ensemble_size,
            c: self.study.c,
            noise_levels: l.noise_levels.clone(),
            signals: l.signals.clone(),
            dt_scale: l.dt_scale,
            k_max: l.k_max,
            seed: self.study.seed,
        }
    }

    pub fn enkf_run_config(&self) -> EnkfRunConfig {
        let e = &self.enkf_run;
        EnkfRunConfig {
            p: self.study.p,
            alpha: self.study.alpha,
            beta: self.study.beta,
            n: e.n,
            dim: e.dim,
            ensemble_size: e.ensemble_size,
            init: e.init,
            signal_kind: self.study.signal_kind,
            signal_scale: self.study.signal_scale,
            c: self.study.c,
            dt: e.dt,
            dt_scale: e.dt_scale,
            k_max: e.k_max,
            seed: self.study.seed,
        }
    }

    pub fn nonlinear_demo_config(&self) -> NonlinearDemoConfig {
        let s = &self.schrodinger;
        NonlinearDemoConfig {
            dg: s.dg,
            ensemble_size: s.ensemble_size,
            c: s.c,
            noise_levels: s.noise_levels.clone(),
            dt_scale: s.dt_scale,
            k_max: s.k_max,
            mu: s.mu,
            replicates: s.replicates,
            seed: self.study.seed,
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config sections serialise")
}

fn check_positive(key: &str, v: f64) -> Result<(), ValidationError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, "must be positive and finite"))
    }
}

fn check_noise(key: &str, levels: &[f64]) -> Result<(), ValidationError> {
    if levels.is_empty() {
        return Err(bad(key, "must not be empty"));
    }
    if levels.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(bad(key, "entries must be positive and finite"));
    }
    Ok(())
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

fn typed<T: DeserializeOwned>(prefix: &str, value: Value) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let key = match (prefix.is_empty(), inner == ".") {
            (true, _) => inner,
            (false, true) => prefix.to_owned(),
            (false, false) => format!("{prefix}.{inner}"),
        };
        ConfigError::TypeMismatch {
            key,
            message: e.into_inner().to_string(),
        }
    })
}

fn section<T: DeserializeOwned + Default>(
    top: &mut Map<String, Value>,
    name: &str,
) -> Result<T, ConfigError> {
    match top.remove(name) {
        None | Some(Value::Null) => Ok(T::default()),
        Some(v @ Value::Object(_)) => typed(name, v),
        Some(other) => Err(ConfigError::TypeMismatch {
            key: name.to_owned(),
            message: format!("expected an object, found {}", kind_name(&other)),
        }),
    }
}

/// Rejects any key of `given` that has no counterpart in `schema`.
fn check_known_keys(given: &Value, schema: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(given), Value::Object(schema)) = (given, schema) else {
        return Ok(());
    };
    for (k, v) in given {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match schema.get(k) {
            None => return Err(ConfigError::UnknownKey { key: path }),
            Some(sub) => check_known_keys(v, sub, &path)?,
        }
    }
    Ok(())
}

/// Parses config text into a JSON object. `origin` names the source in errors.
pub fn parse_text(text: &str, origin: &str) -> Result<Value, ConfigError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        origin: origin.to_owned(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if !value.is_object() {
        return Err(ConfigError::TypeMismatch {
            key: "<root>".into(),
            message: format!("expected a JSON object, found {}", kind_name(&value)),
        });
    }
    Ok(value)
}

/// One `KEY=VALUE` override. `VALUE` is read as JSON when it parses as JSON
/// and as a bare string otherwise, so `signal_kind=rough` works unquoted.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

pub fn parse_override(text: &str) -> Result<Override, ConfigError> {
    let fail = |reason: &str| ConfigError::Override {
        text: text.to_owned(),
        reason: reason.to_owned(),
    };
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| fail("expected KEY=VALUE"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(fail("empty key"));
    }
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(fail("empty path segment"));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok(Override { path, value })
}

/// Sets `ov.value` at its dot path, creating intermediate objects as needed.
pub fn apply_override(root: &mut Value, ov: &Override) -> Result<(), ConfigError> {
    let mut node = root;
    let (last, parents) = ov.path.split_last().expect("override paths are non-empty");
    for (depth, seg) in parents.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(ConfigError::TypeMismatch {
                key: ov.path[..depth].join("."),
                message: format!("cannot set `{seg}` inside a non-object"),
            });
        };
        node = map
            .entry(seg.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    match node {
        Value::Object(map) => {
            map.insert(last.clone(), ov.value.clone());
            Ok(())
        }
        _ => Err(ConfigError::TypeMismatch {
            key: parents.join("."),
            message: format!("cannot set `{last}` inside a non-object"),
        }),
    }
}

/// Builds a validated config from parsed JSON and overrides applied in order.
pub fn resolve(mut value: Value, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    for text in overrides {
        apply_override(&mut value, &parse_override(text)?)?;
    }
    check_known_keys(&value, &RunConfig::default().to_value(), "")?;
    let cfg = RunConfig::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the config at `path` (or starts from `{}`) and applies overrides.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let value = match path {
        None => Value::Object(Map::new()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| match source.kind() {
                io::ErrorKind::NotFound => ConfigError::MissingFile {
                    path: path.to_owned(),
                },
                _ => ConfigError::Unreadable {
                    path: path.to_owned(),
                    source,
                },
            })?;
            parse_text(&text, &path.display().to_string())?
        }
    };
    resolve(value, overrides)
}
