//! Experiment configuration.
//!
//! A config file is TOML whose layout mirrors [`TrainConfig`]: scalar keys at the top
//! level, nested sections `[task]`, `[loss]`, `[optimizer]` and `[thresholds]`, plus a
//! `[run]` section for the seed list, output directory and verbosity. Keys are resolved
//! in layers (built-in default, scenario preset, file, command-line override) and the
//! layer that last set each key is recorded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cpgd_core::{LabError, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config `{origin}`: {message}")]
    Syntax { origin: String, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("ambiguous config key `{key}`, use one of: {candidates}")]
    Ambiguous { key: String, candidates: String },
    #[error("type mismatch at `{path}`: expected {expected}, found {found}")]
    TypeMismatch {
        path: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("invalid value at `{path}`: {message}")]
    InvalidValue { path: String, message: String },
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(#[from] LabError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// The layer a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    Preset,
    File,
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    /// Seeds shared by every variant; empty means the single `seed` key.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub verbose: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seeds: Vec::new(),
            out: PathBuf::from("runs"),
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub run: RunSettings,
    /// Dotted key path to the layer that set it.
    pub provenance: BTreeMap<String, Source>,
}

impl ExperimentConfig {
    /// Seeds to run: the `[run]` list, or the training seed alone.
    pub fn seeds(&self) -> Vec<u64> {
        if self.run.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.run.seeds.clone()
        }
    }

    fn table(&self) -> Table {
        let mut t = to_table(&self.train);
        t.insert("run".into(), Value::Table(to_table(&self.run)));
        t
    }

    /// The fully resolved configuration as a config file.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.table()).expect("resolved config serialises")
    }

    /// The resolved configuration as JSON. Non-finite numbers become strings.
    pub fn to_json(&self) -> serde_json::Value {
        toml_to_json(&Value::Table(self.table()))
    }
}

fn to_table<T: Serialize>(v: &T) -> Table {
    match Value::try_from(v).expect("config types serialise to TOML") {
        Value::Table(t) => t,
        _ => unreachable!("structs serialise to tables"),
    }
}

pub fn toml_to_json(v: &Value) -> serde_json::Value {
    use serde_json::Value as J;
    match v {
        Value::String(s) => J::String(s.clone()),
        Value::Integer(i) => J::from(*i),
        Value::Float(f) if f.is_finite() => J::from(*f),
        Value::Float(f) => J::String(f.to_string()),
        Value::Boolean(b) => J::Bool(*b),
        Value::Datetime(d) => J::String(d.to_string()),
        Value::Array(a) => J::Array(a.iter().map(toml_to_json).collect()),
        Value::Table(t) => J::Object(
            t.iter()
                .map(|(k, v)| (k.clone(), toml_to_json(v)))
                .collect(),
        ),
    }
}

/// Layered resolution of a config table.
#[derive(Debug, Clone)]
pub struct ConfigBuilder {
    table: Table,
    provenance: BTreeMap<String, Source>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfigBuilder {
    pub fn new() -> Self {
        let mut table = to_table(&TrainConfig::default());
        table.insert(
            "run".into(),
            Value::Table(to_table(&RunSettings::default())),
        );
        let mut provenance = BTreeMap::new();
        collect_leaves(&table, "", &mut provenance);
        Self { table, provenance }
    }

    /// Every settable key, dotted.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.provenance.keys().map(String::as_str)
    }

    /// Sets one key given by its dotted path. A table value sets every key of a section.
    pub fn set(&mut self, path: &str, value: Value, source: Source) -> Result<()> {
        let section = format!("{path}.");
        if let Value::Table(incoming) = &value {
            if self.provenance.keys().any(|k| k.starts_with(&section)) {
                for (k, v) in incoming {
                    self.set(&format!("{section}{k}"), v.clone(), source)?;
                }
                return Ok(());
            }
        }
        let segments: Vec<&str> = path.split('.').collect();
        let (last, parents) = segments.split_last().expect("split yields one segment");
        let mut node = &mut self.table;
        for (depth, seg) in parents.iter().enumerate() {
            node = match node.get_mut(*seg) {
                Some(Value::Table(t)) => t,
                Some(other) => {
                    return Err(ConfigError::TypeMismatch {
                        path: segments[..=depth].join("."),
                        expected: "table",
                        found: other.type_str(),
                    })
                }
                None => return Err(ConfigError::UnknownKey(path.to_string())),
            };
        }
        let slot = node
            .get_mut(*last)
            .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
        *slot = coerce(path, slot, value)?;
        self.provenance.insert(path.to_string(), source);
        Ok(())
    }

    /// Merges a parsed table, rejecting keys that do not exist.
    pub fn apply_table(&mut self, incoming: &Table, source: Source) -> Result<()> {
        for (k, v) in incoming {
            self.set(k, v.clone(), source)?;
        }
        Ok(())
    }

    pub fn apply_str(&mut self, text: &str, origin: &str, source: Source) -> Result<()> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax {
                origin: origin.to_string(),
                message: e.message().to_string(),
            })?;
        self.apply_table(&table, source)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.apply_str(&text, &path.display().to_string(), Source::File)
    }

    /// Finds the dotted path for `key`: either a full path or a unique final segment.
    pub fn resolve_key(&self, key: &str) -> Result<String> {
        if self.provenance.contains_key(key) {
            return Ok(key.to_string());
        }
        let matches: Vec<&String> = self
            .provenance
            .keys()
            .filter(|p| p.rsplit('.').next() == Some(key))
            .collect();
        match matches.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(ConfigError::UnknownKey(key.to_string())),
            many => Err(ConfigError::Ambiguous {
                key: key.to_string(),
                candidates: many
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            }),
        }
    }

    /// Applies a `key=value` override. Values are read as TOML, falling back to a bare string.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(kv.to_string()))?;
        let (key, raw) = (key.trim(), raw.trim());
        if key.is_empty() {
            return Err(ConfigError::BadOverride(kv.to_string()));
        }
        let path = self.resolve_key(key)?;
        self.set(&path, parse_value(raw), Source::Override)
    }

    pub fn build(self) -> Result<ExperimentConfig> {
        let mut table = self.table;
        let run = table.remove("run").expect("run section present");
        let run: RunSettings = deserialize(run, "run.")?;
        let train: TrainConfig = deserialize(Value::Table(table), "")?;
        train.validate()?;
        Ok(ExperimentConfig {
            train,
            run,
            provenance: self.provenance,
        })
    }
}

fn deserialize<T: for<'de> Deserialize<'de>>(v: Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| ConfigError::InvalidValue {
        path: format!("{prefix}{}", e.path()),
        message: e.inner().to_string(),
    })
}

fn collect_leaves(t: &Table, prefix: &str, out: &mut BTreeMap<String, Source>) {
    for (k, v) in t {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(sub) => collect_leaves(sub, &path, out),
            _ => {
                out.insert(path, Source::Default);
            }
        }
    }
}

/// Reads an override value as TOML (`0.3`, `inf`, `[1, 2]`, `"x"`), else as a bare string.
pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Checks `new` against the type of the value it replaces. Integers widen to floats, and
/// the strings `inf`, `-inf` and `nan` are accepted where a float is expected.
fn coerce(path: &str, base: &Value, new: Value) -> Result<Value> {
    let mismatch = |new: &Value| ConfigError::TypeMismatch {
        path: path.to_string(),
        expected: base.type_str(),
        found: new.type_str(),
    };
    match (base, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Float(_), Value::String(s)) => match s.as_str() {
            "inf" | "+inf" => Ok(Value::Float(f64::INFINITY)),
            "-inf" => Ok(Value::Float(f64::NEG_INFINITY)),
            "nan" => Ok(Value::Float(f64::NAN)),
            _ => Err(mismatch(&Value::String(s))),
        },
        (Value::Table(_), new) | (_, new @ Value::Table(_)) => Err(mismatch(&new)),
        (b, new) if b.same_type(&new) => Ok(new),
        (_, new) => Err(mismatch(&new)),
    }
}

/// Resolves a configuration from a scenario preset, an optional file and overrides.
pub fn parse_config(
    preset: &[(&str, Value)],
    file: Option<&Path>,
    overrides: &[String],
) -> Result<ExperimentConfig> {
    let mut b = ConfigBuilder::new();
    for (k, v) in preset {
        b.set(k, v.clone(), Source::Preset)?;
    }
    if let Some(path) = file {
        b.apply_file(path)?;
    }
    for kv in overrides {
        b.apply_override(kv)?;
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use cpgd_core::Algorithm;

    #[test]
    fn empty_config_is_all_defaults() {
        let mut b = ConfigBuilder::new();
        b.apply_str("", "empty", Source::File).unwrap();
        let cfg = b.build().unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.run, RunSettings::default());
        assert!(cfg.provenance.values().all(|&s| s == Source::Default));
        assert!(cfg.provenance.contains_key("optimizer.learning_rate"));
        assert!(cfg.provenance.contains_key("run.seeds"));
    }

    #[test]
    fn override_wins_and_is_recorded() {
        let cfg = parse_config(
            &[("optimizer.learning_rate", Value::Float(0.1))],
            None,
            &["learning_rate=0.3".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.train.optimizer.learning_rate, 0.3);
        assert_eq!(cfg.provenance["optimizer.learning_rate"], Source::Override);
        assert_eq!(cfg.provenance["batch_size"], Source::Default);
    }

    #[test]
    fn file_layer_sits_between_preset_and_override() {
        let mut b = ConfigBuilder::new();
        b.set("batch_size", Value::Integer(4), Source::Preset)
            .unwrap();
        b.set("group_size", Value::Integer(4), Source::Preset)
            .unwrap();
        b.apply_str(
            "batch_size = 8\n[loss]\nalgorithm = \"grpo\"\nepsilon = inf\n",
            "f",
            Source::File,
        )
        .unwrap();
        b.apply_override("loss.alpha=1").unwrap();
        let cfg = b.build().unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.group_size, 4);
        assert_eq!(cfg.train.loss.algorithm, Algorithm::Grpo);
        assert!(cfg.train.loss.epsilon.is_infinite());
        assert_eq!(cfg.train.loss.alpha, 1.0);
        assert_eq!(cfg.provenance["batch_size"], Source::File);
        assert_eq!(cfg.provenance["group_size"], Source::Preset);
        assert_eq!(cfg.provenance["loss.alpha"], Source::Override);
    }

    #[test]
    fn misspelled_keys_are_rejected_by_name() {
        let err = ConfigBuilder::new()
            .apply_str("learningrate = 0.1", "f", Source::File)
            .unwrap_err();
        assert!(
            matches!(&err, ConfigError::UnknownKey(k) if k == "learningrate"),
            "{err}"
        );
        let err = ConfigBuilder::new()
            .apply_str("[optimizer]\nlearning_rat = 0.1", "f", Source::File)
            .unwrap_err();
        assert!(err.to_string().contains("optimizer.learning_rat"), "{err}");
        let err = ConfigBuilder::new()
            .apply_override("nosuchkey=1")
            .unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(_)));
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = ConfigBuilder::new()
            .apply_str("batch_size = \"many\"", "f", Source::File)
            .unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        let err = ConfigBuilder::new()
            .apply_str("task = 3", "f", Source::File)
            .unwrap_err();
        assert!(matches!(err, ConfigError::TypeMismatch { .. }));
        let mut b = ConfigBuilder::new();
        b.apply_override("algorithm=cpgdd").unwrap();
        let err = b.build().unwrap_err();
        assert!(err.to_string().contains("loss.algorithm"), "{err}");
    }

    #[test]
    fn ambiguous_short_keys_need_a_path() {
        let err = ConfigBuilder::new()
            .apply_override("kind=adam")
            .unwrap_err();
        assert!(matches!(err, ConfigError::Ambiguous { .. }), "{err}");
        let mut b = ConfigBuilder::new();
        b.apply_override("optimizer.kind=adam").unwrap();
        assert_eq!(b.build().unwrap().train.optimizer.kind.to_string(), "adam");
    }

    #[test]
    fn validation_errors_surface() {
        let mut b = ConfigBuilder::new();
        b.apply_override("group_size=1").unwrap();
        assert!(matches!(b.build(), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            ConfigBuilder::new().apply_override("novalue"),
            Err(ConfigError::BadOverride(_))
        ));
    }

    #[test]
    fn resolved_toml_round_trips() {
        let cfg = parse_config(
            &[],
            None,
            &[
                "loss.epsilon=inf".into(),
                "algorithm=reinforce++".into(),
                "run.seeds=[3, 4]".into(),
                "weighting=clip-filter".into(),
            ],
        )
        .unwrap();
        let text = cfg.to_toml();
        let mut b = ConfigBuilder::new();
        b.apply_str(&text, "echo", Source::File).unwrap();
        let again = b.build().unwrap();
        assert_eq!(again.train, cfg.train);
        assert_eq!(again.run, cfg.run);
        assert_eq!(cfg.seeds(), vec![3, 4]);
        let json = cfg.to_json();
        assert_eq!(json["loss"]["epsilon"], "inf");
        assert_eq!(json["loss"]["algorithm"], "reinforce++");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = parse_config(&[], Some(Path::new("/nonexistent/cfg.toml")), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
    }
}
