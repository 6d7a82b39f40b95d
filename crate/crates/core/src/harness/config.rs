use std::path::{Path, PathBuf};

use super::experiment::{ExperimentKind, ExperimentSpec};
use crate::error::{Error, Result};
use crate::optimize::{PriorScaleMode, RankOneUpdate};
use crate::vi::Structure;

/// Every run option, each optional so that defaults, a config file and
/// command-line flags can be layered.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub experiment: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub r: Option<Vec<usize>>,
    pub structure: Option<Vec<Structure>>,
    pub temperature: Option<Vec<f64>>,
    pub replicates: Option<usize>,
    pub eb: Option<bool>,
    pub eb_mode: Option<PriorScaleMode>,
    pub rank1_update: Option<RankOneUpdate>,
    pub epsilon: Option<f64>,
    pub lr_grid: Option<Vec<f64>>,
    pub max_iters: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Keys accepted by [`Settings::set`]; `-` and `_` are interchangeable.
pub const KEYS: [&str; 14] = [
    "experiment",
    "seed",
    "n",
    "r",
    "structure",
    "temperature",
    "replicates",
    "eb",
    "eb_mode",
    "rank1_update",
    "epsilon",
    "lr_grid",
    "max_iters",
    "out",
];

fn config_err(key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("`{key}`: cannot parse `{value}` as {what}"))
}

fn scalar<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err(key, value, what))
}

fn list<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(config_err(key, value, what));
    }
    items.into_iter().map(|s| scalar(key, s, what)).collect()
}

impl Settings {
    /// Sets one option from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "experiment" => self.experiment = Some(v.parse()?),
            "seed" => self.seed = Some(scalar(&key, v, "an unsigned integer")?),
            "n" => self.n = Some(scalar(&key, v, "a positive integer")?),
            "r" => self.r = Some(list(&key, v, "a list of positive integers")?),
            "structure" => {
                self.structure = Some(if v.eq_ignore_ascii_case("all") {
                    Structure::ALL.to_vec()
                } else {
                    list(&key, v, "diag, rank1, full or all")?
                })
            }
            "temperature" => self.temperature = Some(list(&key, v, "a list of numbers")?),
            "replicates" => self.replicates = Some(scalar(&key, v, "a positive integer")?),
            "eb" => {
                self.eb = Some(match v.to_ascii_lowercase().as_str() {
                    "on" | "true" | "1" | "yes" => true,
                    "off" | "false" | "0" | "no" => false,
                    _ => return Err(config_err(&key, v, "on or off")),
                })
            }
            "eb_mode" => {
                self.eb_mode = Some(match v.to_ascii_lowercase().as_str() {
                    "closed" => PriorScaleMode::Closed,
                    "grad" => PriorScaleMode::Grad,
                    _ => return Err(config_err(&key, v, "closed or grad")),
                })
            }
            "rank1_update" => {
                self.rank1_update = Some(match v.to_ascii_lowercase().as_str() {
                    "closed" => RankOneUpdate::Closed,
                    "adam" => RankOneUpdate::Adam,
                    _ => return Err(config_err(&key, v, "closed or adam")),
                })
            }
            "epsilon" => self.epsilon = Some(scalar(&key, v, "a number")?),
            "lr_grid" => self.lr_grid = Some(list(&key, v, "a list of numbers")?),
            "max_iters" => self.max_iters = Some(scalar(&key, v, "a positive integer")?),
            "out" => self.out = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file (`#` comments) or a JSON object.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(text)?;
            let obj = value
                .as_object()
                .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
            for (k, v) in obj {
                s.set(k, &json_scalar(k, v)?)?;
            }
        } else {
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("line {}: expected key = value", i + 1))
                })?;
                s.set(k, v)?;
            }
        }
        Ok(s)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Options set in `over` replace those in `self`.
    pub fn merge(self, over: Settings) -> Settings {
        Settings {
            experiment: over.experiment.or(self.experiment),
            seed: over.seed.or(self.seed),
            n: over.n.or(self.n),
            r: over.r.or(self.r),
            structure: over.structure.or(self.structure),
            temperature: over.temperature.or(self.temperature),
            replicates: over.replicates.or(self.replicates),
            eb: over.eb.or(self.eb),
            eb_mode: over.eb_mode.or(self.eb_mode),
            rank1_update: over.rank1_update.or(self.rank1_update),
            epsilon: over.epsilon.or(self.epsilon),
            lr_grid: over.lr_grid.or(self.lr_grid),
            max_iters: over.max_iters.or(self.max_iters),
            out: over.out.or(self.out),
        }
    }

    /// Applies the options on top of the defaults of `kind`.
    pub fn to_spec(&self, kind: ExperimentKind) -> Result<ExperimentSpec> {
        let d = ExperimentSpec::defaults(kind);
        let spec = ExperimentSpec {
            kind,
            seed: self.seed.unwrap_or(d.seed),
            n: self.n.unwrap_or(d.n),
            features: self.r.clone().unwrap_or(d.features),
            structures: self.structure.clone().unwrap_or(d.structures),
            temperatures: self.temperature.clone().unwrap_or(d.temperatures),
            replicates: self.replicates.unwrap_or(d.replicates),
            empirical_bayes: self.eb.map(Some).unwrap_or(d.empirical_bayes),
            eb_mode: self.eb_mode.unwrap_or(d.eb_mode),
            rank1_update: self.rank1_update.unwrap_or(d.rank1_update),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            lr_grid: self.lr_grid.clone().unwrap_or(d.lr_grid),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            out: self.out.clone().unwrap_or(d.out),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn json_scalar(key: &str, v: &serde_json::Value) -> Result<String> {
    use serde_json::Value;
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|i| json_scalar(key, i))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => return Err(Error::Config(format!("`{key}`: unsupported JSON value"))),
    })
}
