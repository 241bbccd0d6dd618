//! Run configuration shared by the JSON config file and the command line.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CliError, CliResult};

/// Every field is optional: unset values fall back to the scenario defaults.
/// In a config file, `params` is an object of numbers.
#[derive(Args, Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// JSON config file; command-line flags override its fields.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scenario parameter override, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE", value_parser = parse_param)]
    #[serde(default, serialize_with = "params_out", deserialize_with = "params_in")]
    pub params: Vec<(String, f64)>,
    #[arg(long)]
    pub connection: Option<String>,
    #[arg(long)]
    pub metric: Option<String>,
    /// Base start point of the curve (comma separated).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub b0: Option<Vec<f64>>,
    /// Fiber start point (comma separated).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub y0: Option<Vec<f64>>,
    /// Constant base velocity of the curve.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub velocity: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    pub t0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub t1: Option<f64>,
    /// Fiber start values for `transport`, flattened.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub fibers: Option<Vec<f64>>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub speed: Option<f64>,
    /// `lo,hi` bounds for random fiber starts.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub fiber_window: Option<Vec<f64>>,
    /// Geodesic start point `(b, f)`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub v0: Option<Vec<f64>>,
    /// End point of the straight curve measured by `length`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x1: Option<Vec<f64>>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Sections with labels `|k| ≤ k_range`.
    #[arg(long)]
    pub k_range: Option<i64>,
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub radius: Option<f64>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad value for {k}: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn params_out<S: Serializer>(p: &[(String, f64)], s: S) -> Result<S::Ok, S::Error> {
    s.collect_map(p.iter().map(|(k, v)| (k, v)))
}

fn params_in<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<(String, f64)>, D::Error> {
    let m = std::collections::BTreeMap::<String, f64>::deserialize(d)?;
    Ok(m.into_iter().collect())
}

impl RunConfig {
    pub fn from_json(text: &str, path: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::ConfigParse {
            path: path.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// `self` with every field set in `over` replaced.
    pub fn overlay(mut self, over: RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if over.$f.is_some() { self.$f = over.$f; } )* };
        }
        take!(
            scenario, seed, out, connection, metric, b0, y0, velocity, t0, t1, fibers, rounds, trials, horizon,
            speed, fiber_window, x0, v0, x1, tol, k_range, window, radius
        );
        for (k, v) in over.params {
            self.params.retain(|(q, _)| *q != k);
            self.params.push((k, v));
        }
        self.config = None;
        self
    }

    /// File config (if any) overlaid with the flags themselves.
    pub fn resolve(self) -> CliResult<Self> {
        match &self.config {
            Some(path) => Ok(Self::load(path)?.overlay(self)),
            None => Ok(self),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = RunConfig::from_json("{\n  \"scenario\": \"example1\",\n  \"bogus\": 1\n}", "c.json").unwrap_err();
        match err {
            CliError::ConfigParse { line, column, message, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn params_read_as_object_and_flags_win() {
        let file = RunConfig::from_json(r#"{"seed": 4, "horizon": 3.0, "params": {"k_max": 8, "hill_offset": -8}}"#, "c").unwrap();
        let cli = RunConfig {
            horizon: Some(5.0),
            params: vec![("k_max".into(), 10.0)],
            ..Default::default()
        };
        let merged = file.overlay(cli);
        assert_eq!(merged.seed, Some(4));
        assert_eq!(merged.horizon, Some(5.0));
        assert!(merged.params.contains(&("k_max".to_string(), 10.0)));
        assert!(merged.params.contains(&("hill_offset".to_string(), -8.0)));
        assert_eq!(merged.params.len(), 2);
    }

    #[test]
    fn param_flag_syntax() {
        assert_eq!(parse_param("k_max=8").unwrap(), ("k_max".to_string(), 8.0));
        assert!(parse_param("k_max").is_err());
        assert!(parse_param("k=x").is_err());
    }
}
