//! Scenario overrides from `--set key=value` and from config files.
//!
//! A config file is TOML with an optional top-level `scenario` and the
//! sections `[run]`, `[gains]`, `[scalar]` and `[initial]`:
//!
//! ```toml
//! scenario = "wing-rock-theorem1"
//!
//! [run]
//! horizon_s = 15.0
//! step_s = 1e-4
//!
//! [gains]
//! k = [1.0, 1.0]
//! lambda_per_s = 0.6
//! gamma = 0.001
//!
//! [initial]
//! x = [-1.0, 2.5]
//! ```

use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use expstab::nussbaum::NussbaumSpec;
use expstab::sim::Scenario;
use nalgebra::DMatrix;
use toml::Value;

/// Keys accepted in each config section.
const SECTIONS: [(&str, &[&str]); 4] = [
    (
        "run",
        &["horizon_s", "step_s", "record_stride", "local_tolerance", "divergence_bound"],
    ),
    (
        "gains",
        &[
            "k",
            "lambda_per_s",
            "delta_theta",
            "gamma",
            "gamma_rho",
            "epsilon_psi",
            "quadrature_nodes",
            "residual_tolerance",
            "nussbaum",
            "xi_max",
            "sign_b",
        ],
    ),
    ("scalar", &["k", "lambda_per_s", "gamma_a", "delta_a", "nussbaum", "xi_max"]),
    ("initial", &["x", "theta_hat", "rho_hat", "xi"]),
];

/// An override that failed validation.
#[derive(Debug)]
pub struct InvalidSetting(pub String);

impl fmt::Display for InvalidSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidSetting {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidSetting(msg.into()).into()
}

/// Parsed config file.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub scenario: Option<String>,
    pub settings: Vec<(String, Value)>,
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_config(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid(e.to_string()))?;
    let mut cfg = ConfigFile::default();
    for (key, value) in table {
        if key == "scenario" {
            let name = value.as_str().ok_or_else(|| invalid("scenario must be a string"))?;
            cfg.scenario = Some(name.to_string());
            continue;
        }
        let allowed = SECTIONS
            .iter()
            .find(|(s, _)| *s == key)
            .map(|(_, keys)| *keys)
            .ok_or_else(|| invalid(format!("unknown config section [{key}]")))?;
        let Value::Table(section) = value else {
            return Err(invalid(format!("[{key}] must be a table")));
        };
        for (k, v) in section {
            if !allowed.contains(&k.as_str()) {
                return Err(invalid(format!("unknown key {k} in [{key}]")));
            }
            let name = if key == "scalar" && k != "nussbaum" && k != "xi_max" {
                format!("scalar.{k}")
            } else {
                k
            };
            cfg.settings.push((name, v));
        }
    }
    Ok(cfg)
}

/// Splits `key=value`; the value is read as a TOML value, falling back to a
/// bare string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| invalid(format!("expected key=value, got {s:?}")))?;
    let v = v.trim();
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn number(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(invalid(format!("{key} must be a number, got {v}"))),
    }
}

fn count(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 1 => Ok(*i as usize),
        _ => Err(invalid(format!("{key} must be a positive integer, got {v}"))),
    }
}

fn numbers(key: &str, v: &Value, len: usize) -> Result<Vec<f64>> {
    let out = match v {
        Value::Array(a) => a.iter().map(|x| number(key, x)).collect::<Result<Vec<_>>>()?,
        other => vec![number(key, other)?],
    };
    if out.len() != len {
        bail!(invalid(format!("{key} needs {len} values, got {}", out.len())));
    }
    Ok(out)
}

/// `name_<i>` with a 1-based index.
fn indexed(key: &str, name: &str) -> Option<Result<usize>> {
    let rest = key.strip_prefix(name)?.strip_prefix('_')?;
    Some(
        rest.parse::<usize>()
            .ok()
            .filter(|i| *i >= 1)
            .ok_or_else(|| invalid(format!("bad index in {key}"))),
    )
}

fn set_component(key: &str, target: &mut [f64], i: usize, v: &Value) -> Result<()> {
    let len = target.len();
    let slot = target
        .get_mut(i - 1)
        .ok_or_else(|| invalid(format!("{key}: index {i} exceeds {len}")))?;
    *slot = number(key, v)?;
    Ok(())
}

fn canonical(key: &str) -> &str {
    match key {
        "lambda" => "lambda_per_s",
        "horizon" => "horizon_s",
        "step" => "step_s",
        "x0" => "x",
        "theta_hat0" => "theta_hat",
        "rho_hat0" => "rho_hat",
        "xi0" => "xi",
        other => other,
    }
}

/// Applies one override. Scalar scenarios route `k` and `lambda_per_s` to
/// their own gains.
pub fn apply(s: &mut Scenario, key: &str, v: &Value) -> Result<()> {
    let key = canonical(key);
    let (n, q) = (s.model.n(), s.model.q());
    let scalar = s.controller.scalar_design().is_some();
    let key = match key.strip_prefix("scalar.") {
        Some(k) => canonical(k),
        None => key,
    };
    if scalar {
        let g = &mut s.scalar_gains;
        match key {
            "k" => return number(key, v).map(|x| g.k = x),
            "lambda_per_s" => return number(key, v).map(|x| g.lambda = x),
            "gamma_a" => return number(key, v).map(|x| g.gamma_a = x),
            "delta_a" => return number(key, v).map(|x| g.delta_a = x),
            "nussbaum" => {
                let name = v.as_str().ok_or_else(|| invalid("nussbaum must be a name"))?;
                let xi_max = g.nussbaum.xi_max;
                g.nussbaum = NussbaumSpec::from_name(name)
                    .map_err(|e| invalid(e.to_string()))?
                    .with_xi_max(xi_max);
                return Ok(());
            }
            "xi_max" => return number(key, v).map(|x| g.nussbaum.xi_max = x),
            _ => {}
        }
    }
    let g = &mut s.gains;
    match key {
        "horizon_s" => s.horizon = number(key, v)?,
        "step_s" => s.step = number(key, v)?,
        "record_stride" => s.record_stride = count(key, v)?,
        "local_tolerance" => s.local_tolerance = Some(number(key, v)?),
        "divergence_bound" => s.divergence_bound = number(key, v)?,
        "k" => g.k = numbers(key, v, n)?,
        "lambda_per_s" => g.lambda = number(key, v)?,
        "delta_theta" => g.delta_theta = number(key, v)?,
        "gamma_rho" => g.gamma_rho = number(key, v)?,
        "epsilon_psi" => g.epsilon_psi = number(key, v)?,
        "quadrature_nodes" => g.quadrature_nodes = count(key, v)?,
        "residual_tolerance" => g.residual_tolerance = number(key, v)?,
        "sign_b" => g.sign_b = number(key, v)?,
        "xi_max" => g.nussbaum.xi_max = number(key, v)?,
        "nussbaum" => {
            let name = v.as_str().ok_or_else(|| invalid("nussbaum must be a name"))?;
            let xi_max = g.nussbaum.xi_max;
            g.nussbaum = NussbaumSpec::from_name(name)
                .map_err(|e| invalid(e.to_string()))?
                .with_xi_max(xi_max);
        }
        "gamma" => {
            g.gamma = match v {
                Value::Array(rows) => {
                    let flat = rows
                        .iter()
                        .map(|r| numbers(key, r, q))
                        .collect::<Result<Vec<_>>>()?
                        .concat();
                    if flat.len() != q * q {
                        bail!(invalid(format!("gamma needs {q} rows")));
                    }
                    DMatrix::from_row_slice(q, q, &flat)
                }
                other => DMatrix::identity(q, q) * number(key, other)?,
            }
        }
        "x" => s.initial.x = numbers(key, v, n)?,
        "theta_hat" => s.initial.theta_hat = numbers(key, v, q)?,
        "rho_hat" => s.initial.rho_hat = number(key, v)?,
        "xi" => s.initial.xi = number(key, v)?,
        other => {
            if let Some(i) = indexed(other, "k") {
                return set_component(other, &mut g.k, i?, v);
            }
            if let Some(i) = indexed(other, "x") {
                return set_component(other, &mut s.initial.x, i?, v);
            }
            if let Some(i) = indexed(other, "theta_hat") {
                return set_component(other, &mut s.initial.theta_hat, i?, v);
            }
            return Err(invalid(format!("unknown setting {other}")));
        }
    }
    Ok(())
}

/// Applies every override, then validates the scenario.
pub fn apply_all(s: &mut Scenario, settings: &[(String, Value)]) -> Result<()> {
    for (k, v) in settings {
        apply(s, k, v).with_context(|| format!("setting {k}"))?;
    }
    s.validate().map_err(|e| anyhow!(InvalidSetting(e.to_string())))
}
