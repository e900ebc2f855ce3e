//! Experiment configuration: a TOML file with one table per field group,
//! overridable key by key from the command line (`--partition.m 3`).
//!
//! ```toml
//! experiment = "overlap_sweep"
//! output_dir = "out"
//!
//! [problem]
//! name = "linearized_two_state"
//! xi = 4.0
//! horizon = 5.0
//! theta = 3.0
//! alpha = 100.0
//! n_diag = [1.0, 0.25]
//! x0 = [0.0, 0.0]
//!
//! [grid]
//! dt_reference = 1e-3
//! dt_subproblem = 1e-3
//!
//! [partition]
//! m = 3
//! overlaps = [0.01, 0.05, 0.1, 0.2, 0.3, 0.6]
//!
//! [gd]
//! eta = 1e-2
//! grad_tol = 1e-6
//! max_iters = 20000
//! seed = 1
//!
//! [integrators]
//! list = ["FE"]
//! adaptive_tol = 1e-6
//!
//! [schwarz]
//! max_outer = 20
//! stop_tol = 1e-8
//! parallel = true
//! cold_start = false
//!
//! [constants]
//! sigma = 1.0
//! ```
//!
//! Missing keys take the defaults of the chosen experiment.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use schwarz_core::experiments::{Experiment, ExperimentConfig};
use schwarz_core::ode::Method;
use toml::{Table, Value};

/// Parses an override value: bool, integer, float, comma separated list, or
/// a bare string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if raw.contains(',') {
        return Value::Array(raw.split(',').filter(|s| !s.trim().is_empty()).map(parse_value).collect());
    }
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::Float(f);
    }
    Value::String(raw.to_string())
}

/// Applies `(dotted.key, value)` pairs on top of `table`.
pub fn apply_overrides(table: &mut Table, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let parts: Vec<&str> = key.split('.').collect();
        let value = parse_value(raw);
        match parts.as_slice() {
            [k] => {
                table.insert(k.to_string(), value);
            }
            [section, k] => {
                let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
                let sub = entry.as_table_mut().ok_or_else(|| anyhow!("'{}' is not a section", section))?;
                sub.insert(k.to_string(), value);
            }
            _ => bail!("override key '{}' must be 'key' or 'section.key'", key),
        }
    }
    Ok(())
}

/// Splits trailing `--section.key value` (or `--section.key=value`) arguments.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").ok_or_else(|| anyhow!("unexpected argument '{}'", a))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| anyhow!("override --{} needs a value", key))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

fn float(v: &Value, key: &str) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => bail!("{} must be a number", key),
    }
}

fn uint(v: &Value, key: &str) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => bail!("{} must be a non-negative integer", key),
    }
}

fn floats(v: &Value, key: &str) -> Result<Vec<f64>> {
    match v {
        Value::Array(a) => a.iter().map(|x| float(x, key)).collect(),
        other => Ok(vec![float(other, key)?]),
    }
}

fn pair(v: &Value, key: &str) -> Result<(f64, f64)> {
    match floats(v, key)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => bail!("{} must have two entries", key),
    }
}

fn string(v: &Value, key: &str) -> Result<String> {
    v.as_str().map(str::to_string).ok_or_else(|| anyhow!("{} must be a string", key))
}

fn strings(v: &Value, key: &str) -> Result<Vec<String>> {
    match v {
        Value::Array(a) => a.iter().map(|x| string(x, key)).collect(),
        other => Ok(vec![string(other, key)?]),
    }
}

/// Resolved configuration plus output location.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub output_dir: Option<PathBuf>,
}

/// Builds the experiment configuration from a parsed table.
///
/// `experiment` (when given) wins over the table's own `experiment` key.
pub fn resolve(table: &Table, experiment: Option<&str>) -> Result<Resolved> {
    let name = match experiment {
        Some(e) => e.to_string(),
        None => string(table.get("experiment").ok_or_else(|| anyhow!("no experiment given"))?, "experiment")?,
    };
    let exp: Experiment = name.parse()?;
    let mut c = ExperimentConfig::preset(exp);
    let mut output_dir = None;
    for (key, value) in table {
        match (key.as_str(), value) {
            ("experiment", _) => {}
            ("output_dir", v) => output_dir = Some(PathBuf::from(string(v, "output_dir")?)),
            (section, Value::Table(t)) => {
                for (k, v) in t {
                    let full = format!("{}.{}", section, k);
                    apply_key(&mut c, section, k, v).with_context(|| format!("in {}", full))?;
                }
            }
            (other, _) => bail!("unknown top-level key '{}'", other),
        }
    }
    Ok(Resolved { config: c, output_dir })
}

fn apply_key(c: &mut ExperimentConfig, section: &str, k: &str, v: &Value) -> Result<()> {
    match (section, k) {
        ("problem", "name") => c.problem = string(v, k)?,
        ("problem", "xi") => c.params.xi = float(v, k)?,
        ("problem", "horizon" | "T") => c.params.horizon = float(v, k)?,
        ("problem", "theta") => c.params.theta = float(v, k)?,
        ("problem", "alpha") => c.params.alpha = float(v, k)?,
        ("problem", "n_diag") => c.params.n_diag = pair(v, k)?,
        ("problem", "x0") => c.params.x0 = pair(v, k)?,
        ("grid", "dt_reference") => c.dt_reference = float(v, k)?,
        ("grid", "dt_subproblem") => c.dt_subproblem = float(v, k)?,
        ("partition", "m") => c.m = uint(v, k)? as usize,
        ("partition", "overlaps") => c.overlaps = floats(v, k)?,
        ("gd", "eta") => c.eta = float(v, k)?,
        ("gd", "grad_tol") => c.grad_tol = float(v, k)?,
        ("gd", "max_iters") => c.max_iters = uint(v, k)? as usize,
        ("gd", "seed") => c.seed = uint(v, k)?,
        ("integrators", "list") => {
            c.integrators = strings(v, k)?.iter().map(|s| s.parse::<Method>()).collect::<Result<_, _>>()?
        }
        ("integrators", "adaptive_tol") => c.adaptive_tol = float(v, k)?,
        ("schwarz", "max_outer") => c.max_outer = uint(v, k)? as usize,
        ("schwarz", "stop_tol") => c.stop_tol = float(v, k)?,
        ("schwarz", "parallel") => c.parallel = v.as_bool().ok_or_else(|| anyhow!("parallel must be a boolean"))?,
        ("schwarz", "cold_start") => c.cold_start = v.as_bool().ok_or_else(|| anyhow!("cold_start must be a boolean"))?,
        ("constants", "sigma") => c.sigma = float(v, k)?,
        _ => bail!("unknown key"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("1e-3"), Value::Float(1e-3));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("FE,BE"), Value::Array(vec![Value::String("FE".into()), Value::String("BE".into())]));
        assert_eq!(parse_value("0.1,"), Value::Array(vec![Value::Float(0.1)]));
    }

    #[test]
    fn overrides_win() {
        let mut t: Table = toml::from_str("experiment = \"overlap_sweep\"\n[partition]\nm = 4\n").unwrap();
        let args: Vec<String> = ["--partition.m", "5", "--grid.dt_subproblem=0.01", "--integrators.list", "RK4"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        apply_overrides(&mut t, &parse_override_args(&args).unwrap()).unwrap();
        let r = resolve(&t, None).unwrap();
        assert_eq!(r.config.m, 5);
        assert_eq!(r.config.dt_subproblem, 0.01);
        assert_eq!(r.config.integrators, vec![Method::Rk4]);
        // untouched keys keep the preset
        assert_eq!(r.config.overlaps.len(), 6);
    }

    #[test]
    fn errors_name_the_key() {
        let t: Table = toml::from_str("experiment = \"overlap_sweep\"\n[gd]\nstep = 1\n").unwrap();
        let err = format!("{:#}", resolve(&t, None).unwrap_err());
        assert!(err.contains("gd.step"), "{}", err);
        let t: Table = toml::from_str("experiment = \"bogus\"").unwrap();
        assert!(format!("{:#}", resolve(&t, None).unwrap_err()).contains("overlap_sweep"));
        assert!(parse_override_args(&["--gd.eta".to_string()]).is_err());
        assert!(parse_override_args(&["eta".to_string()]).is_err());
    }

    #[test]
    fn flag_beats_file() {
        let t: Table = toml::from_str("experiment = \"overlap_sweep\"").unwrap();
        let r = resolve(&t, Some("stiff_compare")).unwrap();
        assert_eq!(r.config.experiment, Experiment::StiffCompare);
        assert_eq!(r.config.params.xi, 15.0);
    }
}
