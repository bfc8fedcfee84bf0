//! Flat key-value configuration files. Keys are exactly the
//! `PipelineConfig` field names; `#` starts a comment; unknown or
//! repeated keys are errors so typos surface instead of silently using
//! defaults.

use std::collections::HashSet;
use std::path::Path;

use dtea_core::gating::EntropySign;
use dtea_core::pipeline::{PipelineConfig, Precision};

use crate::error::{CliError, CliResult};

pub const CONFIG_KEYS: [&str; 17] = [
    "H", "W", "C1", "C2", "C3", "C4", "Cs", "k", "d", "epsilon", "alpha", "beta", "mu", "K",
    "entropy_sign", "seed", "precision",
];

pub fn load_config(path: &Path) -> CliResult<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|m| CliError::Config(format!("{}: {m}", path.display())))
}

/// Parse `key = value` lines over the defaults. Every key optional.
pub fn parse_config(text: &str) -> Result<PipelineConfig, String> {
    let mut cfg = PipelineConfig::default();
    let mut seen: HashSet<&str> = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value, got {line:?}", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let canonical = CONFIG_KEYS
            .iter()
            .find(|&&k| k == key)
            .ok_or_else(|| format!("line {}: unknown key {key:?}", lineno + 1))?;
        if !seen.insert(canonical) {
            return Err(format!("line {}: key {key:?} given twice", lineno + 1));
        }
        apply(&mut cfg, key, value).map_err(|m| format!("line {}: {m}", lineno + 1))?;
    }
    Ok(cfg)
}

fn apply(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<(), String> {
    let count = |v: &str| -> Result<usize, String> {
        v.parse::<usize>()
            .map_err(|_| format!("{key} expects an unsigned integer, got {v:?}"))
    };
    let real = |v: &str| -> Result<f64, String> {
        v.parse::<f64>()
            .map_err(|_| format!("{key} expects a number, got {v:?}"))
    };
    match key {
        "H" => cfg.h = count(value)?,
        "W" => cfg.w = count(value)?,
        "C1" => cfg.c1 = count(value)?,
        "C2" => cfg.c2 = count(value)?,
        "C3" => cfg.c3 = count(value)?,
        "C4" => cfg.c4 = count(value)?,
        "Cs" => cfg.cs = count(value)?,
        "k" => cfg.k = count(value)?,
        "d" => cfg.d = count(value)?,
        "K" => cfg.select_k = count(value)?,
        "epsilon" => cfg.epsilon = real(value)?,
        "alpha" => cfg.alpha = real(value)?,
        "beta" => cfg.beta = real(value)?,
        "mu" => cfg.mu = real(value)?,
        "seed" => {
            cfg.seed = value
                .parse::<u64>()
                .map_err(|_| format!("seed expects a 64-bit unsigned integer, got {value:?}"))?
        }
        "entropy_sign" => {
            cfg.entropy_sign = match value {
                "literal" => EntropySign::Literal,
                "conventional" => EntropySign::Conventional,
                other => {
                    return Err(format!(
                        "entropy_sign must be literal or conventional, got {other:?}"
                    ))
                }
            }
        }
        "precision" => {
            cfg.precision = match value {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(format!("precision must be f32 or f64, got {other:?}")),
            }
        }
        other => unreachable!("key {other} already screened"),
    }
    Ok(())
}
