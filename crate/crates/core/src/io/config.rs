//! Line-oriented `key = value` model config files.

use crate::error::{Error, Result};
use crate::net::SmallDepthConfig;

fn parse_list(v: &str, n: usize, key: &str) -> Result<Vec<usize>> {
    let xs: Vec<usize> = v
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected {n} integers, got `{v}`")))?;
    if xs.len() != n {
        return Err(Error::Config(format!("{key}: expected {n} entries, got {}", xs.len())));
    }
    Ok(xs)
}

fn parse_rate(v: &str, key: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{key}: bad number `{v}`")))
}

/// Parse a config file body. Unknown keys are rejected; missing keys keep
/// their defaults.
pub fn parse_config(text: &str) -> Result<SmallDepthConfig> {
    let mut cfg = SmallDepthConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key = value", lineno + 1)));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "widths" => {
                let xs = parse_list(value, 5, key)?;
                cfg.widths = [xs[0], xs[1], xs[2], xs[3], xs[4]];
            }
            "blocks" => {
                let xs = parse_list(value, 4, key)?;
                cfg.blocks = [xs[0], xs[1], xs[2], xs[3]];
            }
            "expansion" => {
                let xs = parse_list(value, 4, key)?;
                cfg.expansion = [xs[0], xs[1], xs[2], xs[3]];
            }
            "groups" => {
                if value != "depthwise" {
                    return Err(Error::Config(format!(
                        "groups: only the depthwise policy is implemented, got `{value}`"
                    )));
                }
            }
            "etm" => {
                cfg.etm = match value {
                    "on" | "true" | "1" => true,
                    "off" | "false" | "0" => false,
                    other => return Err(Error::Config(format!("etm: bad flag `{other}`"))),
                };
            }
            "pb_dsr" => cfg.pb_dsr = parse_rate(value, key)?,
            "pb_sd" => cfg.pb_sd = parse_rate(value, key)?,
            "pb_t" => cfg.pb_t = parse_rate(value, key)?,
            "r1" => cfg.r1 = parse_rate(value, key)?,
            "r2" => cfg.r2 = parse_rate(value, key)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<SmallDepthConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

pub fn render_config(cfg: &SmallDepthConfig) -> String {
    format!(
        "widths = {}\nblocks = {}\nexpansion = {}\ngroups = depthwise\netm = {}\npb_dsr = {}\npb_sd = {}\npb_t = {}\nr1 = {}\nr2 = {}\n",
        cfg.widths.map(|v| v.to_string()).join(","),
        cfg.blocks.map(|v| v.to_string()).join(","),
        cfg.expansion.map(|v| v.to_string()).join(","),
        if cfg.etm { "on" } else { "off" },
        cfg.pb_dsr,
        cfg.pb_sd,
        cfg.pb_t,
        cfg.r1,
        cfg.r2,
    )
}
