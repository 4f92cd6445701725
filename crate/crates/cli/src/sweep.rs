//! Cartesian expansion of a base config over seeds and `[strategy]` values.

use std::path::PathBuf;

use anyhow::{bail, Context};

use crate::config::RunConfig;

/// One `key=v1,v2,...` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<toml::Value>,
}

pub fn parse_axis(spec: &str) -> anyhow::Result<Axis> {
    let Some((key, values)) = spec.split_once('=') else {
        bail!("sweep axis {spec:?} must look like key=v1,v2");
    };
    let key = key.trim().to_string();
    let values = values
        .split(',')
        .map(|v| {
            let doc: toml::Table = toml::from_str(&format!("v = {}", v.trim()))
                .with_context(|| format!("value {v:?} of {key}"))?;
            Ok(doc["v"].clone())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    if key.is_empty() || values.is_empty() {
        bail!("sweep axis {spec:?} is empty");
    }
    Ok(Axis { key, values })
}

/// Every combination of the axes applied to `base`, each with its own
/// output directory below `base`'s.
pub fn expand(base: &RunConfig, axes: &[Axis]) -> anyhow::Result<Vec<(String, RunConfig)>> {
    let root = base.output_dir().join("sweep");
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|combo| {
            let mut cfg = base.clone();
            let mut name = Vec::new();
            for (k, v) in &combo {
                cfg.strategy.insert(k.clone(), v.clone());
                name.push(format!("{k}={v}"));
            }
            let name = if name.is_empty() { "base".to_string() } else { name.join(",") };
            cfg.output_dir = Some(root.join(sanitize(&name)));
            cfg.validate()?;
            Ok((name, cfg))
        })
        .collect()
}

fn sanitize(name: &str) -> PathBuf {
    PathBuf::from(
        name.chars()
            .map(|c| if c.is_ascii_alphanumeric() || "=.,_-".contains(c) { c } else { '_' })
            .collect::<String>(),
    )
}
