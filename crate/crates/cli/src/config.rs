//! Training settings resolved from defaults, an optional `key=value` file
//! and command-line flags, in that order of precedence.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use msvox_core::models::{parse_kv, ArchConfig, CodecConfig, TrainConfig};

/// Keys accepted in a config file besides `arch.*`.
const KEYS: &[&str] = &[
    "preset",
    "base_edge",
    "num_scales",
    "lr",
    "epochs",
    "batch_full",
    "batch_other",
    "seed",
    "max_samples",
    "prior_bias",
];

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub base_edge: Option<usize>,
    pub num_scales: Option<usize>,
    pub lr: Option<f32>,
    pub epochs: Option<usize>,
    pub batch_full: Option<usize>,
    pub batch_other: Option<usize>,
    pub seed: Option<u64>,
    pub max_samples: Option<usize>,
    pub prior_bias: bool,
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub arch: ArchConfig,
    pub codec: CodecConfig,
    pub train: TrainConfig,
}

fn get<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| {
            v.parse()
                .ok()
                .with_context(|| format!("config key {key}: bad value {v:?}"))
        })
        .transpose()
}

/// `default_lr` applies when neither the file nor the flags set one.
pub fn resolve(file: Option<&Path>, flags: &Overrides, default_lr: f32) -> Result<Resolved> {
    let map = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            parse_kv(&text)?
        }
        None => BTreeMap::new(),
    };
    for k in map.keys() {
        if !k.starts_with("arch.") && !KEYS.contains(&k.as_str()) {
            bail!("unknown config key {k}");
        }
    }

    let preset = flags
        .preset
        .clone()
        .or_else(|| map.get("preset").cloned())
        .unwrap_or_else(|| "desk".into());
    let mut arch = ArchConfig::preset(&preset)?;
    arch.apply_kv(&map)?;

    let mut codec = CodecConfig::default();
    codec.apply_kv(&map)?;
    codec.base_edge = flags.base_edge.unwrap_or(codec.base_edge);
    codec.num_scales = flags.num_scales.unwrap_or(codec.num_scales);
    codec.validate()?;

    let mut train = TrainConfig {
        lr: default_lr,
        ..TrainConfig::default()
    };
    train.lr = flags.lr.or(get(&map, "lr")?).unwrap_or(train.lr);
    train.epochs = flags
        .epochs
        .or(get(&map, "epochs")?)
        .unwrap_or(train.epochs);
    train.batch_full = flags
        .batch_full
        .or(get(&map, "batch_full")?)
        .unwrap_or(train.batch_full);
    train.batch_other = flags
        .batch_other
        .or(get(&map, "batch_other")?)
        .unwrap_or(train.batch_other);
    train.seed = flags.seed.or(get(&map, "seed")?).unwrap_or(train.seed);
    train.max_samples = flags.max_samples.or(get(&map, "max_samples")?);
    train.prior_bias = flags.prior_bias || get(&map, "prior_bias")?.unwrap_or(false);
    train.validate()?;
    Ok(Resolved { arch, codec, train })
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "lr=0.01\nepochs=3\nnum_scales=2\narch.trunk_blocks=1\n# comment"
        )
        .unwrap();
        let flags = Overrides {
            epochs: Some(5),
            ..Overrides::default()
        };
        let r = resolve(Some(f.path()), &flags, 1e-5).unwrap();
        assert_eq!(r.train.lr, 0.01);
        assert_eq!(r.train.epochs, 5);
        assert_eq!(r.train.batch_full, 32);
        assert_eq!(r.codec.num_scales, 2);
        assert_eq!(r.arch.trunk_blocks, 1);
    }

    #[test]
    fn defaults_follow_training_setup() {
        let r = resolve(None, &Overrides::default(), 1e-5).unwrap();
        assert_eq!(r.train, TrainConfig::default());
        assert_eq!(r.codec, CodecConfig::default());
        assert_eq!(r.arch, ArchConfig::desk());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "learning_rate=0.1").unwrap();
        assert!(resolve(Some(f.path()), &Overrides::default(), 1e-5).is_err());
    }
}
