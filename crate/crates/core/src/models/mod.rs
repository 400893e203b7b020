//! Learned context models: the causal base-scale network, the per-scale
//! group predictors, their training loop and the bundle file format.

mod base;
mod bundle;
mod group;
mod train;

pub use base::{base_forward_step, BaseStepper, BaseVoxelDnn};
pub use bundle::{load_bundle, save_bundle, ModelBundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use group::{group_context, GroupPredictor};
pub use train::{train, LossCurve, TrainConfig};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Conv3d, ResBlock, Tensor};

/// Layer sizes for the base network and the group predictors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub base_features: usize,
    pub base_hidden: usize,
    pub base_kernel: usize,
    pub base_blocks: usize,
    pub group_features: usize,
    pub group_hidden: usize,
    pub stem_kernel: usize,
    pub trunk_blocks: usize,
    pub head_kernel: usize,
    pub head_blocks: usize,
    /// Patches per axis for the shared per-patch head.
    pub patches: usize,
}

impl ArchConfig {
    /// Full-size layout: 32 features, 7³ entry convolutions, four trunk
    /// residual blocks.
    pub fn paper() -> Self {
        Self {
            base_features: 32,
            base_hidden: 16,
            base_kernel: 7,
            base_blocks: 2,
            group_features: 32,
            group_hidden: 16,
            stem_kernel: 7,
            trunk_blocks: 4,
            head_kernel: 5,
            head_blocks: 1,
            patches: 2,
        }
    }

    /// Narrow layout that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            base_features: 16,
            base_hidden: 8,
            base_kernel: 7,
            base_blocks: 2,
            group_features: 8,
            group_hidden: 4,
            stem_kernel: 3,
            trunk_blocks: 2,
            head_kernel: 3,
            head_blocks: 1,
            patches: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::InvalidConfig(format!("unknown preset {other}"))),
        }
    }

    fn fields(&self) -> [(&'static str, usize); 11] {
        [
            ("base_features", self.base_features),
            ("base_hidden", self.base_hidden),
            ("base_kernel", self.base_kernel),
            ("base_blocks", self.base_blocks),
            ("group_features", self.group_features),
            ("group_hidden", self.group_hidden),
            ("stem_kernel", self.stem_kernel),
            ("trunk_blocks", self.trunk_blocks),
            ("head_kernel", self.head_kernel),
            ("head_blocks", self.head_blocks),
            ("patches", self.patches),
        ]
    }

    fn set(&mut self, key: &str, value: usize) -> bool {
        let slot = match key {
            "base_features" => &mut self.base_features,
            "base_hidden" => &mut self.base_hidden,
            "base_kernel" => &mut self.base_kernel,
            "base_blocks" => &mut self.base_blocks,
            "group_features" => &mut self.group_features,
            "group_hidden" => &mut self.group_hidden,
            "stem_kernel" => &mut self.stem_kernel,
            "trunk_blocks" => &mut self.trunk_blocks,
            "head_kernel" => &mut self.head_kernel,
            "head_blocks" => &mut self.head_blocks,
            "patches" => &mut self.patches,
            _ => return false,
        };
        *slot = value;
        true
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in self.fields() {
            if v == 0 && k != "base_blocks" && k != "trunk_blocks" && k != "head_blocks" {
                return Err(Error::InvalidConfig(format!("{k} must be positive")));
            }
        }
        for (k, v) in [
            ("base_kernel", self.base_kernel),
            ("stem_kernel", self.stem_kernel),
            ("head_kernel", self.head_kernel),
        ] {
            if v % 2 == 0 {
                return Err(Error::InvalidConfig(format!("{k} must be odd, got {v}")));
            }
        }
        Ok(())
    }
}

/// Block geometry shared by encoder, decoder and trainer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub base_edge: usize,
    pub num_scales: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            base_edge: 8,
            num_scales: 3,
        }
    }
}

impl CodecConfig {
    pub fn new(base_edge: usize, num_scales: usize) -> Result<Self> {
        let cfg = Self {
            base_edge,
            num_scales,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.base_edge >= 2
            && self.base_edge.is_power_of_two()
            && self.num_scales >= 1
            && self.num_scales <= 5
            && self.block_edge() <= crate::blocks::MAX_EDGE;
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "base edge {} with {} scales",
                self.base_edge, self.num_scales
            )));
        }
        Ok(())
    }

    pub fn block_edge(&self) -> usize {
        self.base_edge << self.num_scales
    }

    pub fn block_bits(&self) -> u8 {
        self.block_edge().trailing_zeros() as u8
    }

    /// Edge of pyramid level `scale` (0 is the base).
    pub fn scale_edge(&self, scale: usize) -> usize {
        self.base_edge << scale
    }
}

/// Parses `key=value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse_usize(map: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>> {
    map.get(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: not a count: {v:?}")))
        })
        .transpose()
}

impl ArchConfig {
    /// Overrides fields from `arch.<field>` entries.
    pub fn apply_kv(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in map {
            if let Some(field) = k.strip_prefix("arch.") {
                let value = v
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("{k}: not a count: {v:?}")))?;
                if !self.set(field, value) {
                    return Err(Error::InvalidConfig(format!("unknown key {k}")));
                }
            }
        }
        self.validate()
    }

    pub fn to_kv(&self) -> String {
        self.fields()
            .iter()
            .map(|(k, v)| format!("arch.{k}={v}\n"))
            .collect()
    }
}

impl CodecConfig {
    pub fn apply_kv(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        if let Some(v) = parse_usize(map, "base_edge")? {
            self.base_edge = v;
        }
        if let Some(v) = parse_usize(map, "num_scales")? {
            self.num_scales = v;
        }
        self.validate()
    }
}

/// A network viewed as a flat list of named convolutions, in the order
/// their parameters are bound on a tape.
pub(crate) trait LayerStack {
    fn convs(&self) -> Vec<(String, &Conv3d)>;
    fn convs_mut(&mut self) -> Vec<&mut Conv3d>;

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs_mut()
            .into_iter()
            .flat_map(|c| {
                let [w, b] = c.params_mut();
                [w, b]
            })
            .collect()
    }

    fn param_count(&self) -> usize {
        self.convs()
            .iter()
            .map(|(_, c)| c.weight.len() + c.bias.len())
            .sum()
    }
}

pub(crate) fn push_res<'a>(out: &mut Vec<(String, &'a Conv3d)>, prefix: &str, r: &'a ResBlock) {
    out.push((format!("{prefix}.reduce"), &r.reduce));
    out.push((format!("{prefix}.spatial"), &r.spatial));
    out.push((format!("{prefix}.expand"), &r.expand));
}

pub(crate) fn push_res_mut<'a>(out: &mut Vec<&'a mut Conv3d>, r: &'a mut ResBlock) {
    out.push(&mut r.reduce);
    out.push(&mut r.spatial);
    out.push(&mut r.expand);
}
