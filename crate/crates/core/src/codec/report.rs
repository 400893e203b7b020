//! Rate accounting and network-evaluation counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::models::CodecConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalKey {
    /// One teacher-forced pass of the base model over a whole base block.
    BaseFull,
    /// One single-voxel step of the base model while decoding.
    BaseStep,
    /// One group-predictor pass; `scale` counts levels above the base.
    Group { scale: usize, group: u8 },
}

impl EvalKey {
    pub fn label(&self) -> String {
        match self {
            EvalKey::BaseFull => "base_full".into(),
            EvalKey::BaseStep => "base_step".into(),
            EvalKey::Group { scale, group } => format!("scale{scale}.group{group}"),
        }
    }
}

/// Counts of model forward passes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalCounter {
    counts: BTreeMap<EvalKey, u64>,
}

impl EvalCounter {
    pub fn add(&mut self, key: EvalKey) {
        *self.counts.entry(key).or_insert(0) += 1;
    }

    pub fn get(&self, key: EvalKey) -> u64 {
        self.counts.get(&key).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn group_total(&self) -> u64 {
        self.counts
            .iter()
            .filter(|(k, _)| matches!(k, EvalKey::Group { .. }))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EvalKey, u64)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }

    pub fn merge(&mut self, other: &EvalCounter) {
        for (k, v) in other.iter() {
            *self.counts.entry(k).or_insert(0) += v;
        }
    }
}

/// Forward passes needed to decode one block: one step per base voxel and
/// one pass per group per scale.
pub fn decode_evals_per_block(codec: &CodecConfig) -> u64 {
    codec.base_edge.pow(3) as u64 + 8 * codec.num_scales as u64
}

/// Forward passes a purely voxel-by-voxel decoder would need per block.
pub fn per_voxel_evals_per_block(codec: &CodecConfig) -> u64 {
    codec.block_edge().pow(3) as u64
}

/// Bit accounting of one coded cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RateReport {
    pub blocks: usize,
    pub occupied_voxels: u64,
    /// Fixed container fields (and, for the static baseline, per-block
    /// probabilities).
    pub header_bits: u64,
    pub octree_bits: u64,
    /// Payload segment size, including zero padding to a byte boundary.
    pub payload_bits: u64,
    /// Bits the arithmetic coder emitted before padding.
    pub coded_bits: u64,
    pub symbols: u64,
    /// Sum of `-log2 p` over the coded symbols under the quantized
    /// probabilities.
    pub cross_entropy_bits: f64,
    /// Part of `cross_entropy_bits` spent on the base level.
    pub base_bits: f64,
    /// Part of `cross_entropy_bits` spent on each finer level.
    pub scale_bits: Vec<f64>,
    pub evals: EvalCounter,
    pub prune_empty_parents: bool,
}

impl RateReport {
    pub fn total_bits(&self) -> u64 {
        self.header_bits + self.octree_bits + self.payload_bits
    }

    pub fn bpov(&self) -> f64 {
        self.total_bits() as f64 / self.occupied_voxels.max(1) as f64
    }

    pub fn octree_fraction(&self) -> f64 {
        self.octree_bits as f64 / self.total_bits().max(1) as f64
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("blocks", self.blocks.to_string());
        kv("occupied_voxels", self.occupied_voxels.to_string());
        kv("header_bits", self.header_bits.to_string());
        kv("octree_bits", self.octree_bits.to_string());
        kv("payload_bits", self.payload_bits.to_string());
        kv("coded_bits", self.coded_bits.to_string());
        kv("total_bits", self.total_bits().to_string());
        kv("bpov", format!("{:.6}", self.bpov()));
        kv("octree_fraction", format!("{:.6}", self.octree_fraction()));
        kv("symbols", self.symbols.to_string());
        kv(
            "cross_entropy_bits",
            format!("{:.3}", self.cross_entropy_bits),
        );
        kv("base_bits", format!("{:.3}", self.base_bits));
        for (i, b) in self.scale_bits.iter().enumerate() {
            kv(&format!("scale{}_bits", i + 1), format!("{b:.3}"));
        }
        kv("prune_empty_parents", self.prune_empty_parents.to_string());
        kv("evals.total", self.evals.total().to_string());
        for (k, v) in self.evals.iter() {
            kv(&format!("evals.{}", k.label()), v.to_string());
        }
        out
    }

    pub fn to_table(&self) -> String {
        let total = self.total_bits().max(1) as f64;
        let mut out = String::new();
        let _ = writeln!(out, "{:<16}{:>14}{:>9}", "segment", "bits", "share");
        for (name, bits) in [
            ("header", self.header_bits),
            ("octree", self.octree_bits),
            ("payload", self.payload_bits),
            ("total", self.total_bits()),
        ] {
            let _ = writeln!(
                out,
                "{name:<16}{bits:>14}{:>8.2}%",
                100.0 * bits as f64 / total
            );
        }
        let _ = writeln!(out, "{:<16}{:>14.1}", "  base (ideal)", self.base_bits);
        for (i, b) in self.scale_bits.iter().enumerate() {
            let _ = writeln!(out, "{:<16}{b:>14.1}", format!("  scale {} (ideal)", i + 1));
        }
        let _ = writeln!(
            out,
            "{} blocks, {} occupied voxels, {:.4} bpov, {} forward passes",
            self.blocks,
            self.occupied_voxels,
            self.bpov(),
            self.evals.total()
        );
        out
    }
}
