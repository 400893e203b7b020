//! Block and point-cloud coding: the per-block probability schedule, the
//! container format and rate accounting.
//!
//! Per block the schedule is: every base-level voxel in raster order, then
//! for each finer level the eight corner groups in order, each group's
//! voxels in raster order of the group volume. One arithmetic-coded stream
//! covers all blocks of a cloud, in octree leaf order.

mod baseline;
mod bitstream;
mod report;

pub use baseline::static_baseline_encode;
pub use bitstream::{
    Bitstream, BitstreamHeader, BITSTREAM_MAGIC, BITSTREAM_VERSION, FLAG_PRUNE_EMPTY_PARENTS,
    HEADER_BYTES,
};
pub use report::{
    decode_evals_per_block, per_voxel_evals_per_block, EvalCounter, EvalKey, RateReport,
};

use crate::blocks::{
    build_pyramid, extract_group, group_offset, scatter_group, GroupVolume, VoxelBlock,
};
use crate::entropy::{ArithmeticDecoder, ArithmeticEncoder, Prob16};
use crate::error::{Error, Result};
use crate::models::{group_context, ModelBundle};
use crate::octree::{deserialize_octree, partition, reassemble, serialize_octree, BlockSet};
use crate::pc_io::PointCloud;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CodecOptions {
    /// Skip voxels whose parent in the next coarser level is empty; they
    /// are known to be empty.
    pub prune_empty_parents: bool,
    /// Keep every quantized probability in coding order.
    pub record_schedule: bool,
}

/// Bookkeeping shared by the encoder and decoder while walking the
/// schedule.
#[derive(Clone, Debug, Default)]
pub struct ScheduleStats {
    pub evals: EvalCounter,
    pub symbols: u64,
    pub base_bits: f64,
    pub scale_bits: Vec<f64>,
    pub trace: Option<Vec<Prob16>>,
}

impl ScheduleStats {
    pub fn new(num_scales: usize, record: bool) -> Self {
        Self {
            scale_bits: vec![0.0; num_scales],
            trace: record.then(Vec::new),
            ..Self::default()
        }
    }

    fn record(&mut self, level: usize, bit: bool, p: Prob16) {
        let cost = p.cost_bits(bit);
        if level == 0 {
            self.base_bits += cost;
        } else {
            self.scale_bits[level - 1] += cost;
        }
        self.symbols += 1;
        if let Some(t) = &mut self.trace {
            t.push(p);
        }
    }

    pub fn cross_entropy_bits(&self) -> f64 {
        self.base_bits + self.scale_bits.iter().sum::<f64>()
    }
}

fn quantize(p: f32) -> Prob16 {
    Prob16::from_prob(p as f64)
}

fn check_block(block: &VoxelBlock, bundle: &ModelBundle) -> Result<()> {
    let edge = bundle.codec.block_edge();
    if block.dims() != [edge; 3] {
        return Err(Error::ShapeMismatch(format!(
            "bundle codes {edge}³ blocks, got {:?}",
            block.dims()
        )));
    }
    Ok(())
}

/// Appends the symbols of one block to `enc`.
pub fn encode_block(
    block: &VoxelBlock,
    bundle: &ModelBundle,
    enc: &mut ArithmeticEncoder,
    opts: &CodecOptions,
    stats: &mut ScheduleStats,
) -> Result<()> {
    check_block(block, bundle)?;
    let pyr = build_pyramid(block, bundle.codec.num_scales)?;
    let base = &pyr.levels()[0];
    let probs = bundle.base().forward_full(base)?;
    stats.evals.add(EvalKey::BaseFull);
    for (i, &p) in probs.iter().enumerate() {
        let (bit, q) = (base.get_index(i), quantize(p));
        enc.encode(bit, q);
        stats.record(0, bit, q);
    }
    for scale in 1..=bundle.codec.num_scales {
        let level = &pyr.levels()[scale];
        let lower = &pyr.levels()[scale - 1];
        let groups = (1..=8)
            .map(|g| extract_group(level, g))
            .collect::<Result<Vec<_>>>()?;
        for g in 1..=8u8 {
            let ctx = group_context(lower, &groups, g)?;
            let probs = bundle.group(scale, g)?.predict(&ctx)?;
            stats.evals.add(EvalKey::Group { scale, group: g });
            for (v, (&bit, &p)) in groups[g as usize - 1].bits.iter().zip(&probs).enumerate() {
                if opts.prune_empty_parents && !lower.get_index(v) {
                    continue;
                }
                let q = quantize(p);
                enc.encode(bit != 0, q);
                stats.record(scale, bit != 0, q);
            }
        }
    }
    Ok(())
}

/// Reads the symbols of one block from `dec`, mirroring [`encode_block`].
pub fn decode_block(
    dec: &mut ArithmeticDecoder<'_>,
    bundle: &ModelBundle,
    opts: &CodecOptions,
    stats: &mut ScheduleStats,
) -> Result<VoxelBlock> {
    let codec = bundle.codec;
    let mut lower = VoxelBlock::new(codec.base_edge)?;
    let mut stepper = bundle.base().stepper();
    for i in 0..lower.len() {
        let q = quantize(stepper.predict_next()?);
        stats.evals.add(EvalKey::BaseStep);
        let bit = dec.decode(q)?;
        stats.record(0, bit, q);
        stepper.push(bit)?;
        lower.set_index(i, bit);
    }
    for scale in 1..=codec.num_scales {
        let mut level = VoxelBlock::new(codec.scale_edge(scale))?;
        let mut groups: Vec<GroupVolume> = Vec::with_capacity(8);
        for g in 1..=8u8 {
            let ctx = group_context(&lower, &groups, g)?;
            let probs = bundle.group(scale, g)?.predict(&ctx)?;
            stats.evals.add(EvalKey::Group { scale, group: g });
            let mut bits = Vec::with_capacity(probs.len());
            for (v, &p) in probs.iter().enumerate() {
                if opts.prune_empty_parents && !lower.get_index(v) {
                    bits.push(0);
                    continue;
                }
                let q = quantize(p);
                let bit = dec.decode(q)?;
                stats.record(scale, bit, q);
                bits.push(bit as u8);
            }
            let gv = GroupVolume {
                group: g,
                parent_dims: level.dims(),
                offset: group_offset(g)?,
                bits,
            };
            scatter_group(&gv, &mut level)?;
            groups.push(gv);
        }
        lower = level;
    }
    Ok(lower)
}

/// A coded cloud with its accounting.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub report: RateReport,
    /// Quantized probabilities in coding order, when requested.
    pub schedule: Option<Vec<Prob16>>,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub cloud: PointCloud,
    pub report: RateReport,
    pub schedule: Option<Vec<Prob16>>,
}

fn header_byte(v: usize, what: &str) -> Result<u8> {
    u8::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} does not fit a byte")))
}

fn build_report(
    stream: &Bitstream,
    coded_bits: u64,
    blocks: usize,
    occupied: u64,
    stats: ScheduleStats,
) -> (RateReport, Option<Vec<Prob16>>) {
    let report = RateReport {
        blocks,
        occupied_voxels: occupied,
        header_bits: 8 * HEADER_BYTES as u64,
        octree_bits: 8 * stream.octree.len() as u64,
        payload_bits: 8 * stream.payload.len() as u64,
        coded_bits,
        symbols: stats.symbols,
        cross_entropy_bits: stats.cross_entropy_bits(),
        base_bits: stats.base_bits,
        scale_bits: stats.scale_bits,
        evals: stats.evals,
        prune_empty_parents: stream.header.prune_empty_parents(),
    };
    (report, stats.trace)
}

pub fn encode_pc(pc: &PointCloud, bundle: &ModelBundle, opts: &CodecOptions) -> Result<Encoded> {
    let codec = bundle.codec;
    let (octree, set) = partition(pc, codec.block_bits())?;
    let mut stats = ScheduleStats::new(codec.num_scales, opts.record_schedule);
    let mut enc = ArithmeticEncoder::new();
    for block in &set.blocks {
        encode_block(block, bundle, &mut enc, opts, &mut stats)?;
    }
    let coded = enc.finish();
    let stream = Bitstream {
        header: BitstreamHeader {
            version: BITSTREAM_VERSION,
            flags: if opts.prune_empty_parents {
                FLAG_PRUNE_EMPTY_PARENTS
            } else {
                0
            },
            precision_bits: pc.precision_bits(),
            base_edge: header_byte(codec.base_edge, "base edge")?,
            num_scales: header_byte(codec.num_scales, "scale count")?,
            fingerprint: bundle.fingerprint(),
        },
        octree: serialize_octree(&octree),
        payload: coded.bytes,
    };
    let (report, schedule) = build_report(
        &stream,
        coded.bits,
        set.blocks.len(),
        pc.len() as u64,
        stats,
    );
    Ok(Encoded {
        bytes: stream.to_bytes(),
        report,
        schedule,
    })
}

/// Decodes a container written by [`encode_pc`]. Only `record_schedule` of
/// `opts` is used; the pruning mode comes from the header.
pub fn decode_pc(bytes: &[u8], bundle: &ModelBundle, opts: &CodecOptions) -> Result<Decoded> {
    let stream = Bitstream::from_bytes(bytes)?;
    let h = stream.header;
    let found = bundle.fingerprint();
    if h.fingerprint != found {
        return Err(Error::FingerprintMismatch {
            expected: h.fingerprint,
            found,
        });
    }
    let codec = bundle.codec;
    if h.base_edge as usize != codec.base_edge || h.num_scales as usize != codec.num_scales {
        return Err(Error::InvalidBitstream(format!(
            "stream uses base edge {} with {} scales, bundle has {} with {}",
            h.base_edge, h.num_scales, codec.base_edge, codec.num_scales
        )));
    }
    let (octree, used) = deserialize_octree(&stream.octree, h.precision_bits, codec.block_bits())?;
    if used != stream.octree.len() {
        return Err(Error::InvalidBitstream(
            "octree segment has trailing bytes".into(),
        ));
    }
    let opts = CodecOptions {
        prune_empty_parents: h.prune_empty_parents(),
        record_schedule: opts.record_schedule,
    };
    let mut stats = ScheduleStats::new(codec.num_scales, opts.record_schedule);
    let mut dec = ArithmeticDecoder::new(&stream.payload)?;
    let leaves = octree.leaf_count();
    let mut blocks = Vec::with_capacity(leaves);
    for _ in 0..leaves {
        blocks.push(decode_block(&mut dec, bundle, &opts, &mut stats)?);
    }
    let set = BlockSet {
        edge: codec.block_edge(),
        blocks,
    };
    let cloud = reassemble(&octree, &set)?;
    // The coder's unpadded length is not stored; report the segment size.
    let coded_bits = 8 * stream.payload.len() as u64;
    let (report, schedule) = build_report(&stream, coded_bits, leaves, cloud.len() as u64, stats);
    Ok(Decoded {
        cloud,
        report,
        schedule,
    })
}
