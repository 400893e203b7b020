//! Reference coder: each block's full-resolution voxels coded with a single
//! per-block occupancy probability.

use crate::entropy::{ArithmeticEncoder, Prob16};
use crate::error::Result;
use crate::octree::{partition, serialize_octree};
use crate::pc_io::PointCloud;

use super::{RateReport, HEADER_BYTES};

/// Bits of the per-block probability stored in the baseline's header.
const PROB_BITS: u64 = 16;

/// Codes every voxel of every occupied `2^block_bits` block with the
/// block's empirical occupancy probability. The reported size counts a
/// container header, the octree, one 16-bit probability per block and the
/// arithmetic-coded payload.
pub fn static_baseline_encode(pc: &PointCloud, block_bits: u8) -> Result<RateReport> {
    let (octree, set) = partition(pc, block_bits)?;
    let mut enc = ArithmeticEncoder::new();
    let mut report = RateReport::default();
    for block in &set.blocks {
        let q = Prob16::from_prob(block.occupancy_fraction());
        for &b in block.bits() {
            enc.encode(b != 0, q);
            report.cross_entropy_bits += q.cost_bits(b != 0);
        }
        report.symbols += block.len() as u64;
    }
    let coded = enc.finish();
    report.blocks = set.blocks.len();
    report.occupied_voxels = pc.len() as u64;
    report.header_bits = 8 * HEADER_BYTES as u64 + PROB_BITS * set.blocks.len() as u64;
    report.octree_bits = 8 * serialize_octree(&octree).len() as u64;
    report.payload_bits = 8 * coded.bytes.len() as u64;
    report.coded_bits = coded.bits;
    report.base_bits = report.cross_entropy_bits;
    Ok(report)
}
