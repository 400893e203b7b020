//! Splits a point cloud into occupied fixed-size blocks and codes the block
//! positions as a breadth-first octree of occupancy bytes.
//!
//! Each octree node is one byte whose bit `i` marks child octant
//! `i = z·4 + y·2 + x` as occupied. Leaves sit at depth `n - block_bits`
//! and are the occupied blocks. Blocks themselves are listed in raster
//! order of their block coordinates.

use std::collections::BTreeMap;

use crate::blocks::VoxelBlock;
use crate::error::{Error, Result};
use crate::pc_io::PointCloud;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HighLevelOctree {
    precision_bits: u8,
    block_bits: u8,
    nodes: Vec<u8>,
}

fn morton(c: [u32; 3], depth: u32) -> u128 {
    let mut code = 0u128;
    for level in (0..depth).rev() {
        let octant =
            ((c[2] >> level) & 1) << 2 | ((c[1] >> level) & 1) << 1 | ((c[0] >> level) & 1);
        code = code << 3 | octant as u128;
    }
    code
}

fn unmorton(code: u128, depth: u32) -> [u32; 3] {
    let mut c = [0u32; 3];
    for level in 0..depth {
        let octant = (code >> (3 * level)) as u32 & 7;
        c[0] |= (octant & 1) << level;
        c[1] |= ((octant >> 1) & 1) << level;
        c[2] |= ((octant >> 2) & 1) << level;
    }
    c
}

impl HighLevelOctree {
    /// Builds the octree over block coordinates `(x, y, z)`.
    pub fn from_leaves(precision_bits: u8, block_bits: u8, leaves: &[[u32; 3]]) -> Result<Self> {
        let depth = precision_bits.saturating_sub(block_bits) as u32;
        if leaves.is_empty() {
            return Err(Error::EmptyPointCloud);
        }
        if let Some(bad) = leaves
            .iter()
            .flatten()
            .find(|&&c| depth < 32 && c >> depth != 0)
        {
            return Err(Error::OctreeBlockMismatch(format!(
                "block coordinate {bad} outside grid"
            )));
        }
        let mut codes: Vec<u128> = leaves.iter().map(|&c| morton(c, depth)).collect();
        codes.sort_unstable();
        codes.dedup();
        let mut nodes = Vec::new();
        for level in 0..depth {
            // Morton order of prefixes is breadth-first order within a level.
            let shift = 3 * (depth - level - 1);
            let mut last: Option<u128> = None;
            for &code in &codes {
                let child = code >> shift;
                let parent = child >> 3;
                if last.is_some_and(|p| p >> 3 == parent) {
                    *nodes.last_mut().expect("node exists") |= 1 << (child & 7);
                } else {
                    nodes.push(1 << (child & 7));
                }
                last = Some(child);
            }
        }
        Ok(Self {
            precision_bits,
            block_bits,
            nodes,
        })
    }

    pub fn precision_bits(&self) -> u8 {
        self.precision_bits
    }

    pub fn block_bits(&self) -> u8 {
        self.block_bits
    }

    /// Number of octree levels above the blocks.
    pub fn depth(&self) -> u32 {
        self.precision_bits.saturating_sub(self.block_bits) as u32
    }

    pub fn nodes(&self) -> &[u8] {
        &self.nodes
    }

    /// Occupied block coordinates `(x, y, z)` in raster order.
    pub fn leaf_coords(&self) -> Vec<[u32; 3]> {
        let depth = self.depth();
        let mut codes: Vec<u128> = vec![0];
        let mut pos = 0;
        for _ in 0..depth {
            let mut next = Vec::new();
            for &code in &codes {
                let byte = self.nodes[pos];
                pos += 1;
                for i in 0..8 {
                    if byte >> i & 1 == 1 {
                        next.push(code << 3 | i as u128);
                    }
                }
            }
            codes = next;
        }
        let mut coords: Vec<[u32; 3]> = codes.into_iter().map(|c| unmorton(c, depth)).collect();
        coords.sort_unstable_by_key(|c| (c[2], c[1], c[0]));
        coords
    }

    pub fn leaf_count(&self) -> usize {
        if self.depth() == 0 {
            return 1;
        }
        let last_level_start = self.nodes.len() - self.last_level_nodes();
        self.nodes[last_level_start..]
            .iter()
            .map(|b| b.count_ones() as usize)
            .sum()
    }

    fn last_level_nodes(&self) -> usize {
        let mut width = 1usize;
        let mut pos = 0;
        for _ in 1..self.depth() {
            let next = self.nodes[pos..pos + width]
                .iter()
                .map(|b| b.count_ones() as usize)
                .sum();
            pos += width;
            width = next;
        }
        width
    }
}

/// Occupied blocks of edge `2^block_bits`, in raster order of block
/// coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSet {
    pub edge: usize,
    pub blocks: Vec<VoxelBlock>,
}

/// Splits a non-empty cloud into its octree and blocks. Clouds with
/// `precision_bits <= block_bits` give a zero-depth octree and one block
/// holding the whole grid, zero-padded.
pub fn partition(pc: &PointCloud, block_bits: u8) -> Result<(HighLevelOctree, BlockSet)> {
    if pc.is_empty() {
        return Err(Error::EmptyPointCloud);
    }
    let edge = 1usize << block_bits;
    let mask = edge as u32 - 1;
    let mut blocks: BTreeMap<[u32; 3], VoxelBlock> = BTreeMap::new();
    for p in pc.points() {
        // Keyed (z, y, x) so iteration is raster order.
        let key = [p[2] >> block_bits, p[1] >> block_bits, p[0] >> block_bits];
        let block = match blocks.entry(key) {
            std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::btree_map::Entry::Vacant(e) => e.insert(VoxelBlock::new(edge)?),
        };
        block.set(
            (p[2] & mask) as usize,
            (p[1] & mask) as usize,
            (p[0] & mask) as usize,
            true,
        );
    }
    let leaves: Vec<[u32; 3]> = blocks.keys().map(|k| [k[2], k[1], k[0]]).collect();
    let octree = HighLevelOctree::from_leaves(pc.precision_bits(), block_bits, &leaves)?;
    Ok((
        octree,
        BlockSet {
            edge,
            blocks: blocks.into_values().collect(),
        },
    ))
}

/// Inverse of [`partition`].
pub fn reassemble(octree: &HighLevelOctree, blocks: &BlockSet) -> Result<PointCloud> {
    let leaves = octree.leaf_coords();
    if leaves.len() != blocks.blocks.len() {
        return Err(Error::OctreeBlockMismatch(format!(
            "{} leaves but {} blocks",
            leaves.len(),
            blocks.blocks.len()
        )));
    }
    let edge = 1usize << octree.block_bits();
    let limit = 1u64 << octree.precision_bits();
    let mut points = Vec::new();
    for (leaf, block) in leaves.iter().zip(&blocks.blocks) {
        if block.dims() != [edge; 3] {
            return Err(Error::OctreeBlockMismatch(format!(
                "block dims {:?}, expected edge {edge}",
                block.dims()
            )));
        }
        for [z, y, x] in block.occupied_voxels() {
            let p = [
                (leaf[0] as u64) * edge as u64 + x as u64,
                (leaf[1] as u64) * edge as u64 + y as u64,
                (leaf[2] as u64) * edge as u64 + z as u64,
            ];
            if p.iter().any(|&c| c >= limit) {
                return Err(Error::OctreeBlockMismatch("voxel outside the grid".into()));
            }
            points.push(p.map(|c| c as u32));
        }
    }
    PointCloud::new(octree.precision_bits(), points)
}

pub fn serialize_octree(octree: &HighLevelOctree) -> Vec<u8> {
    octree.nodes.clone()
}

/// Reads an octree from the front of `bytes`; returns it with the number of
/// bytes consumed. The encoding is self-delimiting given the depth.
pub fn deserialize_octree(
    bytes: &[u8],
    precision_bits: u8,
    block_bits: u8,
) -> Result<(HighLevelOctree, usize)> {
    let depth = precision_bits.saturating_sub(block_bits) as u32;
    let mut width = 1usize;
    let mut pos = 0usize;
    for level in 0..depth {
        let end = pos.checked_add(width).ok_or(Error::TruncatedOctree)?;
        let level_bytes = bytes.get(pos..end).ok_or(Error::TruncatedOctree)?;
        if let Some(i) = level_bytes.iter().position(|&b| b == 0) {
            return Err(Error::EmptyOctreeNode(pos + i));
        }
        pos = end;
        if level + 1 < depth {
            width = level_bytes.iter().map(|b| b.count_ones() as usize).sum();
        }
    }
    let octree = HighLevelOctree {
        precision_bits,
        block_bits,
        nodes: bytes[..pos].to_vec(),
    };
    Ok((octree, pos))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn morton_round_trip() {
        for c in [[0, 0, 0], [1, 2, 3], [7, 0, 5], [1023, 511, 3]] {
            assert_eq!(unmorton(morton(c, 10), 10), c);
        }
    }

    #[test]
    fn two_blocks_in_opposite_corners() {
        // n = 7 with 64-voxel blocks: a depth-1 octree whose root marks
        // octants 0 and 7.
        let pc = PointCloud::new(7, [[0, 0, 0], [127, 127, 127]]).unwrap();
        let (oct, set) = partition(&pc, 6).unwrap();
        assert_eq!(oct.nodes(), &[0b1000_0001]);
        assert_eq!(set.blocks.len(), 2);
        assert!(set.blocks[0].get(0, 0, 0));
        assert!(set.blocks[1].get(63, 63, 63));
        assert_eq!(reassemble(&oct, &set).unwrap(), pc);
    }

    #[test]
    fn small_cloud_fits_one_padded_block() {
        let pc = PointCloud::new(3, [[1, 2, 7]]).unwrap();
        let (oct, set) = partition(&pc, 6).unwrap();
        assert!(oct.nodes().is_empty());
        assert_eq!(oct.leaf_count(), 1);
        assert_eq!(set.blocks.len(), 1);
        assert_eq!(set.blocks[0].edge(), 64);
        assert!(set.blocks[0].get(7, 2, 1));
        assert_eq!(reassemble(&oct, &set).unwrap(), pc);
    }

    #[test]
    fn octant_bit_numbering() {
        // Block (x=1, y=0, z=0) is octant 1; (x=0, y=0, z=1) is octant 4.
        let oct = HighLevelOctree::from_leaves(2, 1, &[[1, 0, 0], [0, 0, 1]]).unwrap();
        assert_eq!(oct.nodes(), &[0b0001_0010]);
        assert_eq!(oct.leaf_coords(), vec![[1, 0, 0], [0, 0, 1]]);
    }

    #[test]
    fn deserialize_errors() {
        let oct = HighLevelOctree::from_leaves(9, 6, &[[0, 0, 0], [7, 7, 7], [3, 4, 5]]).unwrap();
        let bytes = serialize_octree(&oct);
        let (back, used) = deserialize_octree(&bytes, 9, 6).unwrap();
        assert_eq!((back, used), (oct, bytes.len()));
        assert!(matches!(
            deserialize_octree(&bytes[..bytes.len() - 1], 9, 6),
            Err(Error::TruncatedOctree)
        ));
        let mut zeroed = bytes.clone();
        zeroed[1] = 0;
        assert!(matches!(
            deserialize_octree(&zeroed, 9, 6),
            Err(Error::EmptyOctreeNode(1))
        ));
    }

    #[test]
    fn block_count_mismatch_is_rejected() {
        let pc = PointCloud::new(7, [[0, 0, 0], [127, 127, 127]]).unwrap();
        let (oct, mut set) = partition(&pc, 6).unwrap();
        set.blocks.pop();
        assert!(matches!(
            reassemble(&oct, &set),
            Err(Error::OctreeBlockMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn partition_round_trip(
            pts in prop::collection::vec(prop::array::uniform3(0u32..512), 1..200),
            block_bits in 2u8..7,
        ) {
            let pc = PointCloud::new(9, pts).unwrap();
            let (oct, set) = partition(&pc, block_bits).unwrap();
            prop_assert!(set.blocks.iter().all(|b| b.occupied() > 0));
            prop_assert_eq!(oct.leaf_count(), set.blocks.len());
            let bytes = serialize_octree(&oct);
            let mut padded = bytes.clone();
            padded.extend_from_slice(&[0xAB, 0xCD]);
            let (back, used) = deserialize_octree(&padded, 9, block_bits).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&back, &oct);
            prop_assert_eq!(reassemble(&back, &set).unwrap(), pc);
        }
    }
}
