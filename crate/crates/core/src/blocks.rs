//! Dense-block geometry: raster indexing, the 2×2×2 max-pool pyramid, the
//! eight corner groups of a block and contiguous patch split/merge of
//! feature maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-based raster index with depth varying slowest and width fastest.
pub fn raster_index(z: usize, y: usize, x: usize, dims: [usize; 3]) -> Result<usize> {
    if z >= dims[0] || y >= dims[1] || x >= dims[2] {
        return Err(Error::IndexOutOfRange { z, y, x, dims });
    }
    Ok((z * dims[1] + y) * dims[2] + x)
}

/// Largest block edge the codec works with.
pub const MAX_EDGE: usize = 64;

fn valid_dim(d: usize) -> bool {
    d.is_power_of_two() && d <= MAX_EDGE
}

/// Binary occupancy grid addressed by `(z, y, x)`. Blocks are cubic in the
/// codec; non-cubic grids are accepted for illustrating group partitions.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct VoxelBlock {
    dims: [usize; 3],
    bits: Vec<u8>,
}

impl std::fmt::Debug for VoxelBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VoxelBlock")
            .field("dims", &self.dims)
            .field("occupied", &self.occupied())
            .finish()
    }
}

impl VoxelBlock {
    /// Empty cubic block; the edge must be a power of two in `2..=64`.
    pub fn new(edge: usize) -> Result<Self> {
        if edge < 2 || !valid_dim(edge) {
            return Err(Error::InvalidEdge(edge));
        }
        Ok(Self::empty([edge; 3]))
    }

    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        if let Some(&bad) = dims.iter().find(|&&d| !valid_dim(d)) {
            return Err(Error::InvalidEdge(bad));
        }
        Ok(Self::empty(dims))
    }

    fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            bits: vec![0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_bits(dims: [usize; 3], bits: Vec<u8>) -> Result<Self> {
        let mut block = Self::with_dims(dims)?;
        if bits.len() != block.bits.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for dims {dims:?}",
                bits.len()
            )));
        }
        block.bits = bits.into_iter().map(|b| (b != 0) as u8).collect();
        Ok(block)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Edge of a cubic block (the depth extent otherwise).
    pub fn edge(&self) -> usize {
        self.dims[0]
    }

    pub fn is_cubic(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.bits[(z * self.dims[1] + y) * self.dims[2] + x] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, occupied: bool) {
        let i = (z * self.dims[1] + y) * self.dims[2] + x;
        self.bits[i] = occupied as u8;
    }

    pub fn get_index(&self, i: usize) -> bool {
        self.bits[i] != 0
    }

    pub fn set_index(&mut self, i: usize, occupied: bool) {
        self.bits[i] = occupied as u8;
    }

    pub fn occupied(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn occupancy_fraction(&self) -> f64 {
        self.occupied() as f64 / self.len() as f64
    }

    /// Occupied voxels as `(z, y, x)` in raster order.
    pub fn occupied_voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [_, h, w] = self.dims;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(move |(i, _)| [i / (h * w), (i / w) % h, i % w])
    }

    /// Single-channel float volume `[D, H, W, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| b as f32).collect();
        Tensor::from_vec(&[self.dims[0], self.dims[1], self.dims[2], 1], data)
            .expect("dims match bit count")
    }
}

/// Output voxel = OR of its 2×2×2 children.
pub fn max_pool_down(b: &VoxelBlock) -> Result<VoxelBlock> {
    let [d, h, w] = b.dims;
    if let Some(&bad) = b.dims.iter().find(|&&v| v < 2 || v % 2 != 0) {
        return Err(Error::InvalidEdge(bad));
    }
    let mut out = VoxelBlock::empty([d / 2, h / 2, w / 2]);
    for (i, _) in b.bits.iter().enumerate().filter(|(_, &v)| v != 0) {
        let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
        out.set(z / 2, y / 2, x / 2, true);
    }
    Ok(out)
}

/// Resolution pyramid of one block, coarsest level first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPyramid {
    levels: Vec<VoxelBlock>,
}

impl BlockPyramid {
    pub fn levels(&self) -> &[VoxelBlock] {
        &self.levels
    }

    pub fn base(&self) -> &VoxelBlock {
        &self.levels[0]
    }

    pub fn full(&self) -> &VoxelBlock {
        self.levels.last().expect("pyramid has at least one level")
    }

    pub fn num_scales(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn into_levels(self) -> Vec<VoxelBlock> {
        self.levels
    }
}

/// Repeated max-pooling: level 0 has edge `edge / 2^num_scales`.
pub fn build_pyramid(b: &VoxelBlock, num_scales: usize) -> Result<BlockPyramid> {
    if !b.is_cubic() {
        return Err(Error::PyramidMismatch("pyramid needs a cubic block".into()));
    }
    let edge = b.edge();
    if num_scales >= usize::BITS as usize
        || edge >> num_scales < 2
        || (edge >> num_scales) << num_scales != edge
    {
        return Err(Error::PyramidMismatch(format!(
            "edge {edge} cannot be pooled {num_scales} times down to a base of at least 2"
        )));
    }
    let mut levels = Vec::with_capacity(num_scales + 1);
    levels.push(b.clone());
    for _ in 0..num_scales {
        let next = max_pool_down(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    levels.reverse();
    Ok(BlockPyramid { levels })
}

/// Corner offset `(dz, dy, dx)` of group `g`, with `g = 1 + 4dz + 2dy + dx`.
pub fn group_offset(g: u8) -> Result<[usize; 3]> {
    if !(1..=8).contains(&g) {
        return Err(Error::InvalidGroup(g));
    }
    let k = (g - 1) as usize;
    Ok([k >> 2, (k >> 1) & 1, k & 1])
}

/// One corner sub-lattice of a block, stored densely at half resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupVolume {
    pub group: u8,
    pub parent_dims: [usize; 3],
    pub offset: [usize; 3],
    pub bits: Vec<u8>,
}

impl GroupVolume {
    pub fn dims(&self) -> [usize; 3] {
        [
            self.parent_dims[0] / 2,
            self.parent_dims[1] / 2,
            self.parent_dims[2] / 2,
        ]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

fn check_even(dims: [usize; 3]) -> Result<()> {
    match dims.iter().find(|&&d| d < 2 || d % 2 != 0) {
        Some(&bad) => Err(Error::InvalidEdge(bad)),
        None => Ok(()),
    }
}

/// `gv(z', y', x') = b(2z' + dz, 2y' + dy, 2x' + dx)`.
pub fn extract_group(b: &VoxelBlock, g: u8) -> Result<GroupVolume> {
    let offset = group_offset(g)?;
    check_even(b.dims)?;
    let [gd, gh, gw] = [b.dims[0] / 2, b.dims[1] / 2, b.dims[2] / 2];
    let mut bits = Vec::with_capacity(gd * gh * gw);
    for z in 0..gd {
        for y in 0..gh {
            for x in 0..gw {
                bits.push(b.get(2 * z + offset[0], 2 * y + offset[1], 2 * x + offset[2]) as u8);
            }
        }
    }
    Ok(GroupVolume {
        group: g,
        parent_dims: b.dims,
        offset,
        bits,
    })
}

/// Writes a group back onto its stride-2 lattice; other voxels are untouched.
pub fn scatter_group(gv: &GroupVolume, b: &mut VoxelBlock) -> Result<()> {
    if gv.parent_dims != b.dims {
        return Err(Error::ShapeMismatch(format!(
            "group of a {:?} block scattered into {:?}",
            gv.parent_dims, b.dims
        )));
    }
    let offset = group_offset(gv.group)?;
    let [gd, gh, gw] = gv.dims();
    if gv.bits.len() != gd * gh * gw {
        return Err(Error::ShapeMismatch("group bit count".into()));
    }
    let mut i = 0;
    for z in 0..gd {
        for y in 0..gh {
            for x in 0..gw {
                b.set(
                    2 * z + offset[0],
                    2 * y + offset[1],
                    2 * x + offset[2],
                    gv.bits[i] != 0,
                );
                i += 1;
            }
        }
    }
    Ok(())
}

fn patch_geometry(
    fm: &Tensor,
    patches: usize,
    index: usize,
) -> Result<([usize; 3], usize, [usize; 3])> {
    let (dims, c) = fm.volume_dims()?;
    if patches == 0 {
        return Err(Error::IndivisiblePatches {
            dim: dims[0],
            patches,
        });
    }
    if let Some(&dim) = dims.iter().find(|&&d| d % patches != 0) {
        return Err(Error::IndivisiblePatches { dim, patches });
    }
    if index >= patches.pow(3) {
        return Err(Error::ShapeMismatch(format!("patch index {index}")));
    }
    let pd = [dims[0] / patches, dims[1] / patches, dims[2] / patches];
    let origin = [
        (index / (patches * patches)) * pd[0],
        ((index / patches) % patches) * pd[1],
        (index % patches) * pd[2],
    ];
    Ok((dims, c, origin))
}

/// Patch `index` (raster order over the `patches³` grid) of a `[D, H, W, C]`
/// feature map.
pub fn extract_patch(fm: &Tensor, patches: usize, index: usize) -> Result<Tensor> {
    let (dims, c, origin) = patch_geometry(fm, patches, index)?;
    let pd = [dims[0] / patches, dims[1] / patches, dims[2] / patches];
    let mut out = Vec::with_capacity(pd[0] * pd[1] * pd[2] * c);
    for z in 0..pd[0] {
        for y in 0..pd[1] {
            let start = (((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2]) * c;
            out.extend_from_slice(&fm.data()[start..start + pd[2] * c]);
        }
    }
    Tensor::from_vec(&[pd[0], pd[1], pd[2], c], out)
}

/// Copies (or adds, when `accumulate`) a patch into its slot of `fm`.
pub fn insert_patch(
    fm: &mut Tensor,
    patch: &Tensor,
    patches: usize,
    index: usize,
    accumulate: bool,
) -> Result<()> {
    let (dims, c, origin) = patch_geometry(fm, patches, index)?;
    let pd = [dims[0] / patches, dims[1] / patches, dims[2] / patches];
    if patch.shape() != [pd[0], pd[1], pd[2], c] {
        return Err(Error::ShapeMismatch(format!(
            "patch {:?} does not fit slot {pd:?}x{c}",
            patch.shape()
        )));
    }
    let row = pd[2] * c;
    for z in 0..pd[0] {
        for y in 0..pd[1] {
            let start = (((origin[0] + z) * dims[1] + origin[1] + y) * dims[2] + origin[2]) * c;
            let src = &patch.data()[(z * pd[1] + y) * row..(z * pd[1] + y + 1) * row];
            let dst = &mut fm.data_mut()[start..start + row];
            if accumulate {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
    Ok(())
}

/// Contiguous split into `patches³` sub-maps; channels are untouched.
pub fn split_patches(fm: &Tensor, patches: usize) -> Result<Vec<Tensor>> {
    (0..patches.pow(3))
        .map(|i| extract_patch(fm, patches, i))
        .collect()
}

/// Inverse of [`split_patches`].
pub fn merge_patches(parts: &[Tensor], patches: usize) -> Result<Tensor> {
    if parts.len() != patches.pow(3) || parts.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} parts for {patches}^3 patches",
            parts.len()
        )));
    }
    let (pd, c) = parts[0].volume_dims()?;
    let mut out = Tensor::zeros(&[pd[0] * patches, pd[1] * patches, pd[2] * patches, c]);
    for (i, part) in parts.iter().enumerate() {
        insert_patch(&mut out, part, patches, i, false)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_block(edge: usize, density: f64, seed: u64) -> VoxelBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bits = (0..edge * edge * edge)
            .map(|_| rng.random_bool(density) as u8)
            .collect();
        VoxelBlock::from_bits([edge; 3], bits).unwrap()
    }

    #[test]
    fn raster_index_examples() {
        let d = [4, 4, 4];
        assert_eq!(raster_index(0, 0, 0, d).unwrap(), 0);
        assert_eq!(raster_index(0, 0, 1, d).unwrap(), 1);
        assert_eq!(raster_index(0, 1, 0, d).unwrap(), 4);
        assert_eq!(raster_index(1, 0, 0, d).unwrap(), 16);
        assert!(raster_index(4, 0, 0, d).is_err());
    }

    #[test]
    fn raster_index_is_a_monotone_bijection() {
        let d = [4, 4, 4];
        let mut seen = [false; 64];
        let mut last = None;
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let i = raster_index(z, y, x, d).unwrap();
                    assert!(!seen[i]);
                    seen[i] = true;
                    assert!(last.is_none_or(|l| i > l));
                    last = Some(i);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn max_pool_examples() {
        let zero = VoxelBlock::new(4).unwrap();
        assert_eq!(max_pool_down(&zero).unwrap(), VoxelBlock::new(2).unwrap());
        let mut one = VoxelBlock::new(4).unwrap();
        one.set(3, 3, 3, true);
        let pooled = max_pool_down(&one).unwrap();
        assert_eq!(
            pooled.occupied_voxels().collect::<Vec<_>>(),
            vec![[1, 1, 1]]
        );
        assert!(max_pool_down(&VoxelBlock::with_dims([1, 2, 2]).unwrap()).is_err());
    }

    #[test]
    fn max_pool_matches_cellwise_or() {
        let b = random_block(8, 0.1, 9);
        let pooled = max_pool_down(&b).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    let mut any = false;
                    for c in 0..8 {
                        any |= b.get(2 * z + (c >> 2), 2 * y + ((c >> 1) & 1), 2 * x + (c & 1));
                    }
                    assert_eq!(pooled.get(z, y, x), any);
                }
            }
        }
    }

    #[test]
    fn pyramid_edges_and_consistency() {
        let b = random_block(64, 0.01, 1);
        let p = build_pyramid(&b, 3).unwrap();
        let edges: Vec<_> = p.levels().iter().map(|l| l.edge()).collect();
        assert_eq!(edges, vec![8, 16, 32, 64]);
        for k in 0..3 {
            assert_eq!(max_pool_down(&p.levels()[k + 1]).unwrap(), p.levels()[k]);
        }
        let small = random_block(8, 0.3, 2);
        assert_eq!(build_pyramid(&small, 0).unwrap().levels().len(), 1);
        assert!(build_pyramid(&small, 3).is_err());
    }

    #[test]
    fn figure_sized_groups() {
        let b = VoxelBlock::with_dims([2, 4, 4]).unwrap();
        for g in 1..=8 {
            assert_eq!(extract_group(&b, g).unwrap().len(), 4);
        }
    }

    #[test]
    fn all_ones_groups() {
        let b = VoxelBlock::from_bits([4; 3], vec![1; 64]).unwrap();
        for g in 1..=8 {
            assert!(extract_group(&b, g).unwrap().bits.iter().all(|&v| v == 1));
        }
        assert!(matches!(extract_group(&b, 0), Err(Error::InvalidGroup(0))));
        assert!(matches!(extract_group(&b, 9), Err(Error::InvalidGroup(9))));
    }

    #[test]
    fn group_ids_follow_corner_order() {
        for g in 1..=8u8 {
            let [dz, dy, dx] = group_offset(g).unwrap();
            assert_eq!(g as usize, 1 + dz * 4 + dy * 2 + dx);
        }
    }

    #[test]
    fn groups_partition_and_reassemble() {
        let b = random_block(8, 0.4, 3);
        let mut cover = [0u8; 512];
        let mut rebuilt = VoxelBlock::new(8).unwrap();
        for g in 1..=8 {
            let gv = extract_group(&b, g).unwrap();
            let [dz, dy, dx] = gv.offset;
            for z in 0..4 {
                for y in 0..4 {
                    for x in 0..4 {
                        cover[raster_index(2 * z + dz, 2 * y + dy, 2 * x + dx, [8; 3]).unwrap()] +=
                            1;
                    }
                }
            }
            scatter_group(&gv, &mut rebuilt).unwrap();
        }
        assert!(cover.iter().all(|&c| c == 1));
        assert_eq!(rebuilt, b);
    }

    #[test]
    fn patch_split_shapes() {
        let fm = Tensor::zeros(&[16, 16, 16, 32]);
        let parts = split_patches(&fm, 2).unwrap();
        assert_eq!(parts.len(), 8);
        assert!(parts.iter().all(|p| p.shape() == [8, 8, 8, 32]));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fm = Tensor::randn(&[4, 4, 4, 3], 1.0, &mut rng);
        assert_eq!(split_patches(&fm, 1).unwrap(), vec![fm.clone()]);
        assert!(matches!(
            split_patches(&Tensor::zeros(&[6, 4, 4, 1]), 4),
            Err(Error::IndivisiblePatches { .. })
        ));
    }

    #[test]
    fn patches_are_contiguous_octants() {
        let data: Vec<f32> = (0..64).map(|v| v as f32).collect();
        let fm = Tensor::from_vec(&[4, 4, 4, 1], data).unwrap();
        let parts = split_patches(&fm, 2).unwrap();
        // patch 1 is the x-upper octant of the z- and y-lower half.
        assert_eq!(
            parts[1].data(),
            &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]
        );
    }

    proptest! {
        #[test]
        fn merge_inverts_split(seed in any::<u64>(), c in 1usize..4, e in 1usize..4) {
            let edge = 2 * e;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fm = Tensor::randn(&[edge, edge, edge, c], 1.0, &mut rng);
            let parts = split_patches(&fm, 2).unwrap();
            prop_assert_eq!(merge_patches(&parts, 2).unwrap(), fm);
        }

        #[test]
        fn pyramid_parent_child_law(seed in any::<u64>()) {
            let b = random_block(16, 0.05, seed);
            let p = build_pyramid(&b, 2).unwrap();
            for k in 0..2 {
                let (lo, hi) = (&p.levels()[k], &p.levels()[k + 1]);
                let e = lo.edge();
                for z in 0..e { for y in 0..e { for x in 0..e {
                    let children = (0..8).filter(|c| hi.get(2*z + (c >> 2), 2*y + ((c >> 1) & 1), 2*x + (c & 1))).count();
                    prop_assert_eq!(lo.get(z, y, x), children > 0);
                }}}
            }
        }
    }
}
