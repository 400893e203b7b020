//! Group predictors: one network evaluation yields the probabilities of a
//! whole corner group of a pyramid level, from coarser or sibling data.

use rand::Rng;

use crate::blocks::{merge_patches, split_patches, GroupVolume, VoxelBlock};
use crate::error::{Error, Result};
use crate::tensor::{
    clamped_sigmoid, relu, Conv3d, ConvBackend, ConvSpec, GradTape, MaskKind, ResBlock, Tensor, Var,
};

use super::{push_res, push_res_mut, ArchConfig, LayerStack};

/// Feature trunk (entry convolution and residual blocks) over the whole
/// context, then a shallow masked head applied to each patch of the
/// feature map with shared weights. The target group is never an input.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPredictor {
    group: u8,
    context_edge: usize,
    patches: usize,
    stem: Conv3d,
    trunk: Vec<ResBlock>,
    head_in: Conv3d,
    head_blocks: Vec<ResBlock>,
    head_out: Conv3d,
}

/// Context channels seen by group `g`: the lower level for group 1, else
/// groups `1..g`.
pub fn context_channels(group: u8) -> usize {
    if group <= 1 {
        1
    } else {
        group as usize - 1
    }
}

impl GroupPredictor {
    /// Predictor for group `group` of a level whose groups have edge
    /// `context_edge` (half the level edge).
    pub fn new<R: Rng + ?Sized>(
        arch: &ArchConfig,
        context_edge: usize,
        group: u8,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=8).contains(&group) {
            return Err(Error::InvalidGroup(group));
        }
        if !context_edge.is_multiple_of(arch.patches) {
            return Err(Error::IndivisiblePatches {
                dim: context_edge,
                patches: arch.patches,
            });
        }
        let f = arch.group_features;
        let c = context_channels(group);
        Ok(Self {
            group,
            context_edge,
            patches: arch.patches,
            stem: Conv3d::new(ConvSpec::new(c, f, arch.stem_kernel, MaskKind::None), rng)?,
            trunk: (0..arch.trunk_blocks)
                .map(|_| ResBlock::new(f, arch.group_hidden, MaskKind::None, rng))
                .collect::<Result<_>>()?,
            head_in: Conv3d::new(ConvSpec::new(f, f, arch.head_kernel, MaskKind::A), rng)?,
            head_blocks: (0..arch.head_blocks)
                .map(|_| ResBlock::new(f, arch.group_hidden, MaskKind::B, rng))
                .collect::<Result<_>>()?,
            head_out: Conv3d::new(ConvSpec::new(f, 1, 1, MaskKind::None), rng)?,
        })
    }

    pub fn group(&self) -> u8 {
        self.group
    }

    pub fn context_edge(&self) -> usize {
        self.context_edge
    }

    pub fn channels(&self) -> usize {
        context_channels(self.group)
    }

    /// Bias of the final projection, i.e. the logit an uninformative
    /// feature map produces.
    pub fn output_bias_mut(&mut self) -> &mut f32 {
        &mut self.head_out.bias.data_mut()[0]
    }

    fn check_context(&self, context: &Tensor) -> Result<()> {
        let (dims, c) = context.volume_dims()?;
        if dims != [self.context_edge; 3] || c != self.channels() {
            return Err(Error::ShapeMismatch(format!(
                "group {} expects {} channel(s) of {}³, got {c} of {dims:?}",
                self.group,
                self.channels(),
                self.context_edge
            )));
        }
        Ok(())
    }

    pub fn logits_on_tape(
        &self,
        tape: &mut GradTape,
        context: Var,
        backend: ConvBackend,
    ) -> Result<Var> {
        self.check_context(tape.value(context))?;
        let stem = self.stem.bind(tape);
        let trunk: Vec<_> = self.trunk.iter().map(|b| b.bind(tape)).collect();
        let head_in = self.head_in.bind(tape);
        let head_blocks: Vec<_> = self.head_blocks.iter().map(|b| b.bind(tape)).collect();
        let head_out = self.head_out.bind(tape);

        let h = self.stem.apply(tape, context, stem, backend)?;
        let mut h = tape.relu(h);
        for (b, vars) in self.trunk.iter().zip(&trunk) {
            h = b.apply(tape, h, vars, backend)?;
        }
        let mut outs = Vec::new();
        for part in tape.split_patches(h, self.patches)? {
            let q = self.head_in.apply(tape, part, head_in, backend)?;
            let mut q = tape.relu(q);
            for (b, vars) in self.head_blocks.iter().zip(&head_blocks) {
                q = b.apply(tape, q, vars, backend)?;
            }
            outs.push(self.head_out.apply(tape, q, head_out, backend)?);
        }
        tape.merge_patches(&outs, self.patches)
    }

    /// Occupancy probabilities of every voxel of the group, in the raster
    /// order of the group volume.
    pub fn predict(&self, context: &Tensor) -> Result<Vec<f32>> {
        self.check_context(context)?;
        let be = ConvBackend::Gemm;
        let mut h = self.stem.forward(context, be)?;
        h.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        for b in &self.trunk {
            h = b.forward(&h, be)?;
        }
        let mut outs = Vec::new();
        for part in split_patches(&h, self.patches)? {
            let mut q = self.head_in.forward(&part, be)?;
            q.data_mut().iter_mut().for_each(|v| *v = relu(*v));
            for b in &self.head_blocks {
                q = b.forward(&q, be)?;
            }
            outs.push(self.head_out.forward(&q, be)?);
        }
        let logits = merge_patches(&outs, self.patches)?;
        Ok(logits.data().iter().map(|&z| clamped_sigmoid(z)).collect())
    }
}

impl LayerStack for GroupPredictor {
    fn convs(&self) -> Vec<(String, &Conv3d)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (i, b) in self.trunk.iter().enumerate() {
            push_res(&mut out, &format!("trunk{i}"), b);
        }
        out.push(("head_in".into(), &self.head_in));
        for (i, b) in self.head_blocks.iter().enumerate() {
            push_res(&mut out, &format!("head{i}"), b);
        }
        out.push(("head_out".into(), &self.head_out));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv3d> {
        let mut out = vec![&mut self.stem];
        for b in &mut self.trunk {
            push_res_mut(&mut out, b);
        }
        out.push(&mut self.head_in);
        for b in &mut self.head_blocks {
            push_res_mut(&mut out, b);
        }
        out.push(&mut self.head_out);
        out
    }
}

/// Network input for group `group`: the lower pyramid level for group 1,
/// otherwise `previous` (groups `1..group` in ascending order) stacked as
/// channels.
pub fn group_context(lower: &VoxelBlock, previous: &[GroupVolume], group: u8) -> Result<Tensor> {
    if !(1..=8).contains(&group) {
        return Err(Error::InvalidGroup(group));
    }
    if group == 1 {
        return Ok(lower.to_tensor());
    }
    let c = group as usize - 1;
    if previous.len() < c {
        return Err(Error::ShapeMismatch(format!(
            "group {group} needs {c} previous groups, got {}",
            previous.len()
        )));
    }
    let dims = lower.dims();
    let voxels = lower.len();
    let mut data = vec![0.0f32; voxels * c];
    for (ch, gv) in previous[..c].iter().enumerate() {
        if gv.group as usize != ch + 1 || gv.dims() != dims {
            return Err(Error::ShapeMismatch(format!(
                "context channel {ch} holds group {} of {:?}",
                gv.group,
                gv.dims()
            )));
        }
        for (v, &bit) in gv.bits.iter().enumerate() {
            data[v * c + ch] = bit as f32;
        }
    }
    Tensor::from_vec(&[dims[0], dims[1], dims[2], c], data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::blocks::{build_pyramid, extract_group};

    fn small_arch() -> ArchConfig {
        ArchConfig {
            group_features: 4,
            group_hidden: 2,
            ..ArchConfig::desk()
        }
    }

    fn random_block(edge: usize, seed: u64) -> VoxelBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = VoxelBlock::new(edge).unwrap();
        for i in 0..b.len() {
            b.set_index(i, rng.random_bool(0.3));
        }
        b
    }

    #[test]
    fn context_for_group_five_has_four_channels() {
        let level = random_block(32, 1);
        let lower = crate::blocks::max_pool_down(&level).unwrap();
        let groups: Vec<_> = (1..=4).map(|g| extract_group(&level, g).unwrap()).collect();
        let ctx = group_context(&lower, &groups, 5).unwrap();
        assert_eq!(ctx.shape(), &[16, 16, 16, 4]);
        assert_eq!(ctx.data()[3], groups[3].bits[0] as f32);
        assert!(group_context(&lower, &groups[..2], 5).is_err());
        assert_eq!(group_context(&lower, &[], 1).unwrap(), lower.to_tensor());
    }

    #[test]
    fn zero_context_gives_valid_deterministic_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = GroupPredictor::new(&small_arch(), 8, 3, &mut rng).unwrap();
        let ctx = Tensor::zeros(&[8, 8, 8, 2]);
        let a = p.predict(&ctx).unwrap();
        assert_eq!(a.len(), 512);
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a, p.predict(&ctx).unwrap());
        assert!(p.predict(&Tensor::zeros(&[8, 8, 8, 3])).is_err());
        assert!(p.predict(&Tensor::zeros(&[4, 4, 4, 2])).is_err());
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GroupPredictor::new(&small_arch(), 8, 2, &mut rng).unwrap();
        let level = random_block(16, 4);
        let lower = build_pyramid(&level, 1).unwrap().levels()[0].clone();
        let g1 = extract_group(&level, 1).unwrap();
        let ctx = group_context(&lower, &[g1], 2).unwrap();
        let probs = p.predict(&ctx).unwrap();
        let mut tape = GradTape::new();
        let x = tape.constant(ctx);
        let z = p.logits_on_tape(&mut tape, x, ConvBackend::Direct).unwrap();
        for (zl, q) in tape.value(z).data().iter().zip(&probs) {
            assert!((clamped_sigmoid(*zl) - q).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(GroupPredictor::new(&small_arch(), 8, 9, &mut rng).is_err());
        assert!(GroupPredictor::new(&small_arch(), 3, 1, &mut rng).is_err());
    }
}
