//! Base-scale network: a causal stack of masked convolutions predicting
//! each voxel of the coarsest level from the voxels before it in raster
//! order.

use rand::Rng;

use crate::blocks::VoxelBlock;
use crate::error::{Error, Result};
use crate::tensor::{
    clamped_sigmoid, conv_voxel, relu, Conv3d, ConvBackend, ConvSpec, GradTape, MaskKind, ResBlock,
    Var,
};

use super::{push_res, push_res_mut, ArchConfig, LayerStack};

/// Type-A entry convolution, masked residual blocks, a type-B 3³
/// convolution and a 1³ projection to one logit per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseVoxelDnn {
    edge: usize,
    first: Conv3d,
    blocks: Vec<ResBlock>,
    last: Conv3d,
    out: Conv3d,
}

impl BaseVoxelDnn {
    pub fn new<R: Rng + ?Sized>(arch: &ArchConfig, edge: usize, rng: &mut R) -> Result<Self> {
        let f = arch.base_features;
        let first = Conv3d::new(ConvSpec::new(1, f, arch.base_kernel, MaskKind::A), rng)?;
        let blocks = (0..arch.base_blocks)
            .map(|_| ResBlock::new(f, arch.base_hidden, MaskKind::B, rng))
            .collect::<Result<_>>()?;
        let last = Conv3d::new(ConvSpec::new(f, f, 3, MaskKind::B), rng)?;
        let out = Conv3d::new(ConvSpec::new(f, 1, 1, MaskKind::None), rng)?;
        Ok(Self {
            edge,
            first,
            blocks,
            last,
            out,
        })
    }

    pub fn edge(&self) -> usize {
        self.edge
    }

    fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        if dims != [self.edge; 3] {
            return Err(Error::ShapeMismatch(format!(
                "base model expects a {}³ block, got {dims:?}",
                self.edge
            )));
        }
        Ok(())
    }

    /// Logits for every voxel of a `[e, e, e, 1]` occupancy volume.
    pub fn logits_on_tape(
        &self,
        tape: &mut GradTape,
        input: Var,
        backend: ConvBackend,
    ) -> Result<Var> {
        self.check_input(tape.value(input).volume_dims()?.0)?;
        let first = self.first.bind(tape);
        let blocks: Vec<_> = self.blocks.iter().map(|b| b.bind(tape)).collect();
        let last = self.last.bind(tape);
        let out = self.out.bind(tape);

        let h = self.first.apply(tape, input, first, backend)?;
        let mut h = tape.relu(h);
        for (b, vars) in self.blocks.iter().zip(&blocks) {
            h = b.apply(tape, h, vars, backend)?;
        }
        let h = self.last.apply(tape, h, last, backend)?;
        let h = tape.relu(h);
        self.out.apply(tape, h, out, backend)
    }

    /// Teacher-forced probabilities that each voxel is occupied given the
    /// voxels before it, in raster order.
    pub fn forward_full(&self, block: &VoxelBlock) -> Result<Vec<f32>> {
        self.check_input(block.dims())?;
        let be = ConvBackend::Direct;
        let mut h = self.first.forward(&block.to_tensor(), be)?;
        h.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        for b in &self.blocks {
            h = b.forward(&h, be)?;
        }
        let mut h = self.last.forward(&h, be)?;
        h.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let logits = self.out.forward(&h, be)?;
        Ok(logits.data().iter().map(|&z| clamped_sigmoid(z)).collect())
    }

    pub fn stepper(&self) -> BaseStepper<'_> {
        BaseStepper::new(self)
    }
}

impl LayerStack for BaseVoxelDnn {
    fn convs(&self) -> Vec<(String, &Conv3d)> {
        let mut out = vec![("first".to_string(), &self.first)];
        for (i, b) in self.blocks.iter().enumerate() {
            push_res(&mut out, &format!("block{i}"), b);
        }
        out.push(("last".into(), &self.last));
        out.push(("out".into(), &self.out));
        out
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv3d> {
        let mut out = vec![&mut self.first];
        for b in &mut self.blocks {
            push_res_mut(&mut out, b);
        }
        out.push(&mut self.last);
        out.push(&mut self.out);
        out
    }
}

struct ResBuffers {
    reduced: Vec<f32>,
    spatial: Vec<f32>,
    out: Vec<f32>,
}

/// Sequential evaluation of [`BaseVoxelDnn`] one voxel at a time, for
/// decoding. Every layer is computed only at the current position, from
/// buffers already filled at earlier positions, with the same per-voxel
/// arithmetic as [`BaseVoxelDnn::forward_full`]; the probabilities are
/// therefore identical bit for bit.
pub struct BaseStepper<'m> {
    model: &'m BaseVoxelDnn,
    dims: [usize; 3],
    input: Vec<f32>,
    first: Vec<f32>,
    blocks: Vec<ResBuffers>,
    last: Vec<f32>,
    scratch: Vec<f32>,
    next: usize,
    predicted: bool,
}

fn relu_slice(s: &mut [f32]) {
    s.iter_mut().for_each(|v| *v = relu(*v));
}

impl<'m> BaseStepper<'m> {
    fn new(model: &'m BaseVoxelDnn) -> Self {
        let n = model.edge.pow(3);
        let f = model.first.spec().out_channels;
        let blocks = model
            .blocks
            .iter()
            .map(|b| {
                let h = b.reduce.spec().out_channels;
                ResBuffers {
                    reduced: vec![0.0; n * h],
                    spatial: vec![0.0; n * h],
                    out: vec![0.0; n * f],
                }
            })
            .collect();
        Self {
            model,
            dims: [model.edge; 3],
            input: vec![0.0; n],
            first: vec![0.0; n * f],
            blocks,
            last: vec![0.0; n * f],
            scratch: vec![0.0; f],
            next: 0,
            predicted: false,
        }
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    /// Raster index of the voxel the next prediction is for.
    pub fn position(&self) -> usize {
        self.next
    }

    /// Probability that the voxel at [`position`](Self::position) is
    /// occupied, given the voxels pushed so far.
    pub fn predict_next(&mut self) -> Result<f32> {
        let i = self.next;
        if i >= self.len() {
            return Err(Error::PositionOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        let [_, h, w] = self.dims;
        let pos = [i / (h * w), (i / w) % h, i % w];
        let dims = self.dims;
        let m = self.model;

        let layer = |c: &Conv3d, input: &[f32], out: &mut [f32]| {
            let cout = c.spec().out_channels;
            conv_voxel(
                input,
                dims,
                c.geometry(),
                c.weight.data(),
                c.bias.data(),
                pos,
                &mut out[i * cout..(i + 1) * cout],
            );
        };

        let f = m.first.spec().out_channels;
        layer(&m.first, &self.input, &mut self.first);
        relu_slice(&mut self.first[i * f..(i + 1) * f]);
        let mut prev: &[f32] = &self.first;
        for (b, buf) in m.blocks.iter().zip(self.blocks.iter_mut()) {
            let hid = b.reduce.spec().out_channels;
            layer(&b.reduce, prev, &mut buf.reduced);
            relu_slice(&mut buf.reduced[i * hid..(i + 1) * hid]);
            layer(&b.spatial, &buf.reduced, &mut buf.spatial);
            relu_slice(&mut buf.spatial[i * hid..(i + 1) * hid]);
            conv_voxel(
                &buf.spatial,
                dims,
                b.expand.geometry(),
                b.expand.weight.data(),
                b.expand.bias.data(),
                pos,
                &mut self.scratch,
            );
            for (o, (e, x)) in buf.out[i * f..(i + 1) * f]
                .iter_mut()
                .zip(self.scratch.iter().zip(&prev[i * f..(i + 1) * f]))
            {
                *o = e + x;
            }
            prev = &buf.out;
        }
        layer(&m.last, prev, &mut self.last);
        relu_slice(&mut self.last[i * f..(i + 1) * f]);
        let mut logit = [0.0f32];
        conv_voxel(
            &self.last,
            dims,
            m.out.geometry(),
            m.out.weight.data(),
            m.out.bias.data(),
            pos,
            &mut logit,
        );
        self.predicted = true;
        Ok(clamped_sigmoid(logit[0]))
    }

    /// Records the true occupancy of the current voxel and moves on.
    pub fn push(&mut self, occupied: bool) -> Result<()> {
        if !self.predicted {
            return Err(Error::InvalidConfig(
                "push called before predict_next for this position".into(),
            ));
        }
        self.input[self.next] = if occupied { 1.0 } else { 0.0 };
        self.next += 1;
        self.predicted = false;
        Ok(())
    }
}

/// Probability for voxel `index` given the voxels of `block` before it;
/// later voxels of `block` are ignored.
pub fn base_forward_step(model: &BaseVoxelDnn, block: &VoxelBlock, index: usize) -> Result<f32> {
    model.check_input(block.dims())?;
    if index >= block.len() {
        return Err(Error::PositionOutOfRange {
            index,
            len: block.len(),
        });
    }
    let mut stepper = model.stepper();
    for j in 0..index {
        stepper.predict_next()?;
        stepper.push(block.get_index(j))?;
    }
    stepper.predict_next()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_block(edge: usize, density: f64, seed: u64) -> VoxelBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = VoxelBlock::new(edge).unwrap();
        for i in 0..b.len() {
            b.set_index(i, rng.random_bool(density));
        }
        b
    }

    fn model(edge: usize, seed: u64) -> BaseVoxelDnn {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BaseVoxelDnn::new(&ArchConfig::desk(), edge, &mut rng).unwrap();
        // Non-zero biases so the residual and bias paths are exercised.
        for c in m.convs_mut() {
            for v in c.bias.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        m
    }

    #[test]
    fn stepper_matches_full_pass_exactly() {
        let m = model(8, 1);
        let block = random_block(8, 0.3, 2);
        let full = m.forward_full(&block).unwrap();
        let mut st = m.stepper();
        for (i, &expected) in full.iter().enumerate() {
            let p = st.predict_next().unwrap();
            assert_eq!(p.to_bits(), expected.to_bits(), "position {i}");
            st.push(block.get_index(i)).unwrap();
        }
        assert!(st.predict_next().is_err());
        assert!(full.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn first_voxel_ignores_everything() {
        let m = model(4, 3);
        let a = m.forward_full(&random_block(4, 0.5, 1)).unwrap();
        let b = m.forward_full(&random_block(4, 0.5, 2)).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn tape_logits_agree_with_full_pass() {
        let m = model(4, 5);
        let block = random_block(4, 0.4, 6);
        let mut tape = GradTape::new();
        let x = tape.constant(block.to_tensor());
        let z = m.logits_on_tape(&mut tape, x, ConvBackend::Gemm).unwrap();
        let full = m.forward_full(&block).unwrap();
        for (zl, p) in tape.value(z).data().iter().zip(&full) {
            assert!((clamped_sigmoid(*zl) - p).abs() < 1e-5);
        }
    }

    #[test]
    fn step_helper_and_errors() {
        let m = model(4, 7);
        let block = random_block(4, 0.5, 8);
        let full = m.forward_full(&block).unwrap();
        assert_eq!(
            base_forward_step(&m, &block, 37).unwrap().to_bits(),
            full[37].to_bits()
        );
        assert!(base_forward_step(&m, &block, 64).is_err());
        assert!(m.forward_full(&random_block(8, 0.5, 1)).is_err());
        let mut st = m.stepper();
        assert!(st.push(true).is_err());
    }

    #[test]
    fn param_names_follow_layer_order() {
        let m = model(4, 9);
        let names: Vec<String> = m.convs().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.first().unwrap(), "first");
        assert_eq!(names[1], "block0.reduce");
        assert_eq!(names.last().unwrap(), "out");
        assert_eq!(names.len(), 2 + 3 * 2 + 1);
    }
}
