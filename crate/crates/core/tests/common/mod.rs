//! Helpers shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::path::PathBuf;

use msvox_core::blocks::VoxelBlock;
use msvox_core::models::{ArchConfig, CodecConfig, ModelBundle};
use msvox_core::pc_io::{parse_ply_vertices, voxelize, PointCloud};
use msvox_core::tensor::{ConvBackend, GradTape, ResBlock, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// The torus fixture voxelized onto a 2^n grid.
pub fn torus_cloud(n: u8) -> PointCloud {
    let bytes = std::fs::read(fixture("torus.ply")).expect("fixture present");
    let verts = parse_ply_vertices(&bytes).expect("fixture parses");
    voxelize(&verts.points, n).expect("fixture voxelizes")
}

pub fn desk_bundle(num_scales: usize, seed: u64) -> ModelBundle {
    ModelBundle::new_random(
        ArchConfig::desk(),
        CodecConfig::new(8, num_scales).unwrap(),
        seed,
    )
    .unwrap()
}

/// Places blocks side by side on a `4 × 4 × 4`-block grid (n = 8).
pub fn tile_blocks(blocks: &[VoxelBlock]) -> PointCloud {
    assert!(blocks.len() <= 64);
    let e = blocks[0].edge() as u32;
    let n = (4 * e).trailing_zeros() as u8;
    let mut pts = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        let (bx, by, bz) = ((i % 4) as u32, ((i / 4) % 4) as u32, (i / 16) as u32);
        for [z, y, x] in b.occupied_voxels() {
            pts.push([bx * e + x as u32, by * e + y as u32, bz * e + z as u32]);
        }
    }
    PointCloud::new(n, pts).unwrap()
}

pub fn random_block(edge: usize, density: f64, rng: &mut impl Rng) -> VoxelBlock {
    let mut b = VoxelBlock::new(edge).unwrap();
    for i in 0..b.len() {
        b.set_index(i, rng.random_bool(density));
    }
    b
}

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug)]
pub struct GradCheck {
    pub rel_err: f64,
    pub coords: usize,
}

/// Compares reverse-mode gradients of `sum(f(params) * w)` against central
/// differences with step `eps`, on up to `per_tensor` random coordinates of
/// every parameter. The error is the norm of the difference over the norm
/// of the larger gradient, across all sampled coordinates.
pub fn grad_check(
    params: &[Tensor],
    f: &dyn Fn(&mut GradTape, &[Var]) -> Var,
    eps: f32,
    per_tensor: usize,
    seed: u64,
) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = GradTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars);
    let scalar_out = tape.value(out).len() == 1;
    let weights = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng);
    let loss = if scalar_out {
        out
    } else {
        tape.weighted_sum(out, &weights).unwrap()
    };
    let grads = tape.backward(loss).unwrap().param_grads(&tape);

    let eval = |ps: &[Tensor]| -> f64 {
        let mut t = GradTape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let o = f(&mut t, &vs);
        let v = t.value(o);
        if scalar_out {
            v.data()[0] as f64
        } else {
            v.data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum()
        }
    };

    let (mut diff2, mut an2, mut num2, mut coords) = (0.0, 0.0, 0.0, 0);
    for (pi, p) in params.iter().enumerate() {
        let picks: Vec<usize> = if p.len() <= per_tensor {
            (0..p.len()).collect()
        } else {
            (0..per_tensor)
                .map(|_| rng.random_range(0..p.len()))
                .collect()
        };
        for idx in picks {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[idx] += eps;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps as f64);
            let analytic = grads[pi].data()[idx] as f64;
            diff2 += (numeric - analytic).powi(2);
            an2 += analytic * analytic;
            num2 += numeric * numeric;
            coords += 1;
        }
    }
    let scale = an2.max(num2).sqrt().max(1e-8);
    GradCheck {
        rel_err: diff2.sqrt() / scale,
        coords,
    }
}

/// Smallest pre-activation margin a ReLU input must keep from zero for a
/// central difference with step 1e-3 to stay on one side of the kink.
pub const RELU_MARGIN: f32 = 5e-3;

pub fn min_abs(t: &Tensor) -> f32 {
    t.data().iter().fold(f32::INFINITY, |m, v| m.min(v.abs()))
}

/// Moves every entry at least `margin` away from zero, keeping its sign.
pub fn away_from_zero(mut t: Tensor, margin: f32) -> Tensor {
    for v in t.data_mut() {
        *v += margin.copysign(*v);
    }
    t
}

/// Smallest |pre-activation| at either ReLU inside a residual block.
pub fn res_block_relu_margin(block: &ResBlock, x: &Tensor) -> f32 {
    let r = block.reduce.forward(x, ConvBackend::Direct).unwrap();
    let mut h = r.clone();
    h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let s = block.spatial.forward(&h, ConvBackend::Direct).unwrap();
    min_abs(&r).min(min_abs(&s))
}

/// Copies `params` (reduce, spatial and expand weights and biases, in that
/// order) into a clone of `block`.
pub fn with_params(block: &ResBlock, params: &[Tensor]) -> ResBlock {
    let mut b = block.clone();
    for (dst, src) in b.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
    b
}
