use crate::error::{Error, Result};

use super::Tensor;

/// Causal masking of a convolution kernel in raster (depth, height, width)
/// order. `A` hides the centre tap, `B` keeps it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskKind {
    None,
    A,
    B,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::None => "none",
            MaskKind::A => "A",
            MaskKind::B => "B",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub mask: MaskKind,
}

impl ConvSpec {
    /// Stride 1, shape-preserving padding.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, mask: MaskKind) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel.saturating_sub(1) / 2,
            mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConv(format!(
                "kernel size {} is even",
                self.kernel
            )));
        }
        if self.stride != 1 {
            return Err(Error::InvalidConv(format!(
                "stride {} unsupported",
                self.stride
            )));
        }
        if self.padding != (self.kernel - 1) / 2 {
            return Err(Error::InvalidConv(format!(
                "padding {} does not preserve shape for kernel {}",
                self.padding, self.kernel
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConv("zero channels".into()));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let k = self.kernel;
        [k, k, k, self.in_channels, self.out_channels]
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn center_tap(&self) -> usize {
        let (k, c) = (self.kernel, self.padding);
        (c * k + c) * k + c
    }

    fn tap_active(&self, tap: usize) -> bool {
        match self.mask {
            MaskKind::None => true,
            MaskKind::A => tap < self.center_tap(),
            MaskKind::B => tap <= self.center_tap(),
        }
    }
}

/// Mask tensor of shape `[k, k, k, in_ch, out_ch]`: one before the centre
/// in raster order, zero after, and the centre set by the mask kind.
pub fn make_mask(kind: MaskKind, k: usize, in_ch: usize, out_ch: usize) -> Result<Tensor> {
    let spec = ConvSpec::new(in_ch, out_ch, k, kind);
    spec.validate()?;
    let per_tap = in_ch * out_ch;
    let mut mask = Tensor::zeros(&spec.weight_shape());
    for tap in 0..spec.taps() {
        if spec.tap_active(tap) {
            mask.data_mut()[tap * per_tap..(tap + 1) * per_tap].fill(1.0);
        }
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Tap {
    pub dz: isize,
    pub dy: isize,
    pub dx: isize,
    pub index: usize,
}

/// A validated spec together with the list of unmasked kernel taps.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeometry {
    spec: ConvSpec,
    taps: Vec<Tap>,
}

impl ConvGeometry {
    pub fn new(spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel;
        let pad = spec.padding as isize;
        let taps = (0..spec.taps())
            .filter(|&t| spec.tap_active(t))
            .map(|t| Tap {
                dz: (t / (k * k)) as isize - pad,
                dy: ((t / k) % k) as isize - pad,
                dx: (t % k) as isize - pad,
                index: t,
            })
            .collect();
        Ok(Self { spec, taps })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn active_taps(&self) -> usize {
        self.taps.len()
    }

    pub(crate) fn taps(&self) -> &[Tap] {
        &self.taps
    }

    /// Active taps times input channels: the effective fan-in.
    pub fn fan_in(&self) -> usize {
        self.taps.len() * self.spec.in_channels
    }

    fn check(&self, input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<[usize; 3]> {
        let (dims, c) = input.volume_dims()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if weight.shape() != self.spec.weight_shape() {
            return Err(Error::ShapeMismatch(format!(
                "weight shape {:?}, expected {:?}",
                weight.shape(),
                self.spec.weight_shape()
            )));
        }
        if bias.shape() != [self.spec.out_channels] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?}, expected [{}]",
                bias.shape(),
                self.spec.out_channels
            )));
        }
        Ok(dims)
    }

    /// Active-tap rows of the weight as a dense `(taps * cin) x cout` matrix.
    fn pack_weight(&self, weight: &[f32]) -> Vec<f32> {
        let slab = self.spec.in_channels * self.spec.out_channels;
        let mut packed = Vec::with_capacity(self.taps.len() * slab);
        for tap in &self.taps {
            packed.extend_from_slice(&weight[tap.index * slab..(tap.index + 1) * slab]);
        }
        packed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvBackend {
    /// Per-voxel accumulation. Any single output voxel can be evaluated on
    /// its own with the same arithmetic as the whole-volume pass, which the
    /// sequential base-scale decoder depends on.
    Direct,
    /// im2col followed by a blocked matrix product.
    Gemm,
}

#[inline]
fn neighbour(pos: [usize; 3], tap: &Tap, dims: [usize; 3]) -> Option<usize> {
    let z = pos[0] as isize + tap.dz;
    let y = pos[1] as isize + tap.dy;
    let x = pos[2] as isize + tap.dx;
    if z < 0 || y < 0 || x < 0 {
        return None;
    }
    let (z, y, x) = (z as usize, y as usize, x as usize);
    if z >= dims[0] || y >= dims[1] || x >= dims[2] {
        return None;
    }
    Some((z * dims[1] + y) * dims[2] + x)
}

/// Evaluates one output voxel of a convolution into `out`.
///
/// Zero inputs are skipped; this changes nothing numerically but makes the
/// binary-occupancy input layers cheap.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn conv_voxel(
    input: &[f32],
    dims: [usize; 3],
    geom: &ConvGeometry,
    weight: &[f32],
    bias: &[f32],
    pos: [usize; 3],
    out: &mut [f32],
) {
    let cin = geom.spec.in_channels;
    let cout = geom.spec.out_channels;
    out.copy_from_slice(bias);
    for tap in &geom.taps {
        let Some(nb) = neighbour(pos, tap, dims) else {
            continue;
        };
        let src = &input[nb * cin..(nb + 1) * cin];
        let w_tap = &weight[tap.index * cin * cout..(tap.index + 1) * cin * cout];
        for (ic, &a) in src.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let w = &w_tap[ic * cout..(ic + 1) * cout];
            for (o, &wv) in out.iter_mut().zip(w) {
                *o += a * wv;
            }
        }
    }
}

/// Shape-preserving 3D cross-correlation with zero padding. Masked taps are
/// excluded, which equals multiplying the weight by [`make_mask`].
pub fn conv3d(
    input: &Tensor,
    geom: &ConvGeometry,
    weight: &Tensor,
    bias: &Tensor,
    backend: ConvBackend,
) -> Result<Tensor> {
    let dims = geom.check(input, weight, bias)?;
    let cout = geom.spec.out_channels;
    let voxels = dims[0] * dims[1] * dims[2];
    let mut out = vec![0.0f32; voxels * cout];
    match backend {
        ConvBackend::Direct => {
            let mut idx = 0;
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        conv_voxel(
                            input.data(),
                            dims,
                            geom,
                            weight.data(),
                            bias.data(),
                            [z, y, x],
                            &mut out[idx * cout..(idx + 1) * cout],
                        );
                        idx += 1;
                    }
                }
            }
        }
        ConvBackend::Gemm => gemm_forward(
            input.data(),
            dims,
            geom,
            weight.data(),
            bias.data(),
            &mut out,
        ),
    }
    Tensor::from_vec(&[dims[0], dims[1], dims[2], cout], out)
}

/// Upper bound on the im2col buffer, in floats.
const COL_BUDGET: usize = 1 << 22;

fn plane_chunk(dims: [usize; 3], k_cols: usize) -> usize {
    let plane = dims[1] * dims[2] * k_cols.max(1);
    (COL_BUDGET / plane).clamp(1, dims[0])
}

fn im2col(
    input: &[f32],
    dims: [usize; 3],
    geom: &ConvGeometry,
    z_range: std::ops::Range<usize>,
    col: &mut Vec<f32>,
) {
    let cin = geom.spec.in_channels;
    let k_cols = geom.taps.len() * cin;
    let rows = z_range.len() * dims[1] * dims[2];
    col.clear();
    col.resize(rows * k_cols, 0.0);
    let mut row = 0;
    for z in z_range {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let dst = &mut col[row * k_cols..(row + 1) * k_cols];
                for (a, tap) in geom.taps.iter().enumerate() {
                    if let Some(nb) = neighbour([z, y, x], tap, dims) {
                        dst[a * cin..(a + 1) * cin]
                            .copy_from_slice(&input[nb * cin..(nb + 1) * cin]);
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = a * b + beta * c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserted bounds keep every strided access in range.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn gemm_forward(
    input: &[f32],
    dims: [usize; 3],
    geom: &ConvGeometry,
    weight: &[f32],
    bias: &[f32],
    out: &mut [f32],
) {
    let cout = geom.spec.out_channels;
    for row in out.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    let k_cols = geom.taps.len() * geom.spec.in_channels;
    if k_cols == 0 {
        return;
    }
    let packed = geom.pack_weight(weight);
    let plane = dims[1] * dims[2];
    let step = plane_chunk(dims, k_cols);
    let mut col = Vec::new();
    let mut z0 = 0;
    while z0 < dims[0] {
        let z1 = (z0 + step).min(dims[0]);
        im2col(input, dims, geom, z0..z1, &mut col);
        let rows = (z1 - z0) * plane;
        let c = &mut out[z0 * plane * cout..z1 * plane * cout];
        sgemm(
            rows,
            k_cols,
            cout,
            &col,
            (k_cols, 1),
            &packed,
            (cout, 1),
            1.0,
            c,
            cout,
        );
        z0 = z1;
    }
}

/// Gradients of a convolution with respect to its input (optional), weight
/// and bias, given the gradient of its output.
pub(crate) fn conv3d_backward(
    input: &Tensor,
    geom: &ConvGeometry,
    weight: &Tensor,
    grad_out: &Tensor,
    want_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (dims, cin) = input.volume_dims()?;
    let cout = geom.spec.out_channels;
    let plane = dims[1] * dims[2];
    let voxels = dims[0] * plane;
    if grad_out.len() != voxels * cout {
        return Err(Error::ShapeMismatch("conv output gradient".into()));
    }
    let gy = grad_out.data();

    let mut grad_bias = vec![0.0f32; cout];
    for row in gy.chunks_exact(cout) {
        for (b, g) in grad_bias.iter_mut().zip(row) {
            *b += *g;
        }
    }

    let k_cols = geom.taps.len() * cin;
    let mut grad_packed = vec![0.0f32; k_cols * cout];
    let mut grad_in = want_input_grad.then(|| vec![0.0f32; voxels * cin]);
    if k_cols > 0 {
        let packed = geom.pack_weight(weight.data());
        let step = plane_chunk(dims, k_cols);
        let mut col = Vec::new();
        let mut grad_col = Vec::new();
        let mut z0 = 0;
        while z0 < dims[0] {
            let z1 = (z0 + step).min(dims[0]);
            let rows = (z1 - z0) * plane;
            let gy_chunk = &gy[z0 * plane * cout..z1 * plane * cout];
            im2col(input.data(), dims, geom, z0..z1, &mut col);
            // dW += col^T * dY
            sgemm(
                k_cols,
                rows,
                cout,
                &col,
                (1, k_cols),
                gy_chunk,
                (cout, 1),
                1.0,
                &mut grad_packed,
                cout,
            );
            if let Some(gx) = grad_in.as_mut() {
                // dcol = dY * W^T, then scatter back onto the input lattice.
                grad_col.clear();
                grad_col.resize(rows * k_cols, 0.0);
                sgemm(
                    rows,
                    cout,
                    k_cols,
                    gy_chunk,
                    (cout, 1),
                    &packed,
                    (1, cout),
                    0.0,
                    &mut grad_col,
                    k_cols,
                );
                let mut row = 0;
                for z in z0..z1 {
                    for y in 0..dims[1] {
                        for x in 0..dims[2] {
                            let src = &grad_col[row * k_cols..(row + 1) * k_cols];
                            for (a, tap) in geom.taps.iter().enumerate() {
                                if let Some(nb) = neighbour([z, y, x], tap, dims) {
                                    let dst = &mut gx[nb * cin..(nb + 1) * cin];
                                    for (d, s) in dst.iter_mut().zip(&src[a * cin..(a + 1) * cin]) {
                                        *d += *s;
                                    }
                                }
                            }
                            row += 1;
                        }
                    }
                }
            }
            z0 = z1;
        }
    }

    let slab = cin * cout;
    let mut grad_weight = Tensor::zeros(&geom.spec.weight_shape());
    for (a, tap) in geom.taps.iter().enumerate() {
        grad_weight.data_mut()[tap.index * slab..(tap.index + 1) * slab]
            .copy_from_slice(&grad_packed[a * slab..(a + 1) * slab]);
    }
    let grad_in = match grad_in {
        Some(g) => Some(Tensor::from_vec(input.shape(), g)?),
        None => None,
    };
    Ok((grad_in, grad_weight, Tensor::from_vec(&[cout], grad_bias)?))
}
