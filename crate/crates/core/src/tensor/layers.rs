use rand::Rng;

use crate::error::{Error, Result};

use super::conv::{conv3d, ConvBackend, ConvGeometry, ConvSpec, MaskKind};
use super::tape::{GradTape, Var};
use super::{relu, Tensor};

/// A convolution layer with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3d {
    geom: ConvGeometry,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

impl Conv3d {
    /// He-normal weights over the unmasked fan-in, zero bias. Masked taps
    /// are stored as zeros.
    pub fn new<R: Rng + ?Sized>(spec: ConvSpec, rng: &mut R) -> Result<Self> {
        let geom = ConvGeometry::new(spec)?;
        let fan_in = geom.fan_in();
        let std = if fan_in == 0 {
            0.0
        } else {
            (2.0 / fan_in as f32).sqrt()
        };
        let mut weight = Tensor::randn(&spec.weight_shape(), std, rng);
        let slab = spec.in_channels * spec.out_channels;
        let mut active = vec![false; spec.kernel.pow(3)];
        for tap in geom.taps() {
            active[tap.index] = true;
        }
        for (tap, chunk) in weight.data_mut().chunks_mut(slab).enumerate() {
            if !active[tap] {
                chunk.fill(0.0);
            }
        }
        Ok(Self {
            geom,
            weight,
            bias: Tensor::zeros(&[spec.out_channels]),
        })
    }

    pub fn zeroed(spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            geom: ConvGeometry::new(spec)?,
            weight: Tensor::zeros(&spec.weight_shape()),
            bias: Tensor::zeros(&[spec.out_channels]),
        })
    }

    pub fn from_parts(spec: ConvSpec, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape() != spec.weight_shape() || bias.shape() != [spec.out_channels] {
            return Err(Error::ShapeMismatch(format!(
                "conv parameters {:?}/{:?} do not fit {spec:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            geom: ConvGeometry::new(spec)?,
            weight,
            bias,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        self.geom.spec()
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn bind(&self, tape: &mut GradTape) -> ConvVars {
        ConvVars {
            w: tape.param(&self.weight),
            b: tape.param(&self.bias),
        }
    }

    pub fn apply(
        &self,
        tape: &mut GradTape,
        x: Var,
        vars: ConvVars,
        backend: ConvBackend,
    ) -> Result<Var> {
        tape.conv3d(x, vars.w, vars.b, &self.geom, backend)
    }

    pub fn forward(&self, input: &Tensor, backend: ConvBackend) -> Result<Tensor> {
        conv3d(input, &self.geom, &self.weight, &self.bias, backend)
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Residual unit `x + expand(relu(spatial(relu(reduce(x)))))`: a 3³
/// convolution between two 1³ convolutions. A masked block carries the
/// mask on the spatial layer only.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub reduce: Conv3d,
    pub spatial: Conv3d,
    pub expand: Conv3d,
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlockVars {
    pub reduce: ConvVars,
    pub spatial: ConvVars,
    pub expand: ConvVars,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        features: usize,
        hidden: usize,
        mask: MaskKind,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            reduce: Conv3d::new(ConvSpec::new(features, hidden, 1, MaskKind::None), rng)?,
            spatial: Conv3d::new(ConvSpec::new(hidden, hidden, 3, mask), rng)?,
            expand: Conv3d::new(ConvSpec::new(hidden, features, 1, MaskKind::None), rng)?,
        })
    }

    pub fn from_parts(reduce: Conv3d, spatial: Conv3d, expand: Conv3d) -> Result<Self> {
        let (f, h) = (reduce.spec().in_channels, reduce.spec().out_channels);
        let ok = spatial.spec().in_channels == h
            && spatial.spec().out_channels == h
            && expand.spec().in_channels == h
            && expand.spec().out_channels == f
            && reduce.spec().kernel == 1
            && expand.spec().kernel == 1;
        if !ok {
            return Err(Error::ShapeMismatch("inconsistent residual block".into()));
        }
        Ok(Self {
            reduce,
            spatial,
            expand,
        })
    }

    pub fn features(&self) -> usize {
        self.reduce.spec().in_channels
    }

    pub fn bind(&self, tape: &mut GradTape) -> ResBlockVars {
        ResBlockVars {
            reduce: self.reduce.bind(tape),
            spatial: self.spatial.bind(tape),
            expand: self.expand.bind(tape),
        }
    }

    pub fn apply(
        &self,
        tape: &mut GradTape,
        x: Var,
        vars: &ResBlockVars,
        backend: ConvBackend,
    ) -> Result<Var> {
        let h = self.reduce.apply(tape, x, vars.reduce, backend)?;
        let h = tape.relu(h);
        let h = self.spatial.apply(tape, h, vars.spatial, backend)?;
        let h = tape.relu(h);
        let h = self.expand.apply(tape, h, vars.expand, backend)?;
        tape.add(x, h)
    }

    pub fn forward(&self, input: &Tensor, backend: ConvBackend) -> Result<Tensor> {
        let (_, c) = input.volume_dims()?;
        if c != self.features() {
            return Err(Error::ShapeMismatch(format!(
                "residual block expects {} channels, got {c}",
                self.features()
            )));
        }
        let mut h = self.reduce.forward(input, backend)?;
        h.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let mut h = self.spatial.forward(&h, backend)?;
        h.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        let mut out = self.expand.forward(&h, backend)?;
        out.add_assign(input);
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(6);
        out.extend(self.reduce.params());
        out.extend(self.spatial.params());
        out.extend(self.expand.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(6);
        out.extend(self.reduce.params_mut());
        out.extend(self.spatial.params_mut());
        out.extend(self.expand.params_mut());
        out
    }
}
