use crate::blocks::{extract_patch, insert_patch};
use crate::error::{Error, Result};

use super::conv::{conv3d, conv3d_backward, ConvBackend, ConvGeometry};
use super::{relu, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Relu(Var),
    Add(Var, Var),
    Patch {
        x: Var,
        patches: usize,
        index: usize,
    },
    Merge {
        parts: Vec<Var>,
        patches: usize,
    },
    Bce {
        logits: Var,
        target: Tensor,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be pulled back through it.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf. Parameters are remembered in registration order,
    /// which is the order [`Gradients::param_grads`] reports them in.
    pub fn param(&mut self, value: &Tensor) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeometry,
        backend: ConvBackend,
    ) -> Result<Var> {
        let out = conv3d(self.value(x), geom, self.value(w), self.value(b), backend)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        let op = Op::Conv {
            x,
            w,
            b,
            geom: geom.clone(),
        };
        Ok(self.push(out, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = relu(*v);
        }
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Contiguous octant split of a volume into `patches³` sub-volumes.
    pub fn split_patches(&mut self, x: Var, patches: usize) -> Result<Vec<Var>> {
        let count = patches * patches * patches;
        let mut out = Vec::with_capacity(count);
        for index in 0..count {
            let part = extract_patch(self.value(x), patches, index)?;
            let rg = self.needs(x);
            out.push(self.push(part, Op::Patch { x, patches, index }, rg));
        }
        Ok(out)
    }

    pub fn merge_patches(&mut self, parts: &[Var], patches: usize) -> Result<Var> {
        let count = patches * patches * patches;
        if parts.len() != count {
            return Err(Error::ShapeMismatch(format!(
                "merge expects {count} patches, got {}",
                parts.len()
            )));
        }
        let (pdims, c) = self.value(parts[0]).volume_dims()?;
        let mut out = Tensor::zeros(&[
            pdims[0] * patches,
            pdims[1] * patches,
            pdims[2] * patches,
            c,
        ]);
        for (index, part) in parts.iter().enumerate() {
            insert_patch(&mut out, self.value(*part), patches, index, false)?;
        }
        let rg = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            out,
            Op::Merge {
                parts: parts.to_vec(),
                patches,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy (in nats) between `sigmoid(logits)` and
    /// 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != target.len() || z.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "bce logits {:?} vs target {:?}",
                z.shape(),
                target.shape()
            )));
        }
        let total: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &t)| {
                let z = z as f64;
                z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let loss = (total / z.len() as f64) as f32;
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// `sum(x * weights)`; handy as a probe loss for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::ShapeMismatch("weighted_sum".into()));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let rg = self.needs(x);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be a scalar, got {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, geom } => {
                    let (gx, gw, gb) =
                        conv3d_backward(self.value(*x), geom, self.value(*w), &g, self.needs(*x))?;
                    if let Some(gx) = gx {
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, gw);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g.clone();
                    for (d, out) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if *out <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Patch { x, patches, index } => {
                    let slot = &mut grads[x.0];
                    let target =
                        slot.get_or_insert_with(|| Tensor::zeros(self.nodes[x.0].value.shape()));
                    insert_patch(target, &g, *patches, *index, true)?;
                }
                Op::Merge { parts, patches } => {
                    for (index, part) in parts.iter().enumerate() {
                        if self.needs(*part) {
                            accumulate(&mut grads, *part, extract_patch(&g, *patches, index)?);
                        }
                    }
                }
                Op::Bce { logits, target } => {
                    let z = self.value(*logits);
                    let scale = g.data()[0] / z.len() as f32;
                    let data = z
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&z, &t)| (1.0 / (1.0 + (-z).exp()) - t) * scale)
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::from_vec(z.shape(), data)?);
                }
                Op::WeightedSum { x, weights } => {
                    let mut gx = weights.clone();
                    gx.scale(g.data()[0]);
                    accumulate(&mut grads, *x, gx);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every registered parameter, in registration order.
    /// Parameters the loss does not depend on get zeros.
    pub fn param_grads(&self, tape: &GradTape) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|v| {
                self.get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_relu_gradients() {
        let mut tape = GradTape::new();
        let a = tape.param(&Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let b = tape.param(&Tensor::from_vec(&[3], vec![0.5, 1.0, -1.0]).unwrap());
        let s = tape.add(a, b).unwrap();
        let r = tape.relu(s);
        let loss = tape
            .weighted_sum(r, &Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(tape.value(loss).data(), &[1.5]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 0.0, 0.0]);
        assert_eq!(grads.param_grads(&tape).len(), 2);
    }

    #[test]
    fn reused_var_accumulates() {
        let mut tape = GradTape::new();
        let a = tape.param(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let s = tape.add(a, a).unwrap();
        let loss = tape.weighted_sum(s, &Tensor::full(&[2], 1.0)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn bce_value_and_gradient() {
        let mut tape = GradTape::new();
        let z = tape.param(&Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap());
        let target = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let loss = tape.bce_with_logits(z, &target).unwrap();
        let expected = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((tape.value(loss).data()[0] as f64 - expected).abs() < 1e-6);
        let g = tape.backward(loss).unwrap();
        let s2 = 1.0 / (1.0 + (-2.0f32).exp());
        let gz = g.get(z).unwrap().data();
        assert!((gz[0] - (0.5 - 1.0) / 2.0).abs() < 1e-6);
        assert!((gz[1] - s2 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut tape = GradTape::new();
        let a = tape.param(&Tensor::from_vec(&[1], vec![f32::NAN]).unwrap());
        let loss = tape.weighted_sum(a, &Tensor::full(&[1], 1.0)).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::NonFiniteLoss)));
    }
}
