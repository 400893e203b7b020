//! Independent per-model training with Adam on binary cross-entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::{build_pyramid, extract_group, BlockPyramid, VoxelBlock};
use crate::error::{Error, Result};
use crate::tensor::{adam_step, AdamConfig, AdamState, ConvBackend, GradTape, Tensor, Var};

use super::{group_context, LayerStack, ModelBundle};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    /// Mini-batch size for models whose level edge is 64 or more.
    pub batch_full: usize,
    /// Mini-batch size for every other model.
    pub batch_other: usize,
    pub seed: u64,
    /// Caps the samples each model sees per epoch (a fresh random subset
    /// every epoch).
    pub max_samples: Option<usize>,
    /// Start each output bias at the log-odds of the mean occupancy of that
    /// model's targets.
    pub prior_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 100,
            batch_full: 32,
            batch_other: 64,
            seed: 0,
            max_samples: None,
            prior_bias: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_for_edge(&self, level_edge: usize) -> usize {
        if level_edge >= 64 {
            self.batch_full
        } else {
            self.batch_other
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_full == 0 || self.batch_other == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch sizes must be positive".into(),
            ));
        }
        if self.max_samples == Some(0) {
            return Err(Error::InvalidConfig("max_samples must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Mean training loss per epoch, in bits per voxel, for every model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub models: Vec<(String, Vec<f64>)>,
}

impl LossCurve {
    /// Mean over models of their last-epoch loss.
    pub fn final_loss(&self) -> f64 {
        let last: Vec<f64> = self
            .models
            .iter()
            .filter_map(|(_, c)| c.last().copied())
            .collect();
        last.iter().sum::<f64>() / last.len().max(1) as f64
    }

    /// One `model epoch bits_per_voxel` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# model epoch bits_per_voxel\n");
        for (name, curve) in &self.models {
            for (e, v) in curve.iter().enumerate() {
                out.push_str(&format!("{name} {} {v:.6}\n", e + 1));
            }
        }
        out
    }
}

/// Context and target volumes for one training example.
type Sample = (Tensor, Tensor);

fn group_sample(pyr: &BlockPyramid, scale: usize, group: u8) -> Result<Sample> {
    let level = &pyr.levels()[scale];
    let lower = &pyr.levels()[scale - 1];
    let previous = (1..group)
        .map(|g| extract_group(level, g))
        .collect::<Result<Vec<_>>>()?;
    let ctx = group_context(lower, &previous, group)?;
    let target = extract_group(level, group)?;
    let d = target.dims();
    let t = Tensor::from_vec(
        &[d[0], d[1], d[2], 1],
        target.bits.iter().map(|&b| b as f32).collect(),
    )?;
    Ok((ctx, t))
}

fn logit(p: f64) -> f32 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln() as f32
}

struct Job<'a> {
    name: String,
    seed: u64,
    batch: usize,
    samples: &'a (dyn Fn(usize) -> Result<Sample> + Sync),
}

fn train_one<M: LayerStack>(
    model: &mut M,
    job: &Job<'_>,
    count: usize,
    cfg: &TrainConfig,
    forward: impl Fn(&M, &mut GradTape, Var) -> Result<Var>,
    set_bias: impl Fn(&mut M, f32),
) -> Result<Vec<f64>> {
    if cfg.prior_bias {
        let mut ones = 0.0;
        let mut total = 0.0;
        for i in 0..count {
            let (_, t) = (job.samples)(i)?;
            ones += t.data().iter().map(|&v| v as f64).sum::<f64>();
            total += t.len() as f64;
        }
        set_bias(model, logit(ones / total));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(model.params_mut().into_iter().map(|t| &*t));
    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
    let mut order: Vec<usize> = (0..count).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let take = cfg.max_samples.unwrap_or(count).min(count);
        let mut epoch_loss = 0.0;
        for batch in order[..take].chunks(job.batch) {
            let mut sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (ctx, target) = (job.samples)(i)?;
                let mut tape = GradTape::new();
                let x = tape.constant(ctx);
                let z = forward(model, &mut tape, x)?;
                let loss = tape.bce_with_logits(z, &target)?;
                epoch_loss += tape.value(loss).data()[0] as f64 / std::f64::consts::LN_2;
                let grads = tape.backward(loss)?.param_grads(&tape);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc
                        .iter_mut()
                        .zip(&grads)
                        .for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            grads.iter_mut().for_each(|g| g.scale(scale));
            adam_step(&mut model.params_mut(), &grads, &mut state, &adam)?;
        }
        let mean = epoch_loss / take as f64;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        log::info!("{} epoch {} loss {mean:.4} bits/voxel", job.name, epoch + 1);
        curve.push(mean);
    }
    Ok(curve)
}

/// Trains every model of `bundle` on `blocks` (each of the bundle's block
/// edge). Models are independent and train concurrently; results do not
/// depend on scheduling.
pub fn train(
    mut bundle: ModelBundle,
    cfg: &TrainConfig,
    blocks: &[VoxelBlock],
) -> Result<(ModelBundle, LossCurve)> {
    cfg.validate()?;
    if blocks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let codec = bundle.codec;
    let pyramids = blocks
        .iter()
        .map(|b| {
            if b.dims() != [codec.block_edge(); 3] {
                return Err(Error::ShapeMismatch(format!(
                    "training block {:?}, bundle needs edge {}",
                    b.dims(),
                    codec.block_edge()
                )));
            }
            build_pyramid(b, codec.num_scales)
        })
        .collect::<Result<Vec<_>>>()?;
    let names = bundle.model_names();

    let base_samples = |i: usize| -> Result<Sample> {
        let t = pyramids[i].levels()[0].to_tensor();
        Ok((t.clone(), t))
    };
    let base_job = Job {
        name: names[0].clone(),
        seed: cfg.seed,
        batch: cfg.batch_for_edge(codec.base_edge),
        samples: &base_samples,
    };
    let base_curve = train_one(
        bundle.base_mut(),
        &base_job,
        pyramids.len(),
        cfg,
        |m, tape, x| m.logits_on_tape(tape, x, ConvBackend::Gemm),
        |m, b| {
            let out = m.convs_mut().pop().expect("output layer");
            out.bias.data_mut()[0] = b;
        },
    )?;

    let mut slots: Vec<(usize, u8)> = Vec::new();
    for scale in 1..=codec.num_scales {
        for g in 1..=8 {
            slots.push((scale, g));
        }
    }
    let mut predictors: Vec<_> = slots
        .iter()
        .map(|&(s, g)| bundle.group(s, g).cloned())
        .collect::<Result<_>>()?;
    let curves = predictors
        .par_iter_mut()
        .zip(slots.par_iter())
        .enumerate()
        .map(|(k, (pred, &(scale, g)))| {
            let samples = |i: usize| group_sample(&pyramids[i], scale, g);
            let job = Job {
                name: names[k + 1].clone(),
                seed: cfg
                    .seed
                    .wrapping_add(1 + k as u64)
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15),
                batch: cfg.batch_for_edge(codec.scale_edge(scale)),
                samples: &samples,
            };
            train_one(
                pred,
                &job,
                pyramids.len(),
                cfg,
                |m, tape, x| m.logits_on_tape(tape, x, ConvBackend::Gemm),
                |m, b| *m.output_bias_mut() = b,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    for (pred, &(s, g)) in predictors.into_iter().zip(&slots) {
        *bundle.group_mut(s, g)? = pred;
    }

    let mut curve = LossCurve::default();
    curve.models.push((names[0].clone(), base_curve));
    curve.models.extend(names[1..].iter().cloned().zip(curves));

    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("lr".into(), cfg.lr.to_string());
    meta.insert("epochs".into(), cfg.epochs.to_string());
    meta.insert("batch_full".into(), cfg.batch_full.to_string());
    meta.insert("batch_other".into(), cfg.batch_other.to_string());
    meta.insert("blocks".into(), blocks.len().to_string());
    if let Some(m) = cfg.max_samples {
        meta.insert("max_samples".into(), m.to_string());
    }
    meta.insert("prior_bias".into(), cfg.prior_bias.to_string());
    meta.insert(
        "final_loss_bits".into(),
        format!("{:.6}", curve.final_loss()),
    );
    bundle.meta = meta;
    Ok((bundle, curve))
}
