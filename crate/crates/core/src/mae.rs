//! Masked-autoencoder training: random patch masks, encode the visible
//! patches, decode all of them and regress pixels.

use rand::seq::SliceRandom;

use crate::data::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::nets::vit::patchify;
use crate::nets::{Bound, MaeModel, ParamSet};
use crate::rng::Rng;
use crate::tensor::{CosineSchedule, Optimizer, Tape, Tensor, Var};

/// Visible/masked split of the `N` patches of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub patches: usize,
    /// Sorted.
    pub visible: Vec<usize>,
    /// Sorted complement of `visible`.
    pub masked: Vec<usize>,
    pub ratio: f64,
}

/// Number of masked patches for ratio `r`: `round(r·N)`.
pub fn masked_count(patches: usize, ratio: f64) -> usize {
    (ratio * patches as f64).round() as usize
}

/// Masks a uniformly random subset of exactly `round(r·N)` patches.
pub fn make_mask(patches: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    let masked_n = masked_count(patches, ratio);
    if !(ratio > 0.0 && ratio < 1.0) || patches < 2 || masked_n == 0 || masked_n >= patches {
        return Err(Error::DegenerateMask {
            ratio,
            masked: masked_n.min(patches),
            patches,
        });
    }
    let mut order: Vec<usize> = (0..patches).collect();
    order.shuffle(rng);
    let mut masked = order[..masked_n].to_vec();
    let mut visible = order[masked_n..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        patches,
        visible,
        masked,
        ratio,
    })
}

/// Which pixels the reconstruction loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossScope {
    /// Every pixel of the image.
    Full,
    /// Pixels of masked patches only.
    Masked,
}

impl LossScope {
    pub fn name(self) -> &'static str {
        match self {
            LossScope::Full => "full",
            LossScope::Masked => "masked",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "full" => Some(LossScope::Full),
            "masked" => Some(LossScope::Masked),
            _ => None,
        }
    }
}

/// Mean squared error between `recon` and `target`, both `(B·N, P²·C)`.
pub fn reconstruction_loss(tape: &mut Tape, recon: Var, target: Var, plans: &[MaskPlan], scope: LossScope) -> Result<Var> {
    match scope {
        LossScope::Full => tape.mse(recon, target),
        LossScope::Masked => {
            let mut rows = Vec::new();
            for (b, plan) in plans.iter().enumerate() {
                rows.extend(plan.masked.iter().map(|&i| b * plan.patches + i));
            }
            if rows.is_empty() {
                let p = plans.first().map_or(0, |p| p.patches);
                return Err(Error::DegenerateMask {
                    ratio: plans.first().map_or(0.0, |p| p.ratio),
                    masked: 0,
                    patches: p,
                });
            }
            let r = tape.gather_rows(recon, &rows)?;
            let t = tape.gather_rows(target, &rows)?;
            tape.mse(r, t)
        }
    }
}

/// Loss node plus what the encoder was given, for instrumentation.
#[derive(Debug, Clone)]
pub struct MaeForward {
    pub loss: Var,
    pub recon: Var,
    /// Patch indices handed to the encoder, per image.
    pub encoder_indices: Vec<Vec<usize>>,
}

/// Reconstruction loss of `images (B, C, H, W)` under the given masks.
pub fn mae_loss(model: &MaeModel, tape: &mut Tape, p: &Bound, images: &Tensor, plans: &[MaskPlan], scope: LossScope) -> Result<MaeForward> {
    let patches = patchify(images, model.cfg.patch)?;
    let (b, n, pd) = (patches.shape()[0], patches.shape()[1], patches.shape()[2]);
    if plans.len() != b || plans.iter().any(|pl| pl.patches != n) {
        return Err(Error::shape("mae_loss", &[b, n], &[plans.len(), plans.first().map_or(0, |p| p.patches)]));
    }
    let flat = patches.reshape(&[b * n, pd])?;
    let v = plans[0].visible.len();
    let mut vis = Vec::with_capacity(b * v * pd);
    for (bi, plan) in plans.iter().enumerate() {
        for &i in &plan.visible {
            vis.extend_from_slice(flat.row(bi * n + i));
        }
    }
    let indices: Vec<Vec<usize>> = plans.iter().map(|pl| pl.visible.clone()).collect();
    let x = if vis.is_empty() {
        tape.constant(Tensor::zeros(&[1, pd]))
    } else {
        tape.constant(Tensor::new(vec![b * v, pd], vis)?)
    };
    let enc = model.encode(tape, p, x, &indices)?;
    let recon = model.decode(tape, p, &enc, &indices)?;
    let target = tape.constant(flat);
    let loss = reconstruction_loss(tape, recon, target, plans, scope)?;
    Ok(MaeForward {
        loss,
        recon,
        encoder_indices: indices,
    })
}

/// Settings for local MAE training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeTrainConfig {
    pub mask_ratio: f64,
    pub scope: LossScope,
    pub batch: usize,
    pub augment: AugmentConfig,
}

impl Default for MaeTrainConfig {
    fn default() -> Self {
        MaeTrainConfig {
            mask_ratio: 0.75,
            scope: LossScope::Full,
            batch: 16,
            augment: AugmentConfig::mae(),
        }
    }
}

/// Random streams used by local training.
#[derive(Debug, Clone)]
pub struct LocalStreams {
    pub shuffle: Rng,
    pub augment: Rng,
    pub masks: Rng,
}

/// Batches of a shuffled epoch over `n` samples; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// One optimizer step on a batch. Returns the loss before the update.
pub fn mae_step(model: &MaeModel, params: &mut ParamSet, images: &Tensor, cfg: &MaeTrainConfig, opt: &mut Optimizer, masks: &mut Rng) -> Result<f64> {
    let b = images.shape()[0];
    let n = model.cfg.num_patches();
    let plans = (0..b).map(|_| make_mask(n, cfg.mask_ratio, masks)).collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, true);
    let fwd = mae_loss(model, &mut tape, &p, images, &plans, cfg.scope)?;
    debug_assert!(fwd.encoder_indices.iter().zip(&plans).all(|(a, pl)| *a == pl.visible));
    let value = tape.value(fwd.loss).data()[0];
    tape.backward(fwd.loss)?;
    let mut grads = p.grads(&tape);
    grads.fill_missing(params);
    opt.step(params, &grads)?;
    Ok(value)
}

/// `epochs` passes over `images` with fresh masks per image per pass.
/// `step` is the global step counter used by the schedule and is advanced.
#[allow(clippy::too_many_arguments)]
pub fn mae_local_epochs(
    model: &MaeModel,
    params: &mut ParamSet,
    images: &Tensor,
    epochs: usize,
    cfg: &MaeTrainConfig,
    opt: &mut Optimizer,
    schedule: &CosineSchedule,
    step: &mut u64,
    rngs: &mut LocalStreams,
) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    let mut trace = Vec::new();
    for _ in 0..epochs {
        for idx in epoch_batches(n, cfg.batch, &mut rngs.shuffle) {
            let batch = gather(images, &idx);
            let batch = data::augment_batch(&batch, &cfg.augment, &mut rngs.augment);
            opt.lr = schedule.at(*step);
            trace.push(mae_step(model, params, &batch, cfg, opt, &mut rngs.masks)?);
            *step += 1;
        }
    }
    Ok(trace)
}

/// Rows `idx` of a batch tensor.
pub fn gather(images: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("nonempty index list")
}
