//! Two-phase training loop, evaluation harness, and cross-variant weight
//! transplanting.
//!
//! Training runs in two phases: phase 1 samples random square crops (padded
//! up to a multiple of 16), phase 2 continues on full-size frames at a
//! reduced learning rate. All stochastic choices — batch indices and crop
//! windows — come from one `ChaCha8Rng` seeded by the config, so a (seed,
//! config, dataset) triple fully determines the final parameters in serial
//! mode.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{pad_pair_to_16, random_crop_pair, ClassTable, Dataset, LabeledFramePair};
use crate::error::{DataError, TensorError, TrainError};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::models::{build_model, Model, ModelSpec};
use crate::optim::Sgd;
use crate::runtime;
use crate::tape::Tape;
use crate::tensor::{IntTensor, Scalar, Tensor};

/// Hyper-parameters for the two-phase schedule.
///
/// `steps_phase1` steps run on `crop_size`² random crops, then
/// `steps_phase2` steps run on full frames with the learning rate scaled by
/// `phase2_lr_factor`. `eval_every` only controls how often a progress
/// callback fires (0 = never); the returned log always has one row per step.
/// `prior_offset` is carried for bookkeeping so a run's data recipe is
/// recoverable from its config; the loop itself reads priors straight from
/// the dataset items.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub prior_offset: u32,
    pub crop_size: usize,
    pub phase2_lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            steps_phase1: 200,
            steps_phase2: 50,
            seed: 1,
            eval_every: 25,
            prior_offset: 3,
            crop_size: 227,
            phase2_lr_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // Sgd::new re-checks lr/momentum/weight_decay; surface those early.
        Sgd::<f32>::new(self.lr, self.momentum, self.weight_decay)?;
        if self.batch_size == 0 {
            return Err(TrainError::Data(DataError::Invalid(
                "batch_size must be at least 1".into(),
            )));
        }
        if self.crop_size == 0 {
            return Err(TrainError::Data(DataError::Invalid(
                "crop_size must be at least 1".into(),
            )));
        }
        if !(self.phase2_lr_factor > 0.0) || !self.phase2_lr_factor.is_finite() {
            return Err(TrainError::Data(DataError::Invalid(
                "phase2_lr_factor must be positive and finite".into(),
            )));
        }
        Ok(())
    }
}

/// One training step as logged: CSV row `step,phase,loss,lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub phase: u8,
    pub loss: f64,
    pub lr: f64,
}

/// Renders the log in its external CSV form (`step,phase,loss,lr`).
pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("step,phase,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.step, r.phase, r.loss, r.lr));
    }
    out
}

/// Mutable state threaded through training steps, separable from the model
/// so checkpoints can carry it.
pub struct TrainState<S: Scalar> {
    pub optimizer: Sgd<S>,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        Ok(TrainState {
            optimizer: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }
}

/// Trains `model` in place per the config and returns the per-step log.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &dyn Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<TrainLogRow>, TrainError> {
    train_with_progress(model, data, cfg, &mut |_| {})
}

/// `train`, with a callback fired every `cfg.eval_every` steps (and on the
/// final step of each phase) so callers can surface live progress.
pub fn train_with_progress<S: Scalar>(
    model: &mut Model<S>,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    let mut state = TrainState::new(cfg)?;
    let mut log = Vec::with_capacity(cfg.steps_phase1 + cfg.steps_phase2);
    run_phase(model, data, cfg, &mut state, 1, cfg.steps_phase1, &mut log, progress)?;
    run_phase(model, data, cfg, &mut state, 2, cfg.steps_phase2, &mut log, progress)?;
    Ok(log)
}

#[allow(clippy::too_many_arguments)]
fn run_phase<S: Scalar>(
    model: &mut Model<S>,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState<S>,
    phase: u8,
    steps: usize,
    log: &mut Vec<TrainLogRow>,
    progress: &mut dyn FnMut(&TrainLogRow),
) -> Result<(), TrainError> {
    let lr = if phase == 1 {
        cfg.lr
    } else {
        cfg.lr * cfg.phase2_lr_factor
    };
    state.optimizer.set_lr(lr)?;
    for i in 0..steps {
        // Draw the whole batch recipe before touching any item, so the RNG
        // stream depends only on (seed, step schedule), not on data contents.
        let mut picks = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = state.rng.random_range(0..data.len());
            let crop_seed = if phase == 1 { state.rng.random::<u64>() } else { 0 };
            picks.push((idx, crop_seed));
        }
        let mut items = Vec::with_capacity(cfg.batch_size);
        for &(idx, crop_seed) in &picks {
            let item = data.get(idx)?;
            let item = if phase == 1 {
                let (h, w) = item.dims();
                if cfg.crop_size > h.min(w) {
                    return Err(TrainError::Data(DataError::CropTooLarge {
                        crop: cfg.crop_size,
                        h,
                        w,
                    }));
                }
                random_crop_pair(&item, cfg.crop_size, crop_seed)?
            } else {
                pad_pair_to_16(&item)
            };
            items.push(item);
        }
        let loss = train_step(model, &items, state)?;
        state.step += 1;
        if !loss.is_finite() {
            return Err(TrainError::NanLoss {
                step: state.step,
                phase,
            });
        }
        let row = TrainLogRow {
            step: state.step,
            phase,
            loss,
            lr,
        };
        let last = i + 1 == steps;
        if (cfg.eval_every > 0 && (i + 1) % cfg.eval_every == 0) || last {
            progress(&row);
        }
        log.push(row);
    }
    Ok(())
}

/// One optimizer step over an already-materialized batch. Returns the mean
/// cross-entropy over the batch's non-void pixels.
fn train_step<S: Scalar>(
    model: &mut Model<S>,
    items: &[LabeledFramePair],
    state: &mut TrainState<S>,
) -> Result<f64, TrainError> {
    let (x0, x1, labels) = stack_batch::<S>(items, model.spec().variant.uses_prior())?;
    let mut tape = Tape::new();
    let ids = model.bind(&mut tape);
    let image = tape.constant(x1);
    let prior = x0.map(|t| tape.constant(t));
    let logits = model.forward_on_tape(&mut tape, &ids, prior, image)?;
    let (loss_id, _valid) = tape.softmax_cross_entropy(logits, &labels)?;
    let loss = tape.value(loss_id)?.item()?.to_f64();
    let mut grads = tape.backward(loss_id)?;
    let mut by_name = BTreeMap::new();
    for (name, id) in &ids {
        if let Some(g) = grads.take(*id) {
            by_name.insert(name.clone(), g);
        }
    }
    state.optimizer.step(model.params_mut(), &by_name)?;
    Ok(loss)
}

/// Stacks equally-sized items into batch tensors: `[N,3,H,W]` image (and
/// prior when requested) plus `[N,H,W]` labels.
fn stack_batch<S: Scalar>(
    items: &[LabeledFramePair],
    want_prior: bool,
) -> Result<(Option<Tensor<S>>, Tensor<S>, IntTensor), TrainError> {
    let first = items
        .first()
        .ok_or(TrainError::Data(DataError::Empty))?
        .current
        .shape()
        .to_vec();
    for item in items {
        if item.current.shape() != first.as_slice() {
            return Err(TrainError::MixedItemSizes {
                first: first.clone(),
                got: item.current.shape().to_vec(),
            });
        }
    }
    let n = items.len();
    let (c, h, w) = (first[0], first[1], first[2]);
    let mut image = Vec::with_capacity(n * c * h * w);
    let mut prior = if want_prior {
        Vec::with_capacity(n * c * h * w)
    } else {
        Vec::new()
    };
    let mut labels = Vec::with_capacity(n * h * w);
    for item in items {
        image.extend(item.current.data().iter().map(|&v| S::from_f64(v as f64)));
        if want_prior {
            prior.extend(item.prior.data().iter().map(|&v| S::from_f64(v as f64)));
        }
        labels.extend_from_slice(item.labels.data());
    }
    let image = Tensor::new(vec![n, c, h, w], image)?;
    let prior = if want_prior {
        Some(Tensor::new(vec![n, c, h, w], prior)?)
    } else {
        None
    };
    let labels = IntTensor::new(vec![n, h, w], labels)?;
    Ok((prior, image, labels))
}

/// Segments one frame pair: pads to a multiple of 16, runs the forward
/// pass, trims the logits back, and takes the per-pixel argmax over the
/// first `classes` channels (ties break toward the lower index).
pub fn predict_pair<S: Scalar>(
    model: &Model<S>,
    pair: &LabeledFramePair,
    classes: usize,
) -> Result<IntTensor, TrainError> {
    let spec_classes = model.spec().num_classes;
    if spec_classes < classes {
        return Err(TrainError::ClassifierWidthMismatch {
            classifier: spec_classes,
            classes,
        });
    }
    let (h, w) = pair.dims();
    let padded = pad_pair_to_16(pair);
    let dims = padded.current.shape().to_vec();
    let batched = |t: Tensor<f32>| -> Result<Tensor<S>, TensorError> {
        t.cast::<S>().reshape(vec![1, dims[0], dims[1], dims[2]])
    };
    let image = batched(padded.current)?;
    let prior = if model.spec().variant.uses_prior() {
        Some(batched(padded.prior)?)
    } else {
        None
    };
    let logits = model.forward(prior.as_ref(), &image)?;
    let (_, _, ph, pw) = logits.dims4("predict logits")?;
    let data = logits.data();
    let mut pred = vec![0u8; h * w];
    for r in 0..h {
        for cidx in 0..w {
            let mut best = 0usize;
            let mut best_v = data[r * pw + cidx];
            for ch in 1..classes {
                let v = data[(ch * ph + r) * pw + cidx];
                if v > best_v {
                    best_v = v;
                    best = ch;
                }
            }
            pred[r * w + cidx] = best as u8;
        }
    }
    Ok(IntTensor::new(vec![h, w], pred)?)
}

/// Runs the model over every dataset item and folds the pixel outcomes into
/// one report. Items may be sharded across workers; confusion-matrix merges
/// are integer additions, so the result never depends on the schedule.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &dyn Dataset,
    table: &ClassTable,
) -> Result<MetricsReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Data(DataError::Empty));
    }
    if model.spec().num_classes < table.len() {
        return Err(TrainError::ClassifierWidthMismatch {
            classifier: model.spec().num_classes,
            classes: table.len(),
        });
    }
    let per_item = |i: usize| -> Result<ConfusionMatrix, TrainError> {
        let pair = data.get(i)?;
        let pred = predict_pair(model, &pair, table.len())?;
        let mut cm = ConfusionMatrix::new(table.len());
        cm.update(&pred, &pair.labels)?;
        Ok(cm)
    };
    let partials: Vec<Result<ConfusionMatrix, TrainError>> = match runtime::pool() {
        Some(p) => p.install(|| {
            use rayon::prelude::*;
            (0..data.len()).into_par_iter().map(per_item).collect()
        }),
        None => (0..data.len()).map(per_item).collect(),
    };
    let mut cm = ConfusionMatrix::new(table.len());
    for part in partials {
        cm.merge(&part?)?;
    }
    MetricsReport::from_matrix(&cm, table.names(), &table.dynamic_flags())
}

/// Which parameters `finetune_from` copied verbatim, which it re-initialized
/// fresh, and which it widened from a narrower donor tensor.
#[derive(Debug, Clone, Default)]
pub struct FinetuneReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
    pub widened: Vec<String>,
    pub dropped: Vec<String>,
}

/// Builds a `target_spec` model that inherits every shape-compatible
/// parameter from `donor`; everything the donor lacks (fusion modules, the
/// widened first conv) starts from the seed's fresh initialization.
///
/// The one tolerated shape difference is the first encoder conv gaining
/// input channels: the donor's kernel slices are copied into the trailing
/// (image) channel slots and the new leading (prior) slots are zeroed, so a
/// freshly widened model reproduces the donor's logits until training moves
/// the zeros.
pub fn finetune_from<S: Scalar>(
    donor: &Model<S>,
    target_spec: &ModelSpec,
    seed: u64,
) -> Result<(Model<S>, FinetuneReport), TrainError> {
    let mut target = build_model::<S>(target_spec, seed)?;
    let mut report = FinetuneReport::default();
    for (name, dst) in target.params_mut().iter_mut() {
        let Some(src) = donor.param(name) else {
            report.fresh.push(name.clone());
            continue;
        };
        if src.shape() == dst.shape() {
            *dst = src.clone();
            report.copied.push(name.clone());
        } else if name == "enc1.weight" && widenable(src.shape(), dst.shape()) {
            *dst = widen_first_conv(src, dst.shape()[1]);
            report.widened.push(name.clone());
        } else {
            return Err(TrainError::ShapeConflict {
                name: name.clone(),
                donor: src.shape().to_vec(),
                target: dst.shape().to_vec(),
            });
        }
    }
    for name in donor.params().keys() {
        if target.param(name).is_none() {
            report.dropped.push(name.clone());
        }
    }
    Ok((target, report))
}

/// True when the only difference is the input-channel dim doubling.
fn widenable(src: &[usize], dst: &[usize]) -> bool {
    src.len() == 4
        && dst.len() == 4
        && src[0] == dst[0]
        && dst[1] == 2 * src[1]
        && src[2] == dst[2]
        && src[3] == dst[3]
}

/// Zero tensor of the widened shape with `src` occupying the trailing
/// `src_cin` input-channel slots — the image half of a prior+image stack.
fn widen_first_conv<S: Scalar>(src: &Tensor<S>, dst_cin: usize) -> Tensor<S> {
    let (co, ci, kh, kw) = (
        src.shape()[0],
        src.shape()[1],
        src.shape()[2],
        src.shape()[3],
    );
    let mut out = Tensor::zeros(&[co, dst_cin, kh, kw]);
    let k2 = kh * kw;
    for o in 0..co {
        for c in 0..ci {
            let s = (o * ci + c) * k2;
            let d = (o * dst_cin + (dst_cin - ci) + c) * k2;
            out.data_mut()[d..d + k2].copy_from_slice(&src.data()[s..s + k2]);
        }
    }
    out
}
