//! Multi-task triplet training of independent photo and sketch encoders.
//!
//! One optimizer step runs every image through its own small tape (in
//! parallel), assembles the batch loss on a separate tape over the resulting
//! embedding and logit rows, and pushes the row gradients back through each
//! image tape. Per-image parameter gradients are summed in slot order, so a
//! run is bit-reproducible regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Tensor, Var};
use crate::dataset::Dataset;
use crate::encoders::{EmbeddingPool, Encoder, EncoderConfig, EncoderOutput};
use crate::error::{ConfigError, Error, Result, TensorError};
use crate::sampling::{sample_batch, BatchImages, BatchSpec, Strategy, TripletBatch};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub classification_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 3.0,
            classification_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(ConfigError::invalid("margin", "must be positive"));
        }
        if !(self.classification_weight.is_finite() && self.classification_weight >= 0.0) {
            return Err(ConfigError::invalid("classification_weight", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub initial_lr: f64,
    /// First epoch (0-based) trained at `dropped_lr`.
    pub drop_epoch: usize,
    pub dropped_lr: f64,
    pub finetune_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            initial_lr: 1e-4,
            drop_epoch: 30,
            dropped_lr: 1e-5,
            finetune_lr: 1e-6,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.drop_epoch >= self.epochs {
            return Err(ConfigError::invalid("drop_epoch", "must be below epochs"));
        }
        let lrs = [self.initial_lr, self.dropped_lr, self.finetune_lr];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(ConfigError::invalid("learning rates", "must be positive"));
        }
        if !(self.initial_lr > self.dropped_lr && self.dropped_lr > self.finetune_lr) {
            return Err(ConfigError::invalid("learning rates", "must strictly decrease"));
        }
        self.validate_finetune()
    }

    /// Checks only what a finetuning run uses; a zero finetune rate is allowed.
    pub fn validate_finetune(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::invalid("epochs", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(ConfigError::invalid("batch_size", "must be at least 2"));
        }
        if !(self.finetune_lr.is_finite() && self.finetune_lr >= 0.0) {
            return Err(ConfigError::invalid("finetune_lr", "must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.drop_epoch {
            self.initial_lr
        } else {
            self.dropped_lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of epochs trained so far, across phases.
    pub epoch: usize,
    pub phase: Phase,
    pub strategy: Strategy,
    pub lr: f64,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub triplet_loss: f64,
    pub classification_loss: f64,
    /// Mean fraction of triplets with a positive hinge.
    pub active_fraction: f64,
    /// Loss of the epoch's first step, before its update.
    pub first_step_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub photo: Encoder,
    pub sketch: Encoder,
    pub photo_optimizer: AdamState,
    pub sketch_optimizer: AdamState,
    pub loss: LossConfig,
    pub schedule: TrainSchedule,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    /// Fresh encoders, initialized from independent streams of `schedule.seed`.
    pub fn init(photo: EncoderConfig, sketch: EncoderConfig, loss: LossConfig, schedule: TrainSchedule) -> Result<Self> {
        let photo = Encoder::init(photo, seeds::derive_seed(schedule.seed, &[10]))?;
        let sketch = Encoder::init(sketch, seeds::derive_seed(schedule.seed, &[11]))?;
        if photo.config.embedding_dim() != sketch.config.embedding_dim() {
            return Err(ConfigError::invalid("encoders", "photo and sketch embedding dimensions differ").into());
        }
        Ok(Self {
            photo_optimizer: AdamState::new(photo.params.sizes()),
            sketch_optimizer: AdamState::new(sketch.params.sizes()),
            photo,
            sketch,
            loss,
            schedule,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Same weights with a different embedding pooling head on both CNN encoders.
    pub fn with_embedding_pool(&self, pool: EmbeddingPool) -> Result<Self> {
        let mut out = self.clone();
        for enc in [&mut out.photo, &mut out.sketch] {
            match &mut enc.config {
                EncoderConfig::Cnn(c) => c.embedding_pool = pool,
                EncoderConfig::Vit(_) => {
                    return Err(ConfigError::invalid("embedding_pool", "only convolutional encoders have a pooling head").into())
                }
            }
            enc.config.validate()?;
        }
        Ok(out)
    }

    pub fn embedding_dim(&self) -> usize {
        self.photo.config.embedding_dim()
    }

    /// Errors unless the dataset's rasters and labels fit both encoders.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let shape = ds.image_shape().ok_or_else(|| Error::Mismatch("dataset is empty".into()))?;
        for (name, enc) in [("photo", &self.photo), ("sketch", &self.sketch)] {
            if shape != enc.config.input_shape() {
                return Err(Error::Mismatch(format!(
                    "{name} encoder expects {:?} images, dataset has {shape:?}",
                    enc.config.input_shape()
                )));
            }
            if ds.index.num_categories() != enc.config.num_classes() {
                return Err(Error::Mismatch(format!(
                    "{name} encoder has {} classes, dataset has {} categories",
                    enc.config.num_classes(),
                    ds.index.num_categories()
                )));
            }
        }
        Ok(())
    }
}

/// Row indices of each triplet into the anchor matrix and the sketch matrix
/// (positives in rows `0..B`, negatives in rows `B..2B`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletIndex {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl TripletIndex {
    /// One triplet per slot, plus for every flip twin `(i, j)` the triplets
    /// `(aᵢ, pᵢ, pⱼ)` and `(aⱼ, pⱼ, pᵢ)`: a view's own mirror image serves as
    /// a negative.
    pub fn from_batch(batch: &TripletBatch) -> Self {
        let b = batch.len();
        let mut idx = Self {
            anchor: (0..b).collect(),
            positive: (0..b).collect(),
            negative: (b..2 * b).collect(),
        };
        for &(i, j) in &batch.twins {
            idx.anchor.extend([i, j]);
            idx.positive.extend([i, j]);
            idx.negative.extend([j, i]);
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }
}

/// Plain per-triplet hinge `[‖a−p‖² − ‖a−n‖² + α]₊`.
pub fn triplet_term(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    (d(a, p) - d(a, n) + margin).max(0.0)
}

fn squared_row_distance(tape: &mut Tape, x: Var, y: Var) -> Result<Var, TensorError> {
    let d = tape.sub(x, y)?;
    let d2 = tape.mul(d, d)?;
    Ok(tape.sum_rows(d2))
}

/// Mean hinge over rows of `[B×D]` anchor, positive, and negative embeddings.
pub fn triplet_loss(tape: &mut Tape, anchor: Var, positive: Var, negative: Var, margin: f64) -> Result<Var, TensorError> {
    let shape = tape.shape(anchor).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::invalid("triplet_loss", "embeddings must be [batch, dim]"));
    }
    for other in [positive, negative] {
        if tape.shape(other) != shape.as_slice() {
            return Err(TensorError::mismatch("triplet_loss", &shape, tape.shape(other)));
        }
    }
    let dp = squared_row_distance(tape, anchor, positive)?;
    let dn = squared_row_distance(tape, anchor, negative)?;
    let gap = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// `triplet + λ·(CE(photo) + CE(sketch))/2`.
pub fn multitask_loss(
    tape: &mut Tape,
    triplet: Var,
    photo_logits: Var,
    sketch_logits: Var,
    labels: &[usize],
    weight: f64,
) -> Result<Var, TensorError> {
    let ce = classification_loss(tape, photo_logits, sketch_logits, labels)?;
    let weighted = tape.scale(ce, weight);
    tape.add(triplet, weighted)
}

fn classification_loss(tape: &mut Tape, photo_logits: Var, sketch_logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let cp = tape.cross_entropy(photo_logits, labels)?;
    let cs = tape.cross_entropy(sketch_logits, labels)?;
    let both = tape.add(cp, cs)?;
    Ok(tape.scale(both, 0.5))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub triplet: f64,
    pub classification: f64,
    pub active_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub stats: StepStats,
    pub photo_grads: Vec<Vec<f64>>,
    pub sketch_grads: Vec<Vec<f64>>,
}

struct HeadTape {
    tape: Tape,
    photo_emb: Var,
    photo_logits: Var,
    sketch_emb: Var,
    sketch_logits: Var,
    total: Var,
    stats: StepStats,
}

fn matrix(rows: &[&[f64]]) -> Result<Tensor, TensorError> {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor::new(vec![rows.len(), cols], rows.iter().flat_map(|r| r.iter().copied()).collect())
}

/// The batch loss on a tape whose leaves are the per-image encoder outputs.
fn head_tape(
    photo: &[EncoderOutput],
    sketch: &[EncoderOutput],
    labels: &[usize],
    triplets: &TripletIndex,
    cfg: &LossConfig,
) -> Result<HeadTape, TensorError> {
    let b = photo.len();
    if sketch.len() != 2 * b || labels.len() != b {
        return Err(TensorError::invalid("batch loss", "need B photos, 2B sketches, and B labels"));
    }
    fn rows(outs: &[EncoderOutput], f: fn(&EncoderOutput) -> &[f64]) -> Vec<&[f64]> {
        outs.iter().map(f).collect()
    }
    let mut tape = Tape::new();
    let photo_emb = tape.leaf(matrix(&rows(photo, |o| &o.embedding))?);
    let photo_logits = tape.leaf(matrix(&rows(photo, |o| &o.logits))?);
    let sketch_emb = tape.leaf(matrix(&rows(sketch, |o| &o.embedding))?);
    let sketch_logits = tape.leaf(matrix(&rows(sketch, |o| &o.logits))?);

    let a = tape.gather_rows(photo_emb, &triplets.anchor)?;
    let p = tape.gather_rows(sketch_emb, &triplets.positive)?;
    let n = tape.gather_rows(sketch_emb, &triplets.negative)?;
    let triplet = triplet_loss(&mut tape, a, p, n, cfg.margin)?;
    let positive_logits = tape.slice_rows(sketch_logits, 0, b)?;
    let ce = classification_loss(&mut tape, photo_logits, positive_logits, labels)?;
    let weighted = tape.scale(ce, cfg.classification_weight);
    let total = tape.add(triplet, weighted)?;

    let (av, pv, nv) = (tape.value(a).data(), tape.value(p).data(), tape.value(n).data());
    let dim = tape.shape(a)[1];
    let active = (0..triplets.len())
        .filter(|&t| {
            let r = t * dim..(t + 1) * dim;
            triplet_term(&av[r.clone()], &pv[r.clone()], &nv[r], cfg.margin) > 0.0
        })
        .count();
    let stats = StepStats {
        loss: tape.value(total).data()[0],
        triplet: tape.value(triplet).data()[0],
        classification: tape.value(ce).data()[0],
        active_fraction: active as f64 / triplets.len() as f64,
    };
    Ok(HeadTape {
        tape,
        photo_emb,
        photo_logits,
        sketch_emb,
        sketch_logits,
        total,
        stats,
    })
}

/// Loss of one batch without gradients.
pub fn batch_loss(
    photo: &Encoder,
    sketch: &Encoder,
    images: &BatchImages,
    labels: &[usize],
    triplets: &TripletIndex,
    cfg: &LossConfig,
) -> Result<StepStats> {
    let encode = |enc: &Encoder, imgs: &[Tensor]| -> Result<Vec<EncoderOutput>, TensorError> {
        imgs.par_iter().map(|im| enc.encode(im)).collect()
    };
    let photo_out = encode(photo, &images.anchors)?;
    let sketch_imgs: Vec<Tensor> = images.positives.iter().chain(&images.negatives).cloned().collect();
    let sketch_out = encode(sketch, &sketch_imgs)?;
    Ok(head_tape(&photo_out, &sketch_out, labels, triplets, cfg)?.stats)
}

struct ImageRun {
    tape: Tape,
    params: Vec<Var>,
    embedding: Var,
    logits: Var,
}

fn forward_all(enc: &Encoder, images: &[&Tensor]) -> Result<Vec<ImageRun>, TensorError> {
    images
        .par_iter()
        .map(|im| {
            let mut tape = Tape::new();
            let (params, out) = enc.forward_tape(&mut tape, im)?;
            Ok(ImageRun {
                tape,
                params,
                embedding: out.embedding,
                logits: out.logits,
            })
        })
        .collect()
}

fn outputs(runs: &[ImageRun]) -> Vec<EncoderOutput> {
    runs.iter()
        .map(|r| EncoderOutput {
            embedding: r.tape.value(r.embedding).data().to_vec(),
            logits: r.tape.value(r.logits).data().to_vec(),
        })
        .collect()
}

/// Sum over images of the parameter gradients, seeded with each image's
/// upstream embedding and logit gradients. Images whose upstream gradient is
/// identically zero are skipped.
fn backprop_all(runs: &[ImageRun], d_emb: &[f64], d_logits: &[f64], sizes: &[usize]) -> Result<Vec<Vec<f64>>, TensorError> {
    let (de, dl) = (d_emb.len() / runs.len(), d_logits.len() / runs.len());
    let per_image: Vec<Option<Vec<Vec<f64>>>> = runs
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let ge = &d_emb[i * de..(i + 1) * de];
            let gl = &d_logits[i * dl..(i + 1) * dl];
            let mut seeds = Vec::new();
            if ge.iter().any(|&g| g != 0.0) {
                seeds.push((r.embedding, ge.to_vec()));
            }
            if gl.iter().any(|&g| g != 0.0) {
                seeds.push((r.logits, gl.to_vec()));
            }
            if seeds.is_empty() {
                return Ok(None);
            }
            let grads = r.tape.backward_from(&seeds)?;
            Ok(Some(
                r.params
                    .iter()
                    .zip(sizes)
                    .map(|(&v, &n)| grads.get(v).map_or_else(|| vec![0.0; n], <[f64]>::to_vec))
                    .collect(),
            ))
        })
        .collect::<Result<_, TensorError>>()?;
    let mut total: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    for g in per_image.into_iter().flatten() {
        for (acc, part) in total.iter_mut().zip(g) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    Ok(total)
}

/// Loss and parameter gradients of both encoders for one batch.
pub fn loss_and_gradients(
    photo: &Encoder,
    sketch: &Encoder,
    images: &BatchImages,
    labels: &[usize],
    triplets: &TripletIndex,
    cfg: &LossConfig,
) -> Result<StepOutput> {
    let anchors: Vec<&Tensor> = images.anchors.iter().collect();
    let sketches: Vec<&Tensor> = images.positives.iter().chain(&images.negatives).collect();
    let photo_runs = forward_all(photo, &anchors)?;
    let sketch_runs = forward_all(sketch, &sketches)?;
    let head = head_tape(&outputs(&photo_runs), &outputs(&sketch_runs), labels, triplets, cfg)?;
    let g = head.tape.backward(head.total)?;
    let grad = |v: Var| g.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; head.tape.value(v).len()]);
    let photo_grads = backprop_all(&photo_runs, &grad(head.photo_emb), &grad(head.photo_logits), &photo.params.sizes())?;
    let sketch_grads = backprop_all(&sketch_runs, &grad(head.sketch_emb), &grad(head.sketch_logits), &sketch.params.sizes())?;
    Ok(StepOutput {
        stats: head.stats,
        photo_grads,
        sketch_grads,
    })
}

fn all_finite(grads: &[Vec<f64>]) -> bool {
    grads.iter().flatten().all(|g| g.is_finite())
}

fn run_epochs(
    ckpt: &mut Checkpoint,
    ds: &Dataset,
    spec: &BatchSpec,
    epochs: usize,
    seed: u64,
    phase: Phase,
    lr_at: impl Fn(usize) -> f64,
) -> Result<()> {
    let steps = ds.len().div_ceil(spec.batch_size);
    let phase_tag = match phase {
        Phase::Train => 0,
        Phase::Finetune => 1,
    };
    for e in 0..epochs {
        let lr = lr_at(e);
        let mut sums = StepStats::default();
        let mut first_step_loss = f64::NAN;
        for step in 0..steps {
            let mut rng = seeds::stream(spec.seed, &[seed, phase_tag, ckpt.epoch as u64, step as u64]);
            let batch = sample_batch(&ds.index, spec, &mut rng)?;
            let images = batch.images(ds);
            let out = loss_and_gradients(
                &ckpt.photo,
                &ckpt.sketch,
                &images,
                &batch.anchor_labels,
                &TripletIndex::from_batch(&batch),
                &ckpt.loss,
            )?;
            let s = out.stats;
            if !s.loss.is_finite() || !all_finite(&out.photo_grads) || !all_finite(&out.sketch_grads) {
                return Err(Error::Diverged {
                    epoch: ckpt.epoch + 1,
                    step,
                    loss: s.loss,
                });
            }
            if step == 0 {
                first_step_loss = s.loss;
            }
            sums.loss += s.loss;
            sums.triplet += s.triplet;
            sums.classification += s.classification;
            sums.active_fraction += s.active_fraction;
            ckpt.photo_optimizer.step_allow_zero(ckpt.photo.params.tensors_mut(), &out.photo_grads, lr)?;
            ckpt.sketch_optimizer.step_allow_zero(ckpt.sketch.params.tensors_mut(), &out.sketch_grads, lr)?;
        }
        ckpt.epoch += 1;
        let n = steps as f64;
        ckpt.history.push(EpochRecord {
            epoch: ckpt.epoch,
            phase,
            strategy: spec.strategy,
            lr,
            loss: sums.loss / n,
            triplet_loss: sums.triplet / n,
            classification_loss: sums.classification / n,
            active_fraction: sums.active_fraction / n,
            first_step_loss,
        });
    }
    Ok(())
}

fn effective_spec(spec: &BatchSpec, sched: &TrainSchedule) -> Result<BatchSpec> {
    let spec = BatchSpec {
        batch_size: sched.batch_size,
        ..spec.clone()
    };
    spec.validate()?;
    Ok(spec)
}

/// Trains fresh encoders for `sched.epochs` epochs.
///
/// An epoch is `ceil(N / batch_size)` steps. The schedule's batch size
/// overrides the one in `spec`.
pub fn train(
    ds: &Dataset,
    photo: EncoderConfig,
    sketch: EncoderConfig,
    spec: &BatchSpec,
    loss: &LossConfig,
    sched: &TrainSchedule,
) -> Result<Checkpoint> {
    sched.validate()?;
    loss.validate()?;
    if ds.is_empty() {
        return Err(ConfigError::invalid("dataset", "training split is empty").into());
    }
    let spec = effective_spec(spec, sched)?;
    let mut ckpt = Checkpoint::init(photo, sketch, loss.clone(), sched.clone())?;
    ckpt.check_dataset(ds)?;
    run_epochs(&mut ckpt, ds, &spec, sched.epochs, sched.seed, Phase::Train, |e| sched.lr_for_epoch(e))?;
    Ok(ckpt)
}

/// Continues training `ckpt` with `spec`'s strategy for `sched.epochs` epochs
/// at the constant rate `sched.finetune_lr`, keeping the optimizer state.
pub fn finetune(ckpt: &Checkpoint, ds: &Dataset, spec: &BatchSpec, sched: &TrainSchedule) -> Result<Checkpoint> {
    sched.validate_finetune()?;
    ckpt.check_dataset(ds)?;
    let spec = effective_spec(spec, sched)?;
    let mut out = ckpt.clone();
    run_epochs(&mut out, ds, &spec, sched.epochs, sched.seed, Phase::Finetune, |_| sched.finetune_lr)?;
    Ok(out)
}
