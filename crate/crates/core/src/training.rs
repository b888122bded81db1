//! The three training stages and their freeze contracts.
//!
//! Stage 1 trains backbone and head (and soft mask fields) on masked,
//! unprompted third-person clips. Stage 2 trains only the view prompts with
//! per-view cross-entropy plus the cross-view KL term. The optional ego stage
//! either tunes only the prompts with information maximization on unlabeled
//! clips, or fine-tunes backbone, head and prompts with labeled clips. Both
//! ego modes attach the joint prompt.

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Stage;
use crate::dataset::{flip_frames, ClipLoader, LabelAccess};
use crate::error::{PovError, Result};
use crate::masking::{InteractionAnnotation, MaskFields, MaskRole};
use crate::model::{parameter_partition, ModelState};
use crate::objectives::{
    action_loss, ego_few_shot_loss, ego_zero_shot_loss, stage2_loss, ActionSample, GradTargets,
    Gradients, LossValue, ViewSample,
};
use crate::optim::{clip_global_norm, warmup_cosine_lr, AdamW, AdamWConfig};
use crate::params::Partition;
use crate::prompts::ViewPromptBank;
use crate::rng;
use crate::world::flipped_verb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Epochs of linear learning-rate warmup before the cosine decay.
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Weight of the cross-view term; only read by view tuning.
    pub lambda: f64,
    /// Probability of a horizontal flip; only supervised stages flip.
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 30,
            batch_size: 16,
            lr_start: 1e-3,
            lr_end: 1e-5,
            warmup_epochs: 0,
            weight_decay: 0.05,
            grad_clip: 1.0,
            lambda: 0.001,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let d = StageConfig::default();
        match stage {
            Stage::Pretrain => StageConfig {
                warmup_epochs: 3,
                ..d
            },
            Stage::ViewTune => StageConfig {
                epochs: 10,
                weight_decay: 0.0,
                ..d
            },
            Stage::EgoZeroShot => StageConfig {
                epochs: 30,
                lr_start: 1e-2,
                weight_decay: 0.0,
                flip_prob: 0.0,
                ..d
            },
            Stage::EgoFewShot => StageConfig { epochs: 5, ..d },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PovError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0) {
            return bad("learning rates must be >= 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must be in [0, 1]");
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip must be > 0 and weight_decay >= 0");
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Per-partition checksums plus progress counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSnapshot {
    pub checksums: BTreeMap<Partition, String>,
    pub step: usize,
    pub losses: Vec<f64>,
}

impl TrainingSnapshot {
    pub fn capture(
        model: &ModelState<f32>,
        bank: Option<&ViewPromptBank<f32>>,
        masks: Option<&MaskFields<f32>>,
        step: usize,
        losses: &[f64],
    ) -> Result<Self> {
        Ok(TrainingSnapshot {
            checksums: parameter_partition(model, bank, masks)?.checksums(),
            step,
            losses: losses.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeReport {
    pub violations: Vec<Partition>,
}

impl FreezeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(PovError::FreezeViolation(
                self.violations.iter().map(|p| p.name().to_string()).collect(),
            ))
        }
    }
}

/// Fails iff a partition outside `allowed` changed checksum.
pub fn freeze_check(before: &TrainingSnapshot, after: &TrainingSnapshot, allowed: &[Partition]) -> FreezeReport {
    let violations = Partition::ALL
        .iter()
        .copied()
        .filter(|p| !allowed.contains(p))
        .filter(|p| before.checksums.get(p) != after.checksums.get(p))
        .collect();
    FreezeReport { violations }
}

/// What a stage did, for logs, tests and the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub before: TrainingSnapshot,
    pub after: TrainingSnapshot,
    /// Samples that went through the network with masks stamped on.
    pub masked_samples: u64,
    pub samples: u64,
    pub label_reads: u64,
}

/// Receives one record per optimizer step.
pub trait StepSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;
}

impl StepSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Newline-delimited JSON log.
pub struct JsonlSink<W: Write> {
    out: W,
    path: std::path::PathBuf,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(out: W, path: impl Into<std::path::PathBuf>) -> Self {
        JsonlSink { out, path: path.into() }
    }
}

impl<W: Write> StepSink for JsonlSink<W> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| PovError::io(&self.path, e))
    }
}

/// Discards records.
pub struct NullSink;

impl StepSink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

fn weight_decay_mask(model: &ModelState<f32>) -> Vec<bool> {
    let mut mask = vec![false; model.data().len()];
    for e in model.layout().entries() {
        if e.shape.len() == 2 && e.name.ends_with(".weight") {
            mask[e.range()].fill(true);
        }
    }
    mask
}

fn check_finite(stage: Stage, step: usize, loss: &LossValue, grad_norm: f64, snap: impl FnOnce() -> Result<TrainingSnapshot>) -> Result<()> {
    if loss.scalar.is_finite() && grad_norm.is_finite() {
        return Ok(());
    }
    let diag = match snap() {
        Ok(s) => serde_json::to_string(&s.checksums).expect("checksums serialize"),
        Err(e) => format!("<snapshot failed: {e}>"),
    };
    Err(PovError::Numeric(format!(
        "{stage} step {step}: loss {} grad norm {grad_norm} components {:?}; parameters {diag}",
        loss.scalar, loss.components
    )))
}

/// Shared epoch/batch/schedule driver. `step` computes and applies one
/// update and returns the loss and pre-clip gradient norm.
fn drive(
    stage: Stage,
    n: usize,
    cfg: &StageConfig,
    sink: &mut dyn StepSink,
    mut step: impl FnMut(&[usize], f64, &mut rand_chacha::ChaCha8Rng, usize) -> Result<(LossValue, f64)>,
) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    if n == 0 {
        return Err(PovError::Validation(format!("{stage}: no training clips")));
    }
    let per_epoch = cfg.steps_per_epoch(n);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs.min(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(total);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &format!("{stage}/epoch{epoch}"));
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = warmup_cosine_lr(cfg.lr_start, cfg.lr_end, warmup, global, total);
            let (loss, grad_norm) = step(batch, lr, &mut r, global)?;
            sink.record(&StepRecord {
                step: global,
                stage,
                epoch,
                loss: loss.scalar,
                components: loss.components.clone(),
                lr,
                grad_norm,
            })?;
            sum += loss.scalar;
            losses.push(loss.scalar);
            global += 1;
        }
        epoch_losses.push(sum / per_epoch as f64);
    }
    Ok((global, losses, epoch_losses))
}

/// A training sample after optional flipping.
struct Prepared {
    frames: Array4<f32>,
    annotation: InteractionAnnotation,
    label: usize,
}

fn prepare(
    loader: &ClipLoader<f32>,
    i: usize,
    flip_prob: f64,
    num_verbs: usize,
    num_nouns: usize,
    r: &mut impl Rng,
) -> Result<Prepared> {
    let clip = loader.clip(i);
    let labels = loader.labels(i)?;
    let coin: f64 = r.gen();
    if coin < flip_prob {
        if let Some(v) = flipped_verb(labels.verb, num_verbs) {
            let (_, _, w, _) = clip.frames.dim();
            return Ok(Prepared {
                frames: flip_frames(clip.frames.view()),
                annotation: clip.annotation.flipped(w),
                label: v * num_nouns + labels.noun,
            });
        }
    }
    Ok(Prepared {
        frames: clip.frames.clone(),
        annotation: clip.annotation.clone(),
        label: labels.action,
    })
}

fn require_labels(loader: &ClipLoader<f32>, stage: Stage) -> Result<()> {
    if loader.mode() != LabelAccess::Labeled {
        return Err(PovError::Protocol(format!("{stage} needs a labeled loader")));
    }
    Ok(())
}

/// Stage 1: masked action pre-training of backbone and head. `masks` of
/// `None` disables masking; soft fields are trained alongside the model.
pub fn pretrain_action(
    model: &mut ModelState<f32>,
    mut masks: Option<&mut MaskFields<f32>>,
    data: &ClipLoader<f32>,
    cfg: &StageConfig,
    sink: &mut dyn StepSink,
) -> Result<TrainReport> {
    let stage = Stage::Pretrain;
    require_labels(data, stage)?;
    let c = model.config().clone();
    let soft = masks.as_ref().is_some_and(|m| m.trainable());
    let before = TrainingSnapshot::capture(model, None, masks.as_deref(), 0, &[])?;
    let decay = weight_decay_mask(model);
    let mut opt = AdamW::new(cfg.optimizer(), model.data().len());
    let mask_len = masks.as_ref().map(|m| m.dims()).map(|(t, h, w)| 3 * t * h * w).unwrap_or(0);
    let mut mask_opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..cfg.optimizer() }, mask_len);
    let reads0 = data.label_reads();
    let (mut masked, mut samples) = (0u64, 0u64);

    let (steps, losses, epoch_losses) = drive(stage, data.len(), cfg, sink, |batch, lr, r, step| {
        let prepared: Vec<Prepared> = batch
            .iter()
            .map(|&i| prepare(data, i, cfg.flip_prob, c.num_verbs, c.num_nouns, r))
            .collect::<Result<_>>()?;
        let samples_ref: Vec<ActionSample<'_, f32>> = prepared
            .iter()
            .map(|p| ActionSample {
                frames: p.frames.view(),
                annotation: masks.is_some().then_some(&p.annotation),
                label: p.label,
            })
            .collect();
        let targets = GradTargets {
            model: true,
            bank: false,
            masks: soft,
        };
        let (loss, mut g) = action_loss(model, masks.as_deref(), &samples_ref, targets)?;
        samples += batch.len() as u64;
        if masks.is_some() {
            masked += batch.len() as u64;
        }
        let norm = clip_grads(&mut g, cfg.grad_clip);
        check_finite(stage, step, &loss, norm, || TrainingSnapshot::capture(model, None, masks.as_deref(), step, &[]))?;
        opt.step(model.data_mut(), g.model.as_deref().expect("model grads"), lr, &|i| decay[i]);
        if let (Some(m), Some(gm)) = (masks.as_deref_mut(), g.masks.as_ref()) {
            step_masks(&mut mask_opt, m, gm, lr);
        }
        Ok((loss, norm))
    })?;
    let after = TrainingSnapshot::capture(model, None, masks.as_deref(), steps, &losses)?;
    freeze_check(&before, &after, &stage.trainable(soft)).into_result()?;
    Ok(TrainReport {
        stage,
        steps,
        epoch_losses,
        before,
        after,
        masked_samples: masked,
        samples,
        label_reads: data.label_reads() - reads0,
    })
}

fn clip_grads(g: &mut Gradients<f32>, max_norm: f64) -> f64 {
    let mut slices: Vec<&mut [f32]> = Vec::new();
    if let Some(m) = g.model.as_mut() {
        slices.push(m);
    }
    if let Some(b) = g.bank.as_mut() {
        slices.push(b);
    }
    if let Some(ms) = g.masks.as_mut() {
        for a in ms.iter_mut() {
            slices.push(a.as_slice_mut().expect("standard layout"));
        }
    }
    clip_global_norm(&mut slices, max_norm)
}

fn step_masks(opt: &mut AdamW, masks: &mut MaskFields<f32>, grads: &[Array3<f32>; 3], lr: f64) {
    let mut params: Vec<f32> = Vec::with_capacity(3 * grads[0].len());
    let mut flat: Vec<f32> = Vec::with_capacity(params.capacity());
    for (role, g) in MaskRole::ALL.iter().zip(grads) {
        params.extend(masks.field(*role).values().iter().copied());
        flat.extend(g.iter().copied());
    }
    opt.step(&mut params, &flat, lr, &|_| false);
    let n = grads[0].len();
    for (k, role) in MaskRole::ALL.iter().enumerate() {
        if let Some(v) = masks.field_mut(*role).values_mut() {
            for (dst, &src) in v.iter_mut().zip(&params[k * n..(k + 1) * n]) {
                *dst = src;
            }
        }
    }
}

/// Stage 2: prompt-only view tuning. Masks are not applied; `masks` is only
/// snapshotted so the freeze check covers it.
pub fn prompt_tune_view(
    model: &ModelState<f32>,
    bank: &mut ViewPromptBank<f32>,
    masks: Option<&MaskFields<f32>>,
    data: &ClipLoader<f32>,
    cfg: &StageConfig,
    sink: &mut dyn StepSink,
) -> Result<TrainReport> {
    let stage = Stage::ViewTune;
    require_labels(data, stage)?;
    let c = model.config().clone();
    let views: Vec<usize> = data
        .clips()
        .iter()
        .map(|clip| bank.index_of(&clip.view_id))
        .collect::<Result<_>>()?;
    let before = TrainingSnapshot::capture(model, Some(bank), masks, 0, &[])?;
    let mut opt = AdamW::new(cfg.optimizer(), bank.param_count());
    let reads0 = data.label_reads();
    let mut samples = 0u64;
    let (steps, losses, epoch_losses) = drive(stage, data.len(), cfg, sink, |batch, lr, r, step| {
        let prepared: Vec<Prepared> = batch
            .iter()
            .map(|&i| prepare(data, i, cfg.flip_prob, c.num_verbs, c.num_nouns, r))
            .collect::<Result<_>>()?;
        let samples_ref: Vec<ViewSample<'_, f32>> = prepared
            .iter()
            .zip(batch)
            .map(|(p, &i)| ViewSample {
                frames: p.frames.view(),
                view: views[i],
                label: Some(p.label),
            })
            .collect();
        let (loss, mut g) = stage2_loss(model, bank, &samples_ref, cfg.lambda, GradTargets::PROMPTS)?;
        samples += batch.len() as u64;
        let norm = clip_grads(&mut g, cfg.grad_clip);
        check_finite(stage, step, &loss, norm, || TrainingSnapshot::capture(model, Some(bank), masks, step, &[]))?;
        opt.step(bank.data_mut(), g.bank.as_deref().expect("bank grads"), lr, &|_| true);
        Ok((loss, norm))
    })?;
    let after = TrainingSnapshot::capture(model, Some(bank), masks, steps, &losses)?;
    freeze_check(&before, &after, &stage.trainable(false)).into_result()?;
    Ok(TrainReport {
        stage,
        steps,
        epoch_losses,
        before,
        after,
        masked_samples: 0,
        samples,
        label_reads: data.label_reads() - reads0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EgoMode {
    ZeroShot,
    FewShot,
}

impl EgoMode {
    pub fn stage(self) -> Stage {
        match self {
            EgoMode::ZeroShot => Stage::EgoZeroShot,
            EgoMode::FewShot => Stage::EgoFewShot,
        }
    }
}

/// Egocentric adaptation with the joint prompt attached.
///
/// Zero-shot mode requires an unlabeled loader, never asks for labels and
/// trains only the bank with information maximization. Few-shot mode trains
/// backbone, head and bank with cross-entropy.
pub fn ego_finetune(
    model: &mut ModelState<f32>,
    bank: &mut ViewPromptBank<f32>,
    masks: Option<&MaskFields<f32>>,
    data: &ClipLoader<f32>,
    mode: EgoMode,
    cfg: &StageConfig,
    sink: &mut dyn StepSink,
) -> Result<TrainReport> {
    let stage = mode.stage();
    let before = TrainingSnapshot::capture(model, Some(bank), masks, 0, &[])?;
    let reads0 = data.label_reads();
    let mut samples = 0u64;
    let mut bank_opt = AdamW::new(cfg.optimizer(), bank.param_count());
    let (steps, losses, epoch_losses) = match mode {
        EgoMode::ZeroShot => {
            if data.mode() != LabelAccess::Unlabeled {
                return Err(PovError::Protocol(
                    "zero-shot adaptation must use an unlabeled loader".into(),
                ));
            }
            drive(stage, data.len(), cfg, sink, |batch, lr, _, step| {
                let frames: Vec<_> = batch.iter().map(|&i| data.clip(i).frames.view()).collect();
                let (loss, mut g) = ego_zero_shot_loss(model, bank, &frames, GradTargets::PROMPTS)?;
                samples += batch.len() as u64;
                let norm = clip_grads(&mut g, cfg.grad_clip);
                check_finite(stage, step, &loss, norm, || TrainingSnapshot::capture(model, Some(bank), masks, step, &[]))?;
                bank_opt.step(bank.data_mut(), g.bank.as_deref().expect("bank grads"), lr, &|_| true);
                Ok((loss, norm))
            })?
        }
        EgoMode::FewShot => {
            require_labels(data, stage)?;
            let c = model.config().clone();
            let decay = weight_decay_mask(model);
            let mut opt = AdamW::new(cfg.optimizer(), model.data().len());
            drive(stage, data.len(), cfg, sink, |batch, lr, r, step| {
                let prepared: Vec<Prepared> = batch
                    .iter()
                    .map(|&i| prepare(data, i, cfg.flip_prob, c.num_verbs, c.num_nouns, r))
                    .collect::<Result<_>>()?;
                let pairs: Vec<_> = prepared.iter().map(|p| (p.frames.view(), p.label)).collect();
                let targets = GradTargets {
                    model: true,
                    bank: true,
                    masks: false,
                };
                let (loss, mut g) = ego_few_shot_loss(model, bank, &pairs, targets)?;
                samples += batch.len() as u64;
                let norm = clip_grads(&mut g, cfg.grad_clip);
                check_finite(stage, step, &loss, norm, || TrainingSnapshot::capture(model, Some(bank), masks, step, &[]))?;
                opt.step(model.data_mut(), g.model.as_deref().expect("model grads"), lr, &|i| decay[i]);
                bank_opt.step(bank.data_mut(), g.bank.as_deref().expect("bank grads"), lr, &|_| true);
                Ok((loss, norm))
            })?
        }
    };
    let after = TrainingSnapshot::capture(model, Some(bank), masks, steps, &losses)?;
    freeze_check(&before, &after, &stage.trainable(false)).into_result()?;
    Ok(TrainReport {
        stage,
        steps,
        epoch_losses,
        before,
        after,
        masked_samples: 0,
        samples,
        label_reads: data.label_reads() - reads0,
    })
}
