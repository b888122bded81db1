//! Loss functions and their gradients.
//!
//! Scalar losses over logits are computed in `f64` regardless of the model's
//! precision. Model-coupled losses run one forward/backward per sample (and
//! per prompt set for the cross-view term) and reduce per-sample gradients in
//! sample order, so results do not depend on how rayon schedules the work.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PovError, Result};
use crate::masking::{InteractionAnnotation, MaskFields};
use crate::model::ModelState;
use crate::prompts::ViewPromptBank;
use crate::real::Real;

/// Floor used for `ln q` when `q` underflows to zero.
pub const KL_EPS: f64 = 1e-12;

static KL_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`kl_divergence`] had to clamp a zero `q` entry.
pub fn kl_clamp_events() -> u64 {
    KL_CLAMP_EVENTS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub scalar: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        LossValue {
            scalar: value,
            components: BTreeMap::from([(name.to_string(), value)]),
        }
    }

    fn add_scaled(&mut self, other: &LossValue, w: f64) {
        self.scalar += w * other.scalar;
        for (k, v) in &other.components {
            *self.components.entry(k.clone()).or_insert(0.0) += w * v;
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(PovError::Validation(format!(
            "label {label} outside [0, {k})"
        )));
    }
    Ok(())
}

/// `-ln softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_label(label, logits.len())?;
    let lp = log_softmax(logits);
    let mut g: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    g[label] -= 1.0;
    Ok((-lp[label], g))
}

/// Batch-mean cross-entropy over a `batch x K` logit matrix.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<LossValue> {
    if logits.nrows() != labels.len() || labels.is_empty() {
        return Err(PovError::Validation(format!(
            "{} logit rows for {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        total += cross_entropy_with_grad(&row.to_vec(), y)?.0;
    }
    Ok(LossValue::single("ce", total / labels.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlMode {
    /// Zero `q` entries under positive `p` are floored at [`KL_EPS`].
    Clamped,
    /// Zero `q` entries under positive `p` are an error.
    Exact,
}

/// `sum_k p_k (ln p_k - ln q_k)` with `0 ln 0 = 0`.
pub fn kl_divergence_with(p: &[f64], q: &[f64], mode: KlMode) -> Result<f64> {
    if p.len() != q.len() {
        return Err(PovError::Validation(format!(
            "KL over vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk <= 0.0 {
            continue;
        }
        let qk = if qk <= 0.0 {
            match mode {
                KlMode::Exact => {
                    return Err(PovError::Numeric(
                        "KL undefined: q has zero mass where p is positive".into(),
                    ))
                }
                KlMode::Clamped => {
                    KL_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
                    KL_EPS
                }
            }
        } else {
            qk
        };
        total += pk * (pk.ln() - qk.ln());
    }
    // Rounding can leave a tiny negative residue for p ~= q.
    Ok(total.max(0.0))
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    kl_divergence_with(p, q, KlMode::Clamped).expect("lengths checked by caller")
}

/// `KL(softmax(a) || softmax(b))` with gradients w.r.t. both logit vectors.
pub fn kl_from_logits_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let lp = log_softmax(a);
    let lq = log_softmax(b);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    let kl: f64 = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(&pk, (&lpk, &lqk))| pk * (lpk - lqk))
        .sum();
    let da = p
        .iter()
        .zip(lp.iter().zip(&lq))
        .map(|(&pk, (&lpk, &lqk))| pk * ((lpk - lqk) - kl))
        .collect();
    let db = q.iter().zip(&p).map(|(&qk, &pk)| qk - pk).collect();
    (kl, da, db)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Mean per-sample entropy minus entropy of the mean prediction, with the
/// gradient w.r.t. each logit row.
pub fn information_maximization_with_grad(
    logits: ArrayView2<'_, f64>,
) -> Result<(LossValue, Array2<f64>)> {
    let (b, k) = logits.dim();
    if b < 2 {
        return Err(PovError::Validation(
            "information maximization needs a batch of at least 2".into(),
        ));
    }
    let lps: Vec<Vec<f64>> = logits.rows().into_iter().map(|r| log_softmax(&r.to_vec())).collect();
    let ps: Vec<Vec<f64>> = lps.iter().map(|lp| lp.iter().map(|v| v.exp()).collect()).collect();
    let mut mean = vec![0.0; k];
    for p in &ps {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v / b as f64;
        }
    }
    let cond: f64 = ps.iter().map(|p| entropy(p)).sum::<f64>() / b as f64;
    let marginal = entropy(&mean);
    let ln_mean: Vec<f64> = mean.iter().map(|&m| m.max(KL_EPS).ln()).collect();

    let mut grad = Array2::zeros((b, k));
    for i in 0..b {
        // dL/dp_ik = (ln mean_k - ln p_ik) / B, then through the softmax.
        let g: Vec<f64> = (0..k)
            .map(|c| (ln_mean[c] - lps[i][c]) / b as f64)
            .collect();
        let dot: f64 = (0..k).map(|c| ps[i][c] * g[c]).sum();
        for c in 0..k {
            grad[[i, c]] = ps[i][c] * (g[c] - dot);
        }
    }
    let mut loss = LossValue {
        scalar: cond - marginal,
        components: BTreeMap::new(),
    };
    loss.components.insert("im_entropy".into(), cond);
    loss.components.insert("im_diversity".into(), marginal);
    Ok((loss, grad))
}

pub fn information_maximization(logits: ArrayView2<'_, f64>) -> Result<LossValue> {
    Ok(information_maximization_with_grad(logits)?.0)
}

/// `k` rows, row `i` putting all mass on class `i` up to float precision.
/// Reaches the IM minimum `-ln k`.
pub fn distinct_one_hot_logits(k: usize) -> Array2<f64> {
    let mut out = Array2::from_elem((k, k), -60.0);
    for i in 0..k {
        out[[i, i]] = 60.0;
    }
    out
}

/// Rows of identical logits; IM is exactly zero.
pub fn uniform_logits(rows: usize, k: usize) -> Array2<f64> {
    Array2::zeros((rows, k))
}

/// Which gradients a model-coupled loss should produce.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradTargets {
    pub model: bool,
    pub bank: bool,
    pub masks: bool,
}

impl GradTargets {
    pub const ALL: GradTargets = GradTargets {
        model: true,
        bank: true,
        masks: true,
    };
    pub const PROMPTS: GradTargets = GradTargets {
        model: false,
        bank: true,
        masks: false,
    };
}

/// Gradients for each parameter container; `None` when not requested.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub model: Option<Vec<F>>,
    pub bank: Option<Vec<F>>,
    pub masks: Option<[Array3<F>; 3]>,
}

impl<F: Real> Gradients<F> {
    fn new(
        targets: GradTargets,
        model: &ModelState<F>,
        bank: Option<&ViewPromptBank<F>>,
        masks: Option<&MaskFields<F>>,
    ) -> Self {
        Gradients {
            model: targets.model.then(|| vec![F::zero(); model.data().len()]),
            bank: bank
                .filter(|_| targets.bank)
                .map(|b| vec![F::zero(); b.data().len()]),
            masks: masks.filter(|m| targets.masks && m.trainable()).map(|m| {
                let z = Array3::zeros(m.dims());
                [z.clone(), z.clone(), z]
            }),
        }
    }

    fn add(&mut self, other: &Gradients<F>) {
        fn add_vec<F: Real>(a: &mut Option<Vec<F>>, b: &Option<Vec<F>>) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, &y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        add_vec(&mut self.model, &other.model);
        add_vec(&mut self.bank, &other.bank);
        if let (Some(a), Some(b)) = (self.masks.as_mut(), other.masks.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: F) {
        for v in self.model.iter_mut().chain(self.bank.iter_mut()) {
            v.iter_mut().for_each(|x| *x *= s);
        }
        if let Some(m) = self.masks.as_mut() {
            m.iter_mut().for_each(|a| a.mapv_inplace(|x| x * s));
        }
    }

    /// Global L2 norm across all present gradients.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for v in self.model.iter().chain(self.bank.iter()) {
            s += v.iter().map(|&x| x.to_f64_lossy().powi(2)).sum::<f64>();
        }
        if let Some(m) = &self.masks {
            for a in m {
                s += a.iter().map(|&x| x.to_f64_lossy().powi(2)).sum::<f64>();
            }
        }
        s.sqrt()
    }
}

fn to_f64<F: Real>(v: &Array1<F>) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn from_f64<F: Real>(v: &[f64]) -> Array1<F> {
    v.iter().map(|&x| F::from_f64_lossy(x)).collect()
}

/// Runs `f` for each item, then sums losses and gradients in item order and
/// divides by the item count.
fn batch_mean<F, T, G>(
    items: &[T],
    mut zero: Gradients<F>,
    f: G,
) -> Result<(LossValue, Gradients<F>)>
where
    F: Real,
    T: Sync,
    G: Fn(&T) -> Result<(LossValue, Gradients<F>)> + Sync + Send,
{
    if items.is_empty() {
        return Err(PovError::Validation("empty batch".into()));
    }
    let parts: Vec<(LossValue, Gradients<F>)> = items.par_iter().map(&f).collect::<Result<_>>()?;
    let w = 1.0 / items.len() as f64;
    let mut loss = LossValue::default();
    for (l, g) in &parts {
        loss.add_scaled(l, w);
        zero.add(g);
    }
    zero.scale(F::from_f64_lossy(w));
    Ok((loss, zero))
}

/// One labelled third-person sample for action pre-training.
#[derive(Debug, Clone)]
pub struct ActionSample<'a, F> {
    pub frames: ArrayView4<'a, F>,
    pub annotation: Option<&'a InteractionAnnotation>,
    pub label: usize,
}

/// Batch-mean cross-entropy of the masked, unprompted forward.
pub fn action_loss<F: Real>(
    model: &ModelState<F>,
    masks: Option<&MaskFields<F>>,
    batch: &[ActionSample<'_, F>],
    targets: GradTargets,
) -> Result<(LossValue, Gradients<F>)> {
    let zero = Gradients::new(targets, model, None, masks);
    batch_mean(batch, zero.clone(), |s| {
        let stack = match (masks, s.annotation) {
            (Some(m), Some(a)) => Some(m.build(a)),
            _ => None,
        };
        let (logits, cache) = model.forward_cached(s.frames, None, stack.as_ref())?;
        let (ce, dl) = cross_entropy_with_grad(&to_f64(&logits), s.label)?;
        let mut g = zero.clone();
        let want_frames = g.masks.is_some() && stack.is_some();
        let out = model.backward(&cache, from_f64::<F>(&dl).view(), g.model.as_deref_mut(), want_frames);
        if let (Some(gm), Some(fg), Some(m), Some(a)) =
            (g.masks.as_mut(), out.frame_grad.as_ref(), masks, s.annotation)
        {
            m.accumulate_grad(a, fg, gm);
        }
        Ok((LossValue::single("act_ce", ce), g))
    })
}

/// One labelled sample with its source-view index in the bank.
#[derive(Debug, Clone)]
pub struct ViewSample<'a, F> {
    pub frames: ArrayView4<'a, F>,
    pub view: usize,
    pub label: Option<usize>,
}

struct PromptedPass<F> {
    logits: Vec<f64>,
    cache: crate::model::ForwardCache<F>,
}

fn prompted_pass<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    frames: ArrayView4<'_, F>,
    view: usize,
) -> Result<PromptedPass<F>> {
    let prompts = bank.select_index(view);
    let (logits, cache) = model.forward_cached(frames, Some(&prompts), None)?;
    Ok(PromptedPass {
        logits: to_f64(&logits),
        cache,
    })
}

fn backprop_view<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    pass: &PromptedPass<F>,
    view: usize,
    dlogits: &[f64],
    g: &mut Gradients<F>,
) {
    let out = model.backward(&pass.cache, from_f64::<F>(dlogits).view(), g.model.as_deref_mut(), false);
    if let Some(gb) = g.bank.as_mut() {
        bank.accumulate_view_grad(view, &out.prompt_grads, gb);
    }
}

/// Per-sample view CE plus `lambda` times the cross-view KL sum.
fn stage2_sample<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    s: &ViewSample<'_, F>,
    lambda: f64,
    ce_weight: f64,
    zero: &Gradients<F>,
) -> Result<(LossValue, Gradients<F>)> {
    let i = s.view;
    if i >= bank.num_views() {
        return Err(PovError::Validation(format!("view index {i} outside bank")));
    }
    let own = prompted_pass(model, bank, s.frames, i)?;
    let mut d_own = vec![0.0; own.logits.len()];
    let mut loss = LossValue::default();

    if ce_weight != 0.0 {
        let label = s
            .label
            .ok_or_else(|| PovError::Validation("view-tuning sample without label".into()))?;
        let (ce, g) = cross_entropy_with_grad(&own.logits, label)?;
        for (d, gv) in d_own.iter_mut().zip(&g) {
            *d += ce_weight * gv;
        }
        loss.components.insert("view_ce".into(), ce);
        loss.scalar += ce_weight * ce;
    }

    let mut grads = zero.clone();
    let mut cross = 0.0;
    if lambda != 0.0 {
        for j in (0..bank.num_views()).filter(|&j| j != i) {
            let other = prompted_pass(model, bank, s.frames, j)?;
            let (kl, da, db) = kl_from_logits_with_grad(&own.logits, &other.logits);
            cross += kl;
            for (d, v) in d_own.iter_mut().zip(&da) {
                *d += lambda * v;
            }
            let db: Vec<f64> = db.iter().map(|v| lambda * v).collect();
            backprop_view(model, bank, &other, j, &db, &mut grads);
        }
    }
    loss.components.insert("cross_kl".into(), cross);
    loss.scalar += lambda * cross;
    backprop_view(model, bank, &own, i, &d_own, &mut grads);
    Ok((loss, grads))
}

/// Cross-entropy of the forward prompted with each sample's own view prompts.
pub fn view_loss<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    batch: &[ViewSample<'_, F>],
    targets: GradTargets,
) -> Result<(LossValue, Gradients<F>)> {
    let zero = Gradients::new(targets, model, Some(bank), None);
    batch_mean(batch, zero.clone(), |s| stage2_sample(model, bank, s, 0.0, 1.0, &zero))
}

/// Sum over other views `j` of `KL(softmax(G(F, P_i)) || softmax(G(F, P_j)))`,
/// batch-averaged. Both prompt sets receive gradient.
pub fn cross_view_alignment_batch<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    batch: &[ViewSample<'_, F>],
    targets: GradTargets,
) -> Result<(LossValue, Gradients<F>)> {
    let zero = Gradients::new(targets, model, Some(bank), None);
    batch_mean(batch, zero.clone(), |s| {
        let (mut l, g) = stage2_sample(model, bank, s, 1.0, 0.0, &zero)?;
        l.components.remove("view_ce");
        Ok((l, g))
    })
}

/// Cross-view alignment of a single clip seen from source view `view`.
pub fn cross_view_alignment<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    frames: ArrayView4<'_, F>,
    view: &str,
) -> Result<LossValue> {
    let sample = ViewSample {
        frames,
        view: bank.index_of(view)?,
        label: None,
    };
    Ok(cross_view_alignment_batch(model, bank, &[sample], GradTargets::default())?.0)
}

/// `L_view + lambda * L_cross` for a batch.
pub fn stage2_loss<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    batch: &[ViewSample<'_, F>],
    lambda: f64,
    targets: GradTargets,
) -> Result<(LossValue, Gradients<F>)> {
    if !(lambda >= 0.0) {
        return Err(PovError::Validation(format!("lambda {lambda} must be >= 0")));
    }
    if let Some(pos) = batch.iter().position(|s| s.label.is_none()) {
        return Err(PovError::Validation(format!("sample {pos} has no label")));
    }
    let zero = Gradients::new(targets, model, Some(bank), None);
    batch_mean(batch, zero.clone(), |s| stage2_sample(model, bank, s, lambda, 1.0, &zero))
}

/// Information maximization over a batch of unlabelled clips, with the joint
/// prompt attached. Gradients reach every view through the sum.
pub fn ego_zero_shot_loss<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    frames: &[ArrayView4<'_, F>],
    targets: GradTargets,
) -> Result<(LossValue, Gradients<F>)> {
    let joint = bank.joint();
    let prompts = joint.views();
    let passes: Vec<(Array1<F>, crate::model::ForwardCache<F>)> = frames
        .par_iter()
        .map(|f| model.forward_cached(f.view(), Some(&prompts), None))
        .collect::<Result<_>>()?;
    let k = model.config().num_actions();
    let mut logits = Array2::zeros((passes.len(), k));
    for (i, (l, _)) in passes.iter().enumerate() {
        logits.row_mut(i).assign(&l.mapv(|v| v.to_f64_lossy()));
    }
    let (loss, dlogits) = information_maximization_with_grad(logits.view())?;
    let zero = Gradients::new(targets, model, Some(bank), None);
    let parts: Vec<Gradients<F>> = passes
        .par_iter()
        .enumerate()
        .map(|(i, (_, cache))| {
            let mut g = zero.clone();
            let dl: Array1<F> = dlogits.row(i).mapv(F::from_f64_lossy);
            let out = model.backward(cache, dl.view(), g.model.as_deref_mut(), false);
            if let Some(gb) = g.bank.as_mut() {
                bank.accumulate_joint_grad(&out.prompt_grads, gb);
            }
            g
        })
        .collect();
    let mut total = zero;
    for g in &parts {
        total.add(g);
    }
    Ok((loss, total))
}

/// Cross-entropy with the joint prompt attached (labelled ego adaptation).
pub fn ego_few_shot_loss<F: Real>(
    model: &ModelState<F>,
    bank: &ViewPromptBank<F>,
    batch: &[(ArrayView4<'_, F>, usize)],
    targets: GradTargets,
) -> Result<(LossValue, Gradients<F>)> {
    let joint = bank.joint();
    let prompts = joint.views();
    let zero = Gradients::new(targets, model, Some(bank), None);
    batch_mean(batch, zero.clone(), |(frames, label)| {
        let (logits, cache) = model.forward_cached(frames.view(), Some(&prompts), None)?;
        let (ce, dl) = cross_entropy_with_grad(&to_f64(&logits), *label)?;
        let mut g = zero.clone();
        let out = model.backward(&cache, from_f64::<F>(&dl).view(), g.model.as_deref_mut(), false);
        if let Some(gb) = g.bank.as_mut() {
            bank.accumulate_joint_grad(&out.prompt_grads, gb);
        }
        Ok((LossValue::single("ego_ce", ce), g))
    })
}

/// Softmax of a logit row (convenience for evaluation code).
pub fn probabilities<F: Real>(logits: ArrayView1<'_, F>) -> Vec<f64> {
    softmax(&logits.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>())
}
