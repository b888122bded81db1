//! Accuracy metrics, cross-view protocols and feature export.
//!
//! Verb and noun scores are read off the action distribution. By default it
//! is marginalized; the alternative ranks verbs (nouns) by the order in which
//! they first appear among the ranked actions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::{ArrayView2, ArrayView4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Stage};
use crate::dataset::{ClipLoader, Split};
use crate::error::{PovError, Result};
use crate::model::ModelState;
use crate::objectives::probabilities;
use crate::prompts::ViewPromptBank;

/// `(verb_probs, noun_probs)` from an action distribution laid out as
/// `verb * num_nouns + noun`. Expects `action_probs` to sum to one.
pub fn marginalize(action_probs: &[f64], num_verbs: usize, num_nouns: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(action_probs.len(), num_verbs * num_nouns, "action vector length");
    let mut verb = vec![0.0; num_verbs];
    let mut noun = vec![0.0; num_nouns];
    for v in 0..num_verbs {
        for o in 0..num_nouns {
            let p = action_probs[v * num_nouns + o];
            verb[v] += p;
            noun[o] += p;
        }
    }
    (verb, noun)
}

/// Position of `label` when classes are sorted by descending probability,
/// ties going to the lower index.
pub fn rank_of(probs: &[f64], label: usize) -> usize {
    let pl = probs[label];
    probs
        .iter()
        .enumerate()
        .filter(|&(j, &p)| p > pl || (p == pl && j < label))
        .count()
}

/// Classes in descending-probability order, ties by lower index.
pub fn ranking(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn effective_k(k: usize, classes: usize) -> Result<usize> {
    if k == 0 {
        return Err(PovError::Validation("top-k needs k >= 1".into()));
    }
    if k > classes {
        log::warn!("top-{k} requested over {classes} classes; using top-{classes}");
        return Ok(classes);
    }
    Ok(k)
}

/// Fraction of rows whose label ranks within the top `k`.
pub fn topk_accuracy(probs: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> Result<f64> {
    let (n, classes) = probs.dim();
    if n != labels.len() || n == 0 {
        return Err(PovError::Validation(format!("{n} rows vs {} labels", labels.len())));
    }
    let k = effective_k(k, classes)?;
    let mut hits = 0usize;
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        if label >= classes {
            return Err(PovError::Validation(format!("label {label} outside {classes} classes")));
        }
        let row: Vec<f64> = row.to_vec();
        if rank_of(&row, label) < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerbNounRule {
    #[default]
    Marginalize,
    TopAction,
}

/// One evaluated clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub view_id: String,
    pub verb_id: usize,
    pub noun_id: usize,
    pub action_id: usize,
    pub action_probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class_id: usize,
    pub n: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ZeroShotXview,
    FewShotXview,
    ThirdToEgo,
    HoiXviewHeldout,
}

impl Protocol {
    pub const ALL: [Protocol; 4] = [
        Protocol::ZeroShotXview,
        Protocol::FewShotXview,
        Protocol::ThirdToEgo,
        Protocol::HoiXviewHeldout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::ZeroShotXview => "zero_shot_xview",
            Protocol::FewShotXview => "few_shot_xview",
            Protocol::ThirdToEgo => "third_to_ego",
            Protocol::HoiXviewHeldout => "hoi_xview_heldout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// The checkpoint evaluated under this protocol.
    pub fn checkpoint_stage(self) -> Stage {
        match self {
            Protocol::ZeroShotXview => Stage::EgoZeroShot,
            Protocol::FewShotXview => Stage::EgoFewShot,
            Protocol::ThirdToEgo | Protocol::HoiXviewHeldout => Stage::ViewTune,
        }
    }

    pub fn split(self) -> Split {
        match self {
            Protocol::HoiXviewHeldout => Split::HeldoutTest,
            _ => Split::EgoTest,
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The verb/noun/action x top-1/top-5 grid plus per-class table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: String,
    pub samples: usize,
    pub seed: u64,
    pub config_hash: String,
    pub verb_noun_rule: VerbNounRule,
    pub verb: TopK,
    pub noun: TopK,
    pub action: TopK,
    pub per_class: Vec<ClassRow>,
}

/// Report metadata that does not come from the predictions.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub protocol: String,
    pub seed: u64,
    pub config_hash: String,
}

fn derived_ranking(action_rank: &[usize], num_nouns: usize, verb: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for &a in action_rank {
        let c = if verb { a / num_nouns } else { a % num_nouns };
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

/// Per-target hit counts at ranks 1 and 5.
fn hits(p: &Prediction, num_verbs: usize, num_nouns: usize, rule: VerbNounRule) -> [[bool; 2]; 3] {
    let within = |rank: usize, classes: usize| [rank < 1, rank < 5.min(classes)];
    let action = within(rank_of(&p.action_probs, p.action_id), num_verbs * num_nouns);
    let (verb, noun) = match rule {
        VerbNounRule::Marginalize => {
            let (vp, np) = marginalize(&p.action_probs, num_verbs, num_nouns);
            (
                within(rank_of(&vp, p.verb_id), num_verbs),
                within(rank_of(&np, p.noun_id), num_nouns),
            )
        }
        VerbNounRule::TopAction => {
            let r = ranking(&p.action_probs);
            let pos = |list: Vec<usize>, label: usize| list.iter().position(|&c| c == label).unwrap_or(usize::MAX);
            (
                within(pos(derived_ranking(&r, num_nouns, true), p.verb_id), num_verbs),
                within(pos(derived_ranking(&r, num_nouns, false), p.noun_id), num_nouns),
            )
        }
    };
    [verb, noun, action]
}

/// Per-action-class top-1 over a prediction dump, sorted by class id.
pub fn per_class_accuracy(preds: &[Prediction]) -> Result<Vec<ClassRow>> {
    if preds.is_empty() {
        return Err(PovError::Validation("empty prediction dump".into()));
    }
    let mut table: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in preds {
        let e = table.entry(p.action_id).or_default();
        e.0 += 1;
        if rank_of(&p.action_probs, p.action_id) == 0 {
            e.1 += 1;
        }
    }
    Ok(table
        .into_iter()
        .map(|(class_id, (n, h))| ClassRow {
            class_id,
            n,
            top1: h as f64 / n as f64,
        })
        .collect())
}

pub fn report_from_predictions(
    preds: &[Prediction],
    num_verbs: usize,
    num_nouns: usize,
    rule: VerbNounRule,
    meta: &ReportMeta,
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(PovError::Validation("no predictions to score".into()));
    }
    let k = num_verbs * num_nouns;
    let mut counts = [[0usize; 2]; 3];
    for p in preds {
        if p.action_probs.len() != k || p.action_id >= k || p.action_id != p.verb_id * num_nouns + p.noun_id {
            return Err(PovError::Validation(format!("malformed prediction for `{}`", p.clip_id)));
        }
        for (c, h) in counts.iter_mut().zip(hits(p, num_verbs, num_nouns, rule)) {
            c[0] += h[0] as usize;
            c[1] += h[1] as usize;
        }
    }
    let n = preds.len() as f64;
    let tk = |c: [usize; 2]| TopK {
        top1: c[0] as f64 / n,
        top5: c[1] as f64 / n,
    };
    Ok(MetricsReport {
        protocol: meta.protocol.clone(),
        samples: preds.len(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        verb_noun_rule: rule,
        verb: tk(counts[0]),
        noun: tk(counts[1]),
        action: tk(counts[2]),
        per_class: per_class_accuracy(preds)?,
    })
}

/// Forward passes with the joint prompt (when a bank is given) and no masks.
pub fn predict(
    model: &ModelState<f32>,
    bank: Option<&ViewPromptBank<f32>>,
    data: &ClipLoader<f32>,
) -> Result<Vec<Prediction>> {
    let joint = bank.map(|b| b.joint());
    let prompts = joint.as_ref().map(|j| j.views());
    let probs: Vec<Vec<f64>> = data
        .clips()
        .par_iter()
        .map(|c| Ok(probabilities(model.forward(c.frames.view(), prompts.as_deref(), None)?.view())))
        .collect::<Result<_>>()?;
    probs
        .into_iter()
        .enumerate()
        .map(|(i, action_probs)| {
            let l = data.labels(i)?;
            let c = data.clip(i);
            Ok(Prediction {
                clip_id: c.clip_id.clone(),
                view_id: c.view_id.clone(),
                verb_id: l.verb,
                noun_id: l.noun,
                action_id: l.action,
                action_probs,
            })
        })
        .collect()
}

pub fn predictions_to_jsonl(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    out
}

pub fn predictions_from_jsonl(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PovError::Validation(format!("bad prediction record: {e}"))))
        .collect()
}

/// Checkpoints present for a run, by stage.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSet {
    pub paths: BTreeMap<Stage, PathBuf>,
}

impl CheckpointSet {
    pub fn has(&self, stage: Stage) -> bool {
        self.paths.contains_key(&stage)
    }

    /// The checkpoint a protocol evaluates, after checking what must and
    /// must not exist.
    pub fn for_protocol(&self, protocol: Protocol) -> Result<Checkpoint> {
        if protocol == Protocol::ThirdToEgo {
            if let Some(s) = Stage::ALL.into_iter().find(|s| s.is_ego() && self.has(*s)) {
                return Err(PovError::Validation(format!(
                    "{protocol} evaluates without egocentric tuning, but a {s} checkpoint exists"
                )));
            }
        }
        let stage = protocol.checkpoint_stage();
        let path = self.paths.get(&stage).ok_or_else(|| {
            PovError::Prerequisite(format!("{protocol} needs a {stage} checkpoint"))
        })?;
        let ckpt = Checkpoint::load(path)?;
        if ckpt.stage != stage {
            return Err(PovError::Validation(format!(
                "{} is tagged {}, expected {stage}",
                path.display(),
                ckpt.stage
            )));
        }
        Ok(ckpt)
    }
}

/// Scores a checkpoint on a labeled loader.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    data: &ClipLoader<f32>,
    rule: VerbNounRule,
    meta: &ReportMeta,
) -> Result<(MetricsReport, Vec<Prediction>)> {
    let c = ckpt.model.config();
    let preds = predict(&ckpt.model, ckpt.bank.as_ref(), data)?;
    let report = report_from_predictions(&preds, c.num_verbs, c.num_nouns, rule, meta)?;
    Ok((report, preds))
}

/// Feature rows: final-norm class token per clip.
pub fn export_features(
    model: &ModelState<f32>,
    bank: Option<&ViewPromptBank<f32>>,
    data: &ClipLoader<f32>,
) -> Result<String> {
    let joint = bank.map(|b| b.joint());
    let prompts = joint.as_ref().map(|j| j.views());
    let feats: Vec<Vec<f32>> = data
        .clips()
        .par_iter()
        .map(|c| feature(model, c.frames.view(), prompts.as_deref()))
        .collect::<Result<_>>()?;
    let d = model.config().embed_dim;
    let mut out = String::from("clip_id,view_id,verb_id,noun_id,action_id");
    for j in 0..d {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    for (i, f) in feats.iter().enumerate() {
        let c = data.clip(i);
        let l = data.labels(i)?;
        write!(out, "{},{},{},{},{}", c.clip_id, c.view_id, l.verb, l.noun, l.action).expect("string write");
        for v in f {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

fn feature(
    model: &ModelState<f32>,
    frames: ArrayView4<'_, f32>,
    prompts: Option<&[ndarray::ArrayView2<'_, f32>]>,
) -> Result<Vec<f32>> {
    let (_, cache) = model.forward_cached(frames, prompts, None)?;
    Ok(cache.feature().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn pred(action: usize, probs: Vec<f64>, nouns: usize) -> Prediction {
        Prediction {
            clip_id: format!("c{action}"),
            view_id: "v".into(),
            verb_id: action / nouns,
            noun_id: action % nouns,
            action_id: action,
            action_probs: probs,
        }
    }

    #[test]
    fn marginal_cases() {
        let (v, o) = marginalize(&[1.0 / 36.0; 36], 6, 6);
        assert!(v.iter().chain(&o).all(|&p| (p - 1.0 / 6.0).abs() < 1e-12));
        let mut one = vec![0.0; 36];
        one[2 * 6 + 3] = 1.0;
        let (v, o) = marginalize(&one, 6, 6);
        assert_eq!(v[2], 1.0);
        assert_eq!(o[3], 1.0);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn topk_cases() {
        let mut p = Array2::from_elem((2, 10), 0.0);
        for j in 0..10 {
            p[[0, j]] = (10 - j) as f64;
            p[[1, j]] = (10 - j) as f64;
        }
        // Label 0 ranks first, label 7 ranks eighth.
        assert_eq!(topk_accuracy(p.view(), &[0, 7], 5).unwrap(), 0.5);
        assert_eq!(topk_accuracy(p.view(), &[0, 7], 10).unwrap(), 1.0);
        assert_eq!(topk_accuracy(p.view(), &[0, 7], 50).unwrap(), 1.0);
        assert!(topk_accuracy(p.view(), &[0, 7], 0).is_err());
        let u = Array2::from_elem((3, 4), 0.25);
        assert_eq!(topk_accuracy(u.view(), &[0, 1, 0], 1).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn per_class_averaging() {
        let hit = |a| {
            let mut p = vec![0.0; 4];
            p[a] = 1.0;
            p
        };
        let preds = vec![pred(0, hit(0), 2), pred(0, hit(0), 2), pred(1, hit(0), 2), pred(1, hit(2), 2)];
        let t = per_class_accuracy(&preds).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].top1, t[1].top1), (1.0, 0.0));
        let r = report_from_predictions(&preds, 2, 2, VerbNounRule::Marginalize, &ReportMeta::default()).unwrap();
        assert_eq!(r.action.top1, 0.5);
        let single = per_class_accuracy(&preds[..2]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].top1, 1.0);
    }

    #[test]
    fn top_action_rule_reads_components() {
        // Top action is (verb 1, noun 0) but the marginals favour verb 0.
        let probs = vec![0.3, 0.3, 0.4, 0.0];
        let p = pred(1, probs, 2);
        let m = hits(&p, 2, 2, VerbNounRule::Marginalize);
        let t = hits(&p, 2, 2, VerbNounRule::TopAction);
        assert!(m[0][0]);
        assert!(!t[0][0]);
    }

    #[test]
    fn malformed_prediction_rejected() {
        let mut p = pred(1, vec![0.25; 4], 2);
        p.noun_id = 0;
        assert!(report_from_predictions(&[p], 2, 2, VerbNounRule::Marginalize, &ReportMeta::default()).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(Protocol::parse(p.name()), Some(p));
        }
        assert_eq!(Protocol::HoiXviewHeldout.split(), Split::HeldoutTest);
    }
}
