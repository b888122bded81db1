//! Analytic gradients of every objective against central finite differences
//! on a tiny 64-bit instance.

mod support;

use ndarray::Array1;
use pov_core::objectives::{
    action_loss, cross_view_alignment_batch, ego_few_shot_loss, ego_zero_shot_loss, stage2_loss,
    view_loss, ActionSample, GradTargets, ViewSample,
};
use support::*;

const COORDS: usize = 24;

fn assert_report(name: &str, r: &FdReport) {
    assert!(r.checked >= 20, "{name}: only {} coordinates", r.checked);
    assert!(r.failures.is_empty(), "{name}: {:#?}", r.failures);
}

#[test]
fn action_loss_gradients() {
    let b = Bundle::tiny(3, 1);
    let cfg = b.model.config().clone();
    let frames: Vec<_> = (0..3).map(|i| random_frames(&cfg, 10 + i)).collect();
    let anns: Vec<_> = (0..3).map(|i| random_annotation(&cfg, 20 + i)).collect();
    let loss = |b: &Bundle, t: GradTargets| {
        let batch: Vec<_> = frames
            .iter()
            .zip(&anns)
            .enumerate()
            .map(|(i, (f, a))| ActionSample {
                frames: f.view(),
                annotation: Some(a),
                label: i * 2 % cfg.num_actions(),
            })
            .collect();
        action_loss(&b.model, Some(&b.masks), &batch, t).unwrap()
    };
    let (_, g) = loss(&b, GradTargets::ALL);
    let gm = g.model.unwrap();
    let coords = pick_coords(gm.len(), COORDS, 1, |_| true);
    assert_report(
        "act/model",
        &fd_check(&b, Target::Model, &coords, &gm, |b| loss(b, GradTargets::default()).0.scalar),
    );

    // Soft mask values: non-zero inside stamped regions only.
    let gmask: Vec<f64> = g.masks.unwrap().iter().flat_map(|a| a.iter().copied()).collect();
    let nonzero: Vec<usize> = (0..gmask.len()).filter(|&i| gmask[i] != 0.0).collect();
    assert!(!nonzero.is_empty());
    let coords = pick_coords(gmask.len(), COORDS, 2, |i| nonzero.contains(&i));
    assert_report(
        "act/masks",
        &fd_check(&b, Target::Masks, &coords, &gmask, |b| loss(b, GradTargets::default()).0.scalar),
    );
    let outside = pick_coords(gmask.len(), 10, 3, |i| !nonzero.contains(&i));
    let r = fd_check(&b, Target::Masks, &outside, &gmask, |b| loss(b, GradTargets::default()).0.scalar);
    assert!(r.failures.is_empty(), "{:?}", r.failures);
}

fn view_batch(cfg: &pov_core::ModelConfig, views: usize) -> Vec<(ndarray::Array4<f64>, usize, usize)> {
    (0..3)
        .map(|i| (random_frames(cfg, 40 + i as u64), i % views, (i * 5 + 1) % cfg.num_actions()))
        .collect()
}

fn as_samples(v: &[(ndarray::Array4<f64>, usize, usize)]) -> Vec<ViewSample<'_, f64>> {
    v.iter()
        .map(|(f, view, label)| ViewSample {
            frames: f.view(),
            view: *view,
            label: Some(*label),
        })
        .collect()
}

#[test]
fn view_and_cross_view_gradients() {
    let b = Bundle::tiny(3, 2);
    let data = view_batch(b.model.config(), 3);
    type LossFn = fn(&Bundle, &[ViewSample<'_, f64>], GradTargets) -> (f64, Vec<f64>, Vec<f64>);
    let cases: [(&str, LossFn); 3] = [
        ("view", |b, s, t| {
            let (l, g) = view_loss(&b.model, &b.bank, s, t).unwrap();
            (l.scalar, g.model.unwrap_or_default(), g.bank.unwrap_or_default())
        }),
        ("cross", |b, s, t| {
            let (l, g) = cross_view_alignment_batch(&b.model, &b.bank, s, t).unwrap();
            (l.scalar, g.model.unwrap_or_default(), g.bank.unwrap_or_default())
        }),
        ("stage2", |b, s, t| {
            let (l, g) = stage2_loss(&b.model, &b.bank, s, 0.001, t).unwrap();
            (l.scalar, g.model.unwrap_or_default(), g.bank.unwrap_or_default())
        }),
    ];
    for (name, f) in cases {
        let samples = as_samples(&data);
        let (value, gm, gb) = f(&b, &samples, GradTargets::ALL);
        assert!(value.is_finite());
        let eval = |b: &Bundle| f(b, &as_samples(&data), GradTargets::default()).0;
        let coords = pick_coords(gb.len(), COORDS, 4, |_| true);
        assert_report(&format!("{name}/bank"), &fd_check(&b, Target::Bank, &coords, &gb, eval));
        let coords = pick_coords(gm.len(), COORDS, 5, |_| true);
        assert_report(&format!("{name}/model"), &fd_check(&b, Target::Model, &coords, &gm, eval));
    }
}

#[test]
fn ego_objective_gradients() {
    let b = Bundle::tiny(3, 3);
    let cfg = b.model.config().clone();
    let frames: Vec<_> = (0..4).map(|i| random_frames(&cfg, 60 + i)).collect();

    let im = |b: &Bundle, t: GradTargets| {
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        ego_zero_shot_loss(&b.model, &b.bank, &views, t).unwrap()
    };
    let (_, g) = im(&b, GradTargets::ALL);
    let gb = g.bank.unwrap();
    let gm = g.model.unwrap();
    let eval = |b: &Bundle| im(b, GradTargets::default()).0.scalar;
    assert_report("im/bank", &fd_check(&b, Target::Bank, &pick_coords(gb.len(), COORDS, 6, |_| true), &gb, eval));
    assert_report("im/model", &fd_check(&b, Target::Model, &pick_coords(gm.len(), COORDS, 7, |_| true), &gm, eval));

    let few = |b: &Bundle, t: GradTargets| {
        let batch: Vec<_> = frames.iter().enumerate().map(|(i, f)| (f.view(), i % 6)).collect();
        ego_few_shot_loss(&b.model, &b.bank, &batch, t).unwrap()
    };
    let (_, g) = few(&b, GradTargets::ALL);
    let gb = g.bank.unwrap();
    let eval = |b: &Bundle| few(b, GradTargets::default()).0.scalar;
    assert_report("few/bank", &fd_check(&b, Target::Bank, &pick_coords(gb.len(), COORDS, 8, |_| true), &gb, eval));
}

#[test]
fn joint_prompt_gradient_is_shared_by_all_views() {
    let b = Bundle::tiny(3, 4);
    let cfg = b.model.config().clone();
    let frames: Vec<_> = (0..3).map(|i| random_frames(&cfg, 80 + i)).collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let (_, g) = ego_zero_shot_loss(&b.model, &b.bank, &views, GradTargets::PROMPTS).unwrap();
    assert!(g.model.is_none());
    let gb = Array1::from(g.bank.unwrap());
    let per_view = gb.len() / 3;
    for v in 1..3 {
        for k in 0..per_view {
            assert_eq!(gb[k], gb[v * per_view + k]);
        }
    }
}
