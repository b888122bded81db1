//! Shared test fixtures and the finite-difference gradient oracle.
#![allow(dead_code)]

use ndarray::Array4;
use pov_core::masking::{FrameCenters, InteractionAnnotation, MaskFields, MaskKind, MaskRole};
use pov_core::rng;
use pov_core::{ModelConfig, ModelState, ViewPromptBank};
use rand::Rng;

/// Under 5k parameters in total (model + bank + soft masks).
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        height: 8,
        width: 8,
        patch_size: 4,
        embed_dim: 8,
        num_layers: 3,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_verbs: 2,
        num_nouns: 3,
        block_schedule: vec![1, 3],
        seed: 21,
    }
}

pub fn view_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("v{i}")).collect()
}

pub fn random_frames(cfg: &ModelConfig, seed: u64) -> Array4<f64> {
    let mut r = rng::stream(seed, "test-frames");
    Array4::from_shape_simple_fn((cfg.frames, cfg.height, cfg.width, 3), || {
        rng::normal(&mut r, 1.0)
    })
}

pub fn random_annotation(cfg: &ModelConfig, seed: u64) -> InteractionAnnotation {
    let mut r = rng::stream(seed, "test-annotation");
    let pick = |r: &mut rand_chacha::ChaCha8Rng| {
        if r.gen_bool(0.85) {
            Some([r.gen_range(0..cfg.width as u32), r.gen_range(0..cfg.height as u32)])
        } else {
            None
        }
    };
    InteractionAnnotation {
        centers: (0..cfg.frames)
            .map(|_| FrameCenters {
                left: pick(&mut r),
                right: pick(&mut r),
                object: pick(&mut r),
            })
            .collect(),
        box_size: 3,
    }
}

/// Everything a loss can depend on, cloned per perturbation.
#[derive(Clone)]
pub struct Bundle {
    pub model: ModelState<f64>,
    pub bank: ViewPromptBank<f64>,
    pub masks: MaskFields<f64>,
}

impl Bundle {
    pub fn tiny(num_views: usize, seed: u64) -> Self {
        let cfg = ModelConfig {
            seed,
            ..tiny_config()
        };
        let model = ModelState::new(cfg.clone()).unwrap();
        let bank =
            ViewPromptBank::init(&view_ids(num_views), &cfg.block_schedule, 2, cfg.embed_dim, seed)
                .unwrap();
        let mut masks = MaskFields::init(MaskKind::Soft, cfg.frames, cfg.height, cfg.width, seed);
        // Non-zero soft values so the masked forward differs from the plain one.
        let mut r = rng::stream(seed, "soft-init");
        for role in MaskRole::ALL {
            if let Some(v) = masks.field_mut(role).values_mut() {
                v.mapv_inplace(|_| rng::normal(&mut r, 0.5));
            }
        }
        let n = model.data().len() + bank.data().len() + masks.param_count();
        assert!(n <= 5000, "gradient-check instance has {n} parameters");
        Bundle { model, bank, masks }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Model,
    Bank,
    Masks,
}

fn coord_mut(b: &mut Bundle, target: Target, i: usize) -> &mut f64 {
    match target {
        Target::Model => &mut b.model.data_mut()[i],
        Target::Bank => &mut b.bank.data_mut()[i],
        Target::Masks => {
            let (t, h, w) = b.masks.dims();
            let per = t * h * w;
            let role = MaskRole::ALL[i / per];
            let v = b.masks.field_mut(role).values_mut().expect("soft");
            &mut v.as_slice_mut().unwrap()[i % per]
        }
    }
}

pub fn target_len(b: &Bundle, target: Target) -> usize {
    match target {
        Target::Model => b.model.data().len(),
        Target::Bank => b.bank.data().len(),
        Target::Masks => b.masks.param_count(),
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates with a gradient large enough for the relative error to
    /// mean something.
    pub significant: usize,
    pub max_rel: f64,
    pub failures: Vec<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
/// Below this absolute gap the comparison is limited by finite-difference
/// round-off rather than by the analytic gradient.
pub const FD_ABS_FLOOR: f64 = 1e-8;

/// Central differences at the given coordinates, compared with `analytic`.
pub fn fd_check(
    base: &Bundle,
    target: Target,
    coords: &[usize],
    analytic: &[f64],
    loss: impl Fn(&Bundle) -> f64,
) -> FdReport {
    let mut report = FdReport::default();
    for &i in coords {
        let mut plus = base.clone();
        *coord_mut(&mut plus, target, i) += FD_STEP;
        let mut minus = base.clone();
        *coord_mut(&mut minus, target, i) -= FD_STEP;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
        let a = analytic[i];
        let gap = (a - numeric).abs();
        let scale = a.abs().max(numeric.abs());
        let rel = if scale > 0.0 { gap / scale } else { 0.0 };
        report.checked += 1;
        if scale > 1e-6 {
            report.max_rel = report.max_rel.max(rel);
            report.significant += 1;
        }
        if gap > FD_ABS_FLOOR && rel > FD_REL_TOL {
            report
                .failures
                .push(format!("{target:?}[{i}]: analytic {a:e} vs numeric {numeric:e}"));
        }
    }
    report
}

/// `count` distinct random coordinates in `0..len`, optionally restricted to
/// those where `keep` holds.
pub fn pick_coords(len: usize, count: usize, seed: u64, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut r = rng::stream(seed, "coords");
    let mut out = Vec::new();
    let mut tries = 0;
    while out.len() < count && tries < 100_000 {
        let i = r.gen_range(0..len);
        if keep(i) && !out.contains(&i) {
            out.push(i);
        }
        tries += 1;
    }
    out
}
