//! Procedural multi-view hand-object world.
//!
//! Scenes live on a 64x64 canonical canvas: a left hand, a right hand and an
//! object. Verbs differ only in how the actors move, nouns only in the
//! object's shape and color. Each camera view is an affine map from the
//! canvas to frame pixels plus a background style and a color tint; the
//! egocentric view zooms in and shakes from frame to frame.
//!
//! Pixel `(w, h)` has its center at coordinate `(w, h)`; annotation centers
//! are the affine image of the canonical actor centers rounded to the nearest
//! pixel, and marked absent when that falls outside the frame.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PovError, Result};
use crate::masking::{FrameCenters, InteractionAnnotation};
use crate::rng;

pub const CANVAS: f64 = 64.0;

pub const VERB_NAMES: [&str; 6] = [
    "approach",
    "retreat",
    "rotate-cw",
    "rotate-ccw",
    "push-left",
    "push-right",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

pub const SHAPES: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];
pub const OBJECT_COLORS: [[u8; 3]; 2] = [[210, 50, 40], [40, 80, 215]];
const HAND_COLOR: [u8; 3] = [235, 190, 150];
const HAND_RADIUS: f64 = 5.5;
const OBJECT_HALF: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundStyle {
    Solid { color: [u8; 3] },
    VerticalGradient { top: [u8; 3], bottom: [u8; 3] },
    Checker { a: [u8; 3], b: [u8; 3], cell: u32 },
    Stripes { a: [u8; 3], b: [u8; 3], period: u32 },
}

/// One camera: `pixel = affine[..,0..2] * canonical + affine[..,2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub view_id: String,
    pub affine: [[f64; 3]; 2],
    pub background: BackgroundStyle,
    pub tint: [i16; 3],
    /// Per-frame translation noise in pixels (egocentric shake).
    pub jitter_std: f64,
}

impl ViewSpec {
    /// Rotation by `deg` and uniform `scale` about the canvas center, which
    /// lands at `center` (pixels) in the frame.
    pub fn camera(
        view_id: &str,
        deg: f64,
        scale: f64,
        center: [f64; 2],
        canonical_focus: [f64; 2],
        background: BackgroundStyle,
        tint: [i16; 3],
        jitter_std: f64,
    ) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        let a = [[scale * c, -scale * s], [scale * s, scale * c]];
        let tx = center[0] - (a[0][0] * canonical_focus[0] + a[0][1] * canonical_focus[1]);
        let ty = center[1] - (a[1][0] * canonical_focus[0] + a[1][1] * canonical_focus[1]);
        ViewSpec {
            view_id: view_id.to_string(),
            affine: [[a[0][0], a[0][1], tx], [a[1][0], a[1][1], ty]],
            background,
            tint,
            jitter_std,
        }
    }

    pub fn determinant(&self) -> f64 {
        self.affine[0][0] * self.affine[1][1] - self.affine[0][1] * self.affine[1][0]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.determinant().abs() > 1e-9) {
            return Err(PovError::Validation(format!(
                "view `{}` has a singular affine",
                self.view_id
            )));
        }
        if !(self.jitter_std >= 0.0) {
            return Err(PovError::Validation(format!(
                "view `{}` has negative jitter",
                self.view_id
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let a = &self.affine;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + a[0][2],
            a[1][0] * p[0] + a[1][1] * p[1] + a[1][2],
        ]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        let a = &self.affine;
        let det = self.determinant();
        let (x, y) = (q[0] - a[0][2], q[1] - a[1][2]);
        [
            (a[1][1] * x - a[0][1] * y) / det,
            (-a[1][0] * x + a[0][0] * y) / det,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub train_views: Vec<ViewSpec>,
    pub heldout_views: Vec<ViewSpec>,
    pub ego_view: ViewSpec,
    pub clips_per_action_per_view: usize,
    pub ego_tune_clips_per_action: usize,
    pub ego_test_clips_per_action: usize,
    pub heldout_clips_per_action_per_view: usize,
    /// Side of the interaction region written into annotations.
    pub box_size: u32,
    /// Amplitude of uniform per-pixel noise, in intensity levels.
    pub pixel_noise: u8,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        use BackgroundStyle::*;
        let c = [15.5, 15.5];
        let mid = [CANVAS / 2.0, CANVAS / 2.0];
        WorldSpec {
            num_verbs: 6,
            num_nouns: 6,
            frames: 4,
            height: 32,
            width: 32,
            train_views: vec![
                ViewSpec::camera("v1", 0.0, 0.5, c, mid, Solid { color: [70, 90, 70] }, [0, 0, 0], 0.0),
                ViewSpec::camera(
                    "v2",
                    40.0,
                    0.45,
                    c,
                    mid,
                    VerticalGradient { top: [40, 40, 60], bottom: [110, 110, 90] },
                    [12, -6, 0],
                    0.0,
                ),
                ViewSpec::camera(
                    "v3",
                    -40.0,
                    0.55,
                    c,
                    mid,
                    Checker { a: [80, 70, 60], b: [100, 90, 80], cell: 4 },
                    [-8, 8, 4],
                    0.0,
                ),
                ViewSpec::camera(
                    "v4",
                    90.0,
                    0.5,
                    c,
                    mid,
                    Stripes { a: [60, 60, 60], b: [90, 90, 90], period: 6 },
                    [0, 0, 14],
                    0.0,
                ),
            ],
            heldout_views: vec![
                ViewSpec::camera("h1", 135.0, 0.5, c, mid, Solid { color: [90, 70, 90] }, [6, 0, -6], 0.0),
                ViewSpec::camera(
                    "h2",
                    -90.0,
                    0.48,
                    c,
                    mid,
                    VerticalGradient { top: [90, 90, 60], bottom: [50, 60, 70] },
                    [-6, 4, 0],
                    0.0,
                ),
            ],
            // First-person: zoomed in on the work area just below the canvas
            // center, tilted, with per-frame shake.
            ego_view: ViewSpec::camera(
                "ego",
                15.0,
                0.7,
                c,
                [CANVAS / 2.0, CANVAS / 2.0 + 3.0],
                Checker { a: [95, 85, 75], b: [75, 70, 65], cell: 8 },
                [10, 10, -10],
                0.8,
            ),
            clips_per_action_per_view: 8,
            ego_tune_clips_per_action: 4,
            ego_test_clips_per_action: 8,
            heldout_clips_per_action_per_view: 2,
            box_size: 3,
            pixel_noise: 10,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn num_actions(&self) -> usize {
        self.num_verbs * self.num_nouns
    }

    pub fn all_views(&self) -> impl Iterator<Item = &ViewSpec> {
        self.train_views
            .iter()
            .chain(self.heldout_views.iter())
            .chain(std::iter::once(&self.ego_view))
    }

    pub fn view(&self, id: &str) -> Option<&ViewSpec> {
        self.all_views().find(|v| v.view_id == id)
    }

    pub fn train_view_ids(&self) -> Vec<String> {
        self.train_views.iter().map(|v| v.view_id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PovError::Validation(m));
        if self.num_verbs == 0 || self.num_verbs > VERB_NAMES.len() {
            return err(format!("num_verbs must be in 1..={}", VERB_NAMES.len()));
        }
        if self.num_nouns == 0 || self.num_nouns > SHAPES.len() * OBJECT_COLORS.len() {
            return err(format!(
                "num_nouns must be in 1..={}",
                SHAPES.len() * OBJECT_COLORS.len()
            ));
        }
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return err("need at least 2 frames and a non-empty canvas".into());
        }
        if self.train_views.is_empty() {
            return err("at least one training view is required".into());
        }
        if self.box_size == 0 {
            return err("box_size must be >= 1".into());
        }
        let mut seen = std::collections::HashSet::new();
        for v in self.all_views() {
            v.validate()?;
            if !seen.insert(v.view_id.as_str()) {
                return err(format!("duplicate view id `{}`", v.view_id));
            }
        }
        Ok(())
    }

    pub fn verb_name(&self, verb: usize) -> &'static str {
        VERB_NAMES[verb]
    }

    pub fn flipped_verb(&self, verb: usize) -> Option<usize> {
        flipped_verb(verb, self.num_verbs)
    }
}

/// Verb label of a horizontally flipped clip, when it is defined.
///
/// A pixel flip reverses rotation sense in every view and leaves
/// approach/retreat alone. Push direction is a canonical-frame notion and a
/// pixel flip under a rotated camera sends it off-axis, so push clips have no
/// flipped label.
pub fn flipped_verb(verb: usize, num_verbs: usize) -> Option<usize> {
    let m = match verb {
        0 | 1 => verb,
        2 => 3,
        3 => 2,
        _ => return None,
    };
    (m < num_verbs).then_some(m)
}

/// Canonical per-frame actor positions plus object appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub left: Vec<[f64; 2]>,
    pub right: Vec<[f64; 2]>,
    pub object: Vec<[f64; 2]>,
    pub shape: Shape,
    pub color: [u8; 3],
}

impl SceneScript {
    pub fn mirrored(&self) -> Self {
        let m = |v: &Vec<[f64; 2]>| v.iter().map(|&[x, y]| [CANVAS - x, y]).collect();
        SceneScript {
            left: m(&self.left),
            right: m(&self.right),
            object: m(&self.object),
            shape: self.shape,
            color: self.color,
        }
    }
}

fn polar(center: [f64; 2], r: f64, angle: f64) -> [f64; 2] {
    [center[0] + r * angle.cos(), center[1] + r * angle.sin()]
}

/// Deterministic canonical trajectories for a verb/noun pair.
pub fn script_scene(
    verb: usize,
    noun: usize,
    num_verbs: usize,
    num_nouns: usize,
    frames: usize,
    seed: u64,
) -> Result<SceneScript> {
    if verb >= num_verbs || noun >= num_nouns {
        return Err(PovError::Validation(format!(
            "verb {verb} / noun {noun} outside {num_verbs}x{num_nouns}"
        )));
    }
    if frames < 2 {
        return Err(PovError::Validation("a scene needs at least 2 frames".into()));
    }
    match verb {
        3 => return Ok(script_scene(2, noun, num_verbs.max(3), num_nouns, frames, seed)?.mirrored()),
        4 => return Ok(script_scene(5, noun, num_verbs.max(6), num_nouns, frames, seed)?.mirrored()),
        _ => {}
    }
    let mut r = rng::stream(seed, "scene");
    let base = [
        CANVAS / 2.0 + r.gen_range(-5.0..5.0),
        CANVAS / 2.0 + r.gen_range(-5.0..5.0),
    ];
    let phase: f64 = r.gen_range(-0.35..0.35);
    let reach: f64 = r.gen_range(0.9..1.1);
    let (pi, last) = (std::f64::consts::PI, (frames - 1) as f64);
    let shape = SHAPES[noun % SHAPES.len()];
    let color = OBJECT_COLORS[noun / SHAPES.len()];
    let mut s = SceneScript {
        left: Vec::with_capacity(frames),
        right: Vec::with_capacity(frames),
        object: Vec::with_capacity(frames),
        shape,
        color,
    };
    for t in 0..frames {
        let tau = t as f64 / last;
        let (l, rt, o) = match verb {
            // Hands close in on a resting object.
            0 | 1 => {
                let tau = if verb == 0 { tau } else { 1.0 - tau };
                let d = reach * (24.0 - 15.0 * tau);
                (polar(base, d, pi + phase), polar(base, d, -phase), base)
            }
            // Hands orbit the object; increasing angle is clockwise on screen.
            2 => {
                let a = phase + tau * pi / 2.0;
                let d = 13.0 * reach;
                (polar(base, d, pi + a), polar(base, d, a), base)
            }
            // Left hand pushes the object to the right; right hand rests below.
            _ => {
                let o = [base[0] - 9.0 + 18.0 * tau, base[1]];
                let l = [o[0] - 10.5, o[1] + phase * 6.0];
                let rt = [base[0] + 6.0, base[1] + 16.0 * reach];
                (l, rt, o)
            }
        };
        s.left.push(l);
        s.right.push(rt);
        s.object.push(o);
    }
    Ok(s)
}

fn inside_shape(shape: Shape, d: [f64; 2]) -> bool {
    match shape {
        Shape::Square => d[0].abs() <= OBJECT_HALF && d[1].abs() <= OBJECT_HALF,
        Shape::Circle => d[0] * d[0] + d[1] * d[1] <= OBJECT_HALF * OBJECT_HALF * 1.1,
        // Apex up; symmetric about the vertical axis.
        Shape::Triangle => {
            let h = 2.0 * OBJECT_HALF;
            let y = d[1] + OBJECT_HALF;
            (0.0..=h).contains(&y) && d[0].abs() <= OBJECT_HALF * y / h * 1.2
        }
    }
}

fn background(style: &BackgroundStyle, x: usize, y: usize, h: usize) -> [u8; 3] {
    match *style {
        BackgroundStyle::Solid { color } => color,
        BackgroundStyle::VerticalGradient { top, bottom } => {
            let t = y as f64 / (h.max(2) - 1) as f64;
            let mut c = [0u8; 3];
            for i in 0..3 {
                c[i] = (top[i] as f64 * (1.0 - t) + bottom[i] as f64 * t).round() as u8;
            }
            c
        }
        BackgroundStyle::Checker { a, b, cell } => {
            let cell = cell.max(1) as usize;
            if (x / cell + y / cell) % 2 == 0 {
                a
            } else {
                b
            }
        }
        BackgroundStyle::Stripes { a, b, period } => {
            let p = period.max(2) as usize;
            if (x + y) % p < p / 2 {
                a
            } else {
                b
            }
        }
    }
}

/// A rendered clip with labels and interaction annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub view_id: String,
    pub verb_id: usize,
    pub noun_id: usize,
    pub action_id: usize,
    pub frames: Array4<u8>,
    pub annotation: InteractionAnnotation,
    pub seed: u64,
}

/// Per-frame jitter offsets (pixels) for a view and seed.
pub fn frame_jitter(view: &ViewSpec, frames: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut r = rng::stream(seed, "jitter");
    (0..frames)
        .map(|_| {
            if view.jitter_std > 0.0 {
                [rng::normal(&mut r, view.jitter_std), rng::normal(&mut r, view.jitter_std)]
            } else {
                [0.0, 0.0]
            }
        })
        .collect()
}

fn annotate(view: &ViewSpec, p: [f64; 2], jitter: [f64; 2], w: usize, h: usize) -> Option<[u32; 2]> {
    let q = view.apply(p);
    let (x, y) = ((q[0] + jitter[0]).round(), (q[1] + jitter[1]).round());
    if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
        Some([x as u32, y as u32])
    } else {
        None
    }
}

/// Annotation centers implied by a script under a view (with its jitter).
pub fn annotation_for(
    script: &SceneScript,
    view: &ViewSpec,
    height: usize,
    width: usize,
    box_size: u32,
    seed: u64,
) -> InteractionAnnotation {
    let frames = script.object.len();
    let jitter = frame_jitter(view, frames, seed);
    InteractionAnnotation {
        centers: (0..frames)
            .map(|t| FrameCenters {
                left: annotate(view, script.left[t], jitter[t], width, height),
                right: annotate(view, script.right[t], jitter[t], width, height),
                object: annotate(view, script.object[t], jitter[t], width, height),
            })
            .collect(),
        box_size,
    }
}

/// Rasterizes a script through a view. Returns frames and annotation.
pub fn render_clip(
    script: &SceneScript,
    view: &ViewSpec,
    height: usize,
    width: usize,
    box_size: u32,
    pixel_noise: u8,
    seed: u64,
) -> (Array4<u8>, InteractionAnnotation) {
    let frames = script.object.len();
    let jitter = frame_jitter(view, frames, seed);
    let mut noise = rng::stream(seed, "pixel-noise");
    let mut out = Array4::zeros((frames, height, width, 3));
    let amp = pixel_noise as i32;
    for t in 0..frames {
        for y in 0..height {
            for x in 0..width {
                let p = view.invert([x as f64 - jitter[t][0], y as f64 - jitter[t][1]]);
                let hand = |c: [f64; 2]| {
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    dx * dx + dy * dy <= HAND_RADIUS * HAND_RADIUS
                };
                let o = script.object[t];
                let mut color = if hand(script.left[t]) || hand(script.right[t]) {
                    HAND_COLOR
                } else if inside_shape(script.shape, [p[0] - o[0], p[1] - o[1]]) {
                    script.color
                } else {
                    background(&view.background, x, y, height)
                };
                for c in 0..3 {
                    let n = if amp > 0 { noise.gen_range(-amp..=amp) } else { 0 };
                    let v = color[c] as i32 + view.tint[c] as i32 + n;
                    color[c] = v.clamp(0, 255) as u8;
                    out[[t, y, x, c]] = color[c];
                }
            }
        }
    }
    (
        out,
        annotation_for(script, view, height, width, box_size, seed),
    )
}
