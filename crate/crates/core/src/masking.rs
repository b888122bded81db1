//! Interactive masking prompts.
//!
//! A value field per role (left hand, right hand, object) is stamped into a
//! per-clip mask around that role's annotated center and added to the frames
//! before patch embedding. Hard fields hold fixed standard-normal values,
//! soft fields start at zero and are trained during pre-training only.
//!
//! The field is indexed at absolute coordinates `(t, h, w)`. A region of side
//! `s` covers `|h - y| <= s / 2` and `|w - x| <= s / 2` (integer division), so
//! an even `s` produces the odd side `2 * (s / 2) + 1`.

use ndarray::{Array2, Array3, Array4, ArrayView4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{PovError, Result};
use crate::params::{ParamRef, Partition};
use crate::real::Real;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRole {
    Left,
    Right,
    Object,
}

impl MaskRole {
    pub const ALL: [MaskRole; 3] = [MaskRole::Left, MaskRole::Right, MaskRole::Object];

    pub fn name(self) -> &'static str {
        match self {
            MaskRole::Left => "left",
            MaskRole::Right => "right",
            MaskRole::Object => "object",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Hard,
    Soft,
}

/// Per-frame pixel centers `[x, y]`; `None` when the actor is out of view.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCenters {
    pub left: Option<[u32; 2]>,
    pub right: Option<[u32; 2]>,
    pub object: Option<[u32; 2]>,
}

impl FrameCenters {
    pub fn get(&self, role: MaskRole) -> Option<[u32; 2]> {
        match role {
            MaskRole::Left => self.left,
            MaskRole::Right => self.right,
            MaskRole::Object => self.object,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionAnnotation {
    pub centers: Vec<FrameCenters>,
    pub box_size: u32,
}

impl InteractionAnnotation {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.box_size == 0 {
            return Err(PovError::Validation("box size must be >= 1".into()));
        }
        for (t, fc) in self.centers.iter().enumerate() {
            for role in MaskRole::ALL {
                if let Some([x, y]) = fc.get(role) {
                    if x as usize >= width || y as usize >= height {
                        return Err(PovError::Validation(format!(
                            "{} center ({x}, {y}) at frame {t} outside {width}x{height}",
                            role.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Mirror about the vertical axis of a frame of the given width.
    pub fn flipped(&self, width: usize) -> Self {
        let flip = |c: Option<[u32; 2]>| c.map(|[x, y]| [(width as u32 - 1) - x, y]);
        InteractionAnnotation {
            centers: self
                .centers
                .iter()
                .map(|fc| FrameCenters {
                    // Mirroring an image swaps which side each hand is on but not
                    // which hand it is; roles are kept.
                    left: flip(fc.left),
                    right: flip(fc.right),
                    object: flip(fc.object),
                })
                .collect(),
            box_size: self.box_size,
        }
    }

    /// Clipped inclusive pixel bounds `(h0, h1, w0, w1)` for a role at frame `t`.
    pub fn region(
        &self,
        role: MaskRole,
        t: usize,
        height: usize,
        width: usize,
    ) -> Option<(usize, usize, usize, usize)> {
        let [x, y] = self.centers.get(t)?.get(role)?;
        let half = (self.box_size / 2) as usize;
        let (x, y) = (x as usize, y as usize);
        Some((
            y.saturating_sub(half),
            (y + half).min(height - 1),
            x.saturating_sub(half),
            (x + half).min(width - 1),
        ))
    }
}

/// Value function `g(t, h, w)` for one role.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskValueField<F> {
    pub role: MaskRole,
    pub kind: MaskKind,
    values: Array3<F>,
}

impl<F: Real> MaskValueField<F> {
    pub fn init(
        role: MaskRole,
        kind: MaskKind,
        frames: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Self {
        let values = match kind {
            MaskKind::Soft => Array3::zeros((frames, height, width)),
            MaskKind::Hard => {
                let mut rng = rng::stream(seed, &format!("mask-field/{}", role.name()));
                Array3::from_shape_simple_fn((frames, height, width), || rng::normal(&mut rng, 1.0))
            }
        };
        Self { role, kind, values }
    }

    pub fn from_values(role: MaskRole, kind: MaskKind, values: Array3<F>) -> Self {
        Self { role, kind, values }
    }

    pub fn trainable(&self) -> bool {
        self.kind == MaskKind::Soft
    }

    pub fn values(&self) -> &Array3<F> {
        &self.values
    }

    /// Mutable access is only granted to trainable fields.
    pub fn values_mut(&mut self) -> Option<&mut Array3<F>> {
        match self.kind {
            MaskKind::Soft => Some(&mut self.values),
            MaskKind::Hard => None,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Builds the `H x W` mask slice of one role at frame `t`.
pub fn build_mask<F: Real>(
    annotation: &InteractionAnnotation,
    field: &MaskValueField<F>,
    t: usize,
) -> Array2<F> {
    let (_, h, w) = field.dims();
    let mut out = Array2::zeros((h, w));
    if let Some((h0, h1, w0, w1)) = annotation.region(field.role, t, h, w) {
        for y in h0..=h1 {
            for x in w0..=w1 {
                out[[y, x]] = field.values[[t, y, x]];
            }
        }
    }
    out
}

/// The three role fields used together during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFields<F> {
    pub kind: MaskKind,
    fields: [MaskValueField<F>; 3],
}

/// One `T x H x W` mask per role, in role order.
pub type MaskStack<F> = [Array3<F>; 3];

impl<F: Real> MaskFields<F> {
    pub fn init(kind: MaskKind, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        let f = |role| MaskValueField::init(role, kind, frames, height, width, seed);
        Self {
            kind,
            fields: [f(MaskRole::Left), f(MaskRole::Right), f(MaskRole::Object)],
        }
    }

    pub fn from_fields(fields: [MaskValueField<F>; 3]) -> Result<Self> {
        let kind = fields[0].kind;
        for (i, f) in fields.iter().enumerate() {
            if f.role != MaskRole::ALL[i] || f.kind != kind || f.dims() != fields[0].dims() {
                return Err(PovError::Integrity(
                    "mask fields must be left/right/object with one kind and shape".into(),
                ));
            }
        }
        Ok(Self { kind, fields })
    }

    pub fn field(&self, role: MaskRole) -> &MaskValueField<F> {
        &self.fields[role.index()]
    }

    pub fn field_mut(&mut self, role: MaskRole) -> &mut MaskValueField<F> {
        &mut self.fields[role.index()]
    }

    pub fn fields(&self) -> &[MaskValueField<F>; 3] {
        &self.fields
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.fields[0].dims()
    }

    pub fn trainable(&self) -> bool {
        self.kind == MaskKind::Soft
    }

    /// Soft fields register as `mask_prompt` parameters; hard fields are buffers.
    pub fn param_refs(&self) -> Vec<ParamRef<'_, F>> {
        if !self.trainable() {
            return Vec::new();
        }
        self.fields
            .iter()
            .map(|f| ParamRef {
                name: format!("mask.{}", f.role.name()),
                shape: f.values.shape().to_vec(),
                values: f.values.as_slice().expect("standard layout"),
            })
            .collect()
    }

    pub fn partition(&self) -> Partition {
        Partition::MaskPrompt
    }

    pub fn param_count(&self) -> usize {
        if self.trainable() {
            self.fields.iter().map(|f| f.values.len()).sum()
        } else {
            0
        }
    }

    /// Stamps all three masks for a clip.
    pub fn build(&self, annotation: &InteractionAnnotation) -> MaskStack<F> {
        let (t_len, h, w) = self.dims();
        let one = |field: &MaskValueField<F>| {
            let mut m = Array3::zeros((t_len, h, w));
            for t in 0..t_len {
                m.index_axis_mut(Axis(0), t)
                    .assign(&build_mask(annotation, field, t));
            }
            m
        };
        [
            one(&self.fields[0]),
            one(&self.fields[1]),
            one(&self.fields[2]),
        ]
    }

    /// Routes a gradient w.r.t. the masked frames into the field values that
    /// were stamped for this annotation.
    pub fn accumulate_grad(
        &self,
        annotation: &InteractionAnnotation,
        frame_grad: &Array4<F>,
        out: &mut [Array3<F>; 3],
    ) {
        let (t_len, h, w) = self.dims();
        for role in MaskRole::ALL {
            let g = &mut out[role.index()];
            for t in 0..t_len {
                if let Some((h0, h1, w0, w1)) = annotation.region(role, t, h, w) {
                    for y in h0..=h1 {
                        for x in w0..=w1 {
                            let mut s = F::zero();
                            for c in 0..3 {
                                s += frame_grad[[t, y, x, c]];
                            }
                            g[[t, y, x]] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `frames'[t,h,w,c] = frames[t,h,w,c] + sum_i masks[i][t,h,w]`.
pub fn apply_masks<F: Real>(frames: ArrayView4<'_, F>, masks: &MaskStack<F>) -> Result<Array4<F>> {
    let (t, h, w, c) = frames.dim();
    for m in masks.iter() {
        if m.dim() != (t, h, w) {
            return Err(PovError::Config(format!(
                "mask shape {:?} does not match frames {:?}",
                m.dim(),
                (t, h, w)
            )));
        }
    }
    if c != 3 {
        return Err(PovError::Config(format!("expected 3 channels, got {c}")));
    }
    let mut total = masks[0].clone();
    total += &masks[1];
    total += &masks[2];
    let mut out = frames.to_owned();
    for ch in 0..3 {
        Zip::from(out.index_axis_mut(Axis(3), ch))
            .and(&total)
            .for_each(|o, &m| *o += m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(center: Option<[u32; 2]>, s: u32, frames: usize) -> InteractionAnnotation {
        InteractionAnnotation {
            centers: (0..frames)
                .map(|_| FrameCenters {
                    left: center,
                    right: None,
                    object: None,
                })
                .collect(),
            box_size: s,
        }
    }

    fn ones_field(role: MaskRole) -> MaskValueField<f64> {
        MaskValueField::from_values(role, MaskKind::Hard, Array3::from_elem((4, 32, 32), 1.0))
    }

    #[test]
    fn soft_field_starts_at_zero() {
        let f = MaskValueField::<f64>::init(MaskRole::Object, MaskKind::Soft, 4, 32, 32, 5);
        assert_eq!(f.dims(), (4, 32, 32));
        assert!(f.values().iter().all(|&v| v == 0.0));
        assert!(f.trainable());
    }

    #[test]
    fn hard_field_is_seeded_standard_normal() {
        let a = MaskValueField::<f64>::init(MaskRole::Left, MaskKind::Hard, 4, 32, 32, 11);
        let b = MaskValueField::<f64>::init(MaskRole::Left, MaskKind::Hard, 4, 32, 32, 11);
        assert_eq!(a, b);
        let mean = a.values().mean().unwrap();
        assert!(mean.abs() < 0.1, "mean {mean}");
        let mut hard = a;
        assert!(hard.values_mut().is_none());
    }

    #[test]
    fn unit_box_marks_single_pixel() {
        let m = build_mask(&ann(Some([10, 10]), 1, 4), &ones_field(MaskRole::Left), 0);
        assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(m[[10, 10]], 1.0);
    }

    #[test]
    fn absent_center_gives_zero_slice() {
        let m = build_mask(&ann(None, 5, 4), &ones_field(MaskRole::Left), 2);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interior_and_corner_counts() {
        let field = ones_field(MaskRole::Left);
        let interior = build_mask(&ann(Some([15, 12]), 5, 4), &field, 1);
        assert_eq!(interior.iter().filter(|&&v| v != 0.0).count(), 25);
        let corner = build_mask(&ann(Some([0, 0]), 5, 4), &field, 1);
        assert_eq!(corner.iter().filter(|&&v| v != 0.0).count(), 9);
    }

    #[test]
    fn even_size_rounds_to_odd_side() {
        let m = build_mask(&ann(Some([15, 15]), 4, 4), &ones_field(MaskRole::Left), 0);
        assert_eq!(m.iter().filter(|&&v| v != 0.0).count(), 25);
    }

    #[test]
    fn role_reads_its_own_center() {
        let m = build_mask(&ann(Some([3, 3]), 3, 4), &ones_field(MaskRole::Right), 0);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_masks_leave_frames_bitwise() {
        let frames = Array4::from_shape_fn((2, 4, 4, 3), |(a, b, c, d)| {
            (a * 31 + b * 7 + c * 3 + d) as f64 * 0.37 - 5.0
        });
        let z = Array3::zeros((2, 4, 4));
        let out = apply_masks(frames.view(), &[z.clone(), z.clone(), z]).unwrap();
        assert_eq!(out, frames);
    }

    #[test]
    fn single_pixel_changes_three_entries() {
        let frames = Array4::<f64>::zeros((2, 4, 4, 3));
        let mut m = Array3::zeros((2, 4, 4));
        m[[1, 2, 3]] = 0.5;
        let z = Array3::zeros((2, 4, 4));
        let out = apply_masks(frames.view(), &[z.clone(), m.clone(), z.clone()]).unwrap();
        let diff: Vec<_> = out
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect();
        assert_eq!(diff.len(), 3);
        assert!(diff.iter().all(|(i, v)| *v == 0.5 && i.0 == 1 && i.1 == 2 && i.2 == 3));
        // Order of masks does not matter.
        let swapped = apply_masks(frames.view(), &[m, z.clone(), z]).unwrap();
        assert_eq!(swapped, out);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let frames = Array4::<f64>::zeros((2, 4, 4, 3));
        let bad = Array3::zeros((2, 4, 5));
        let z = Array3::zeros((2, 4, 4));
        assert!(matches!(
            apply_masks(frames.view(), &[bad, z.clone(), z]),
            Err(PovError::Config(_))
        ));
    }

    #[test]
    fn flip_mirrors_x() {
        let a = ann(Some([2, 5]), 1, 1).flipped(32);
        assert_eq!(a.centers[0].left, Some([29, 5]));
    }
}
