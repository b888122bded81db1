//! Small video vision transformer with block-scheduled prompt tokens.
//!
//! Layout of a token sequence is `[class, video tokens, prompt tokens]`.
//! Prompt tokens attached to a block are dropped at the block's end and
//! replaced by the next block's prompts; only the class token reaches the
//! head. Layers are pre-norm: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
//!
//! Backward passes are hand-written and checked against central finite
//! differences in the test suite.

use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{
    s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, ArrayViewMut1, ArrayViewMut2,
    Axis,
};

use crate::config::ModelConfig;
use crate::error::{PovError, Result};
use crate::masking::{apply_masks, MaskFields, MaskStack};
use crate::params::{ParamLayout, ParamRef, Partition, PartitionSet};
use crate::prompts::ViewPromptBank;
use crate::real::{r, Real};
use crate::rng;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct LayerIndex {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    proj_w: usize,
    proj_b: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct ModelIndex {
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    cls: usize,
    layers: Vec<LayerIndex>,
    norm_g: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

fn build_layout(cfg: &ModelConfig) -> (ParamLayout, ModelIndex) {
    use Partition::{Backbone, Head};
    let d = cfg.embed_dim;
    let hid = cfg.hidden_dim();
    let mut l = ParamLayout::new();
    let patch_w = l.push("patch_embed.weight", Backbone, &[cfg.patch_dim(), d]);
    let patch_b = l.push("patch_embed.bias", Backbone, &[d]);
    let pos = l.push("pos_embed", Backbone, &[1 + cfg.video_token_count(), d]);
    let cls = l.push("cls_token", Backbone, &[d]);
    let layers = (0..cfg.num_layers)
        .map(|i| {
            let mut p = |n: &str, shape: &[usize]| l.push(format!("layers.{i}.{n}"), Backbone, shape);
            LayerIndex {
                ln1_g: p("norm1.weight", &[d]),
                ln1_b: p("norm1.bias", &[d]),
                qkv_w: p("attn.qkv.weight", &[d, 3 * d]),
                qkv_b: p("attn.qkv.bias", &[3 * d]),
                proj_w: p("attn.proj.weight", &[d, d]),
                proj_b: p("attn.proj.bias", &[d]),
                ln2_g: p("norm2.weight", &[d]),
                ln2_b: p("norm2.bias", &[d]),
                fc1_w: p("mlp.fc1.weight", &[d, hid]),
                fc1_b: p("mlp.fc1.bias", &[hid]),
                fc2_w: p("mlp.fc2.weight", &[hid, d]),
                fc2_b: p("mlp.fc2.bias", &[d]),
            }
        })
        .collect();
    let norm_g = l.push("norm.weight", Backbone, &[d]);
    let norm_b = l.push("norm.bias", Backbone, &[d]);
    let head_w = l.push("head.weight", Head, &[d, cfg.num_actions()]);
    let head_b = l.push("head.bias", Head, &[cfg.num_actions()]);
    (
        l,
        ModelIndex {
            patch_w,
            patch_b,
            pos,
            cls,
            layers,
            norm_g,
            norm_b,
            head_w,
            head_b,
        },
    )
}

/// Backbone and head parameters in one flat buffer.
#[derive(Debug, Clone)]
pub struct ModelState<F> {
    config: ModelConfig,
    layout: ParamLayout,
    idx: ModelIndex,
    data: Vec<F>,
    pub version_tag: String,
}

/// Token matrix plus bookkeeping of which rows are what.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F> {
    pub tokens: Array2<F>,
    pub video_token_count: usize,
    pub prompt_token_count: usize,
}

impl<F: Real> TokenSequence<F> {
    pub fn count(&self) -> usize {
        self.tokens.nrows()
    }

    /// Replaces whatever prompt rows are present with `prompts`.
    pub fn with_prompts(&self, prompts: Option<ArrayView2<'_, F>>) -> Self {
        let keep = 1 + self.video_token_count;
        let n = prompts.map(|p| p.nrows()).unwrap_or(0);
        let d = self.tokens.ncols();
        let mut tokens = Array2::zeros((keep + n, d));
        tokens
            .slice_mut(s![..keep, ..])
            .assign(&self.tokens.slice(s![..keep, ..]));
        if let Some(p) = prompts {
            tokens.slice_mut(s![keep.., ..]).assign(&p);
        }
        TokenSequence {
            tokens,
            video_token_count: self.video_token_count,
            prompt_token_count: n,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    xhat1: Array2<F>,
    rstd1: Array1<F>,
    h1: Array2<F>,
    qkv: Array2<F>,
    attn: Vec<Array2<F>>,
    o: Array2<F>,
    xhat2: Array2<F>,
    rstd2: Array1<F>,
    h2: Array2<F>,
    u: Array2<F>,
    g: Array2<F>,
}

/// Intermediate values retained for one sample's backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    patches: Array2<F>,
    blocks: Vec<(usize, Vec<LayerCache<F>>)>,
    cls_xhat: Array1<F>,
    cls_rstd: F,
    feature: Array1<F>,
    frame_dims: (usize, usize, usize),
}

impl<F: Real> ForwardCache<F> {
    /// Final-norm class token (the head input).
    pub fn feature(&self) -> &Array1<F> {
        &self.feature
    }
}

/// Gradients that do not live in the model buffer.
#[derive(Debug, Clone)]
pub struct BackwardOutput<F> {
    /// One `n x embed_dim` gradient per block (empty rows when no prompts).
    pub prompt_grads: Vec<Array2<F>>,
    /// Gradient w.r.t. the (possibly masked) input frames, when requested.
    pub frame_grad: Option<Array4<F>>,
}

fn layer_norm<F: Real>(
    x: &Array2<F>,
    g: ArrayView1<'_, F>,
    b: ArrayView1<'_, F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let (rows, d) = x.dim();
    let inv_d = F::one() / r::<F>(d as f64);
    let mut xhat = Array2::zeros((rows, d));
    let mut rstd = Array1::zeros(rows);
    let mut y = Array2::zeros((rows, d));
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + r(LN_EPS)).sqrt();
        rstd[i] = rs;
        for k in 0..d {
            let xh = (row[k] - mean) * rs;
            xhat[[i, k]] = xh;
            y[[i, k]] = xh * g[k] + b[k];
        }
    }
    (y, xhat, rstd)
}

fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    rstd: &Array1<F>,
    g: ArrayView1<'_, F>,
    mut dg: ArrayViewMut1<'_, F>,
    mut db: ArrayViewMut1<'_, F>,
) -> Array2<F> {
    let (rows, d) = dy.dim();
    let inv_d = F::one() / r::<F>(d as f64);
    let mut dx = Array2::zeros((rows, d));
    let mut dxhat = vec![F::zero(); d];
    for i in 0..rows {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for k in 0..d {
            let dyk = dy[[i, k]];
            dg[k] += dyk * xhat[[i, k]];
            db[k] += dyk;
            dxhat[k] = dyk * g[k];
            mean_dxhat += dxhat[k];
            mean_dxhat_xhat += dxhat[k] * xhat[[i, k]];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for k in 0..d {
            dx[[i, k]] = rstd[i] * (dxhat[k] - mean_dxhat - xhat[[i, k]] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu<F: Real>(u: F) -> F {
    let half: F = r(0.5);
    half * u * (F::one() + (r::<F>(GELU_K) * (u + r::<F>(GELU_C) * u * u * u)).tanh())
}

fn gelu_grad<F: Real>(u: F) -> F {
    let half: F = r(0.5);
    let k: F = r(GELU_K);
    let c: F = r(GELU_C);
    let t = (k * (u + c * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * k * (F::one() + r::<F>(3.0) * c * u * u)
}

fn add_row_bias<F: Real>(x: &mut Array2<F>, b: ArrayView1<'_, F>) {
    for mut row in x.rows_mut() {
        row += &b;
    }
}

fn softmax_rows_inplace<F: Real>(a: &mut Array2<F>) {
    for mut row in a.rows_mut() {
        let m = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        row /= sum;
    }
}

impl<F: Real> ModelState<F> {
    /// Random initialization: truncated normal (std 0.02) for matrices,
    /// embeddings and tokens; ones/zeros for norms; zeros for biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut state = Self::zeros(config)?;
        let mut rng = rng::stream(state.config.seed, "model-init");
        let entries = state.layout.entries().to_vec();
        for e in entries {
            let slot = &mut state.data[e.range()];
            if e.name.ends_with("norm1.weight")
                || e.name.ends_with("norm2.weight")
                || e.name == "norm.weight"
            {
                slot.fill(F::one());
            } else if e.name.ends_with(".bias") {
                slot.fill(F::zero());
            } else {
                for v in slot.iter_mut() {
                    *v = rng::trunc_normal(&mut rng, INIT_STD);
                }
            }
        }
        Ok(state)
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, idx) = build_layout(&config);
        let data = vec![F::zero(); layout.total()];
        Ok(Self {
            config,
            layout,
            idx,
            data,
            version_tag: "pov-vit-v1".to_string(),
        })
    }

    pub fn from_data(config: ModelConfig, data: Vec<F>) -> Result<Self> {
        let mut state = Self::zeros(config)?;
        if data.len() != state.data.len() {
            return Err(PovError::Integrity(format!(
                "model buffer has {} values, layout needs {}",
                data.len(),
                state.data.len()
            )));
        }
        state.data = data;
        Ok(state)
    }

    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            idx: self.idx.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            version_tag: self.version_tag.clone(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn param_refs(&self) -> Vec<(Partition, ParamRef<'_, F>)> {
        self.layout
            .entries()
            .iter()
            .map(|e| {
                (
                    e.partition,
                    ParamRef {
                        name: e.name.clone(),
                        shape: e.shape.clone(),
                        values: &self.data[e.range()],
                    },
                )
            })
            .collect()
    }

    fn v1(&self, off: usize, n: usize) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.data[off..off + n])
    }

    fn v2(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((rows, cols), &self.data[off..off + rows * cols]).expect("layout")
    }

    /// Splits frames into patch rows ordered by (frame, patch row, patch col);
    /// each row is laid out as (dy, dx, channel).
    fn patchify(&self, frames: ArrayView4<'_, F>) -> Array2<F> {
        let c = &self.config;
        let p = c.patch_size;
        let (gh, gw) = (c.height / p, c.width / p);
        let mut out = Array2::zeros((c.video_token_count(), c.patch_dim()));
        for t in 0..c.frames {
            for py in 0..gh {
                for px in 0..gw {
                    let row = (t * gh + py) * gw + px;
                    let mut k = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..3 {
                                out[[row, k]] = frames[[t, py * p + dy, px * p + dx, ch]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn unpatchify(&self, dpatches: &Array2<F>) -> Array4<F> {
        let c = &self.config;
        let p = c.patch_size;
        let (gh, gw) = (c.height / p, c.width / p);
        let mut out = Array4::zeros((c.frames, c.height, c.width, 3));
        for t in 0..c.frames {
            for py in 0..gh {
                for px in 0..gw {
                    let row = (t * gh + py) * gw + px;
                    let mut k = 0;
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..3 {
                                out[[t, py * p + dy, px * p + dx, ch]] = dpatches[[row, k]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn check_frames(&self, frames: &ArrayView4<'_, F>) -> Result<()> {
        let c = &self.config;
        let want = (c.frames, c.height, c.width, 3);
        if frames.dim() != want {
            return Err(PovError::Config(format!(
                "frames have shape {:?}, model expects {:?}",
                frames.dim(),
                want
            )));
        }
        Ok(())
    }

    fn embed_patches(&self, patches: &Array2<F>) -> TokenSequence<F> {
        let c = &self.config;
        let d = c.embed_dim;
        let nv = c.video_token_count();
        let mut z = patches.dot(&self.v2(self.idx.patch_w, c.patch_dim(), d));
        add_row_bias(&mut z, self.v1(self.idx.patch_b, d));
        let pos = self.v2(self.idx.pos, 1 + nv, d);
        let mut tokens = Array2::zeros((1 + nv, d));
        tokens.row_mut(0).assign(&self.v1(self.idx.cls, d));
        tokens.slice_mut(s![1.., ..]).assign(&z);
        tokens += &pos;
        TokenSequence {
            tokens,
            video_token_count: nv,
            prompt_token_count: 0,
        }
    }

    /// Class token followed by `T * (H/p) * (W/p)` video tokens, positional
    /// embeddings added to all of them.
    pub fn patch_embed(&self, frames: ArrayView4<'_, F>) -> Result<TokenSequence<F>> {
        self.check_frames(&frames)?;
        Ok(self.embed_patches(&self.patchify(frames)))
    }

    fn layer_forward(&self, li: usize, x: Array2<F>) -> (Array2<F>, LayerCache<F>) {
        let c = &self.config;
        let ix = self.idx.layers[li];
        let d = c.embed_dim;
        let hid = c.hidden_dim();
        let nh = c.num_heads;
        let dh = c.head_dim();
        let seq = x.nrows();
        let scale: F = F::one() / r::<F>(dh as f64).sqrt();

        let (h1, xhat1, rstd1) = layer_norm(&x, self.v1(ix.ln1_g, d), self.v1(ix.ln1_b, d));
        let mut qkv = h1.dot(&self.v2(ix.qkv_w, d, 3 * d));
        add_row_bias(&mut qkv, self.v1(ix.qkv_b, 3 * d));

        let mut o = Array2::zeros((seq, d));
        let mut attn = Vec::with_capacity(nh);
        for h in 0..nh {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut a = q.dot(&k.t());
            a *= scale;
            softmax_rows_inplace(&mut a);
            general_mat_mul(
                F::one(),
                &a,
                &v,
                F::zero(),
                &mut o.slice_mut(s![.., h * dh..(h + 1) * dh]),
            );
            attn.push(a);
        }
        let mut y = o.dot(&self.v2(ix.proj_w, d, d));
        add_row_bias(&mut y, self.v1(ix.proj_b, d));
        let x1 = x + &y;

        let (h2, xhat2, rstd2) = layer_norm(&x1, self.v1(ix.ln2_g, d), self.v1(ix.ln2_b, d));
        let mut u = h2.dot(&self.v2(ix.fc1_w, d, hid));
        add_row_bias(&mut u, self.v1(ix.fc1_b, hid));
        let g = u.mapv(gelu);
        let mut m = g.dot(&self.v2(ix.fc2_w, hid, d));
        add_row_bias(&mut m, self.v1(ix.fc2_b, d));
        let x2 = x1 + &m;

        (
            x2,
            LayerCache {
                xhat1,
                rstd1,
                h1,
                qkv,
                attn,
                o,
                xhat2,
                rstd2,
                h2,
                u,
                g,
            },
        )
    }

    /// Runs an inclusive 0-based layer range over the whole sequence,
    /// prompt tokens included.
    pub fn block_forward(
        &self,
        seq: &TokenSequence<F>,
        layer_range: (usize, usize),
    ) -> Result<TokenSequence<F>> {
        let (first, last) = layer_range;
        if first > last || last >= self.config.num_layers {
            return Err(PovError::Config(format!(
                "layer range {layer_range:?} outside 0..{}",
                self.config.num_layers
            )));
        }
        let mut x = seq.tokens.clone();
        for li in first..=last {
            x = self.layer_forward(li, x).0;
        }
        Ok(TokenSequence {
            tokens: x,
            video_token_count: seq.video_token_count,
            prompt_token_count: seq.prompt_token_count,
        })
    }

    fn check_prompts(&self, prompts: Option<&[ArrayView2<'_, F>]>) -> Result<()> {
        if let Some(p) = prompts {
            if p.len() != self.config.num_blocks() {
                return Err(PovError::Config(format!(
                    "{} prompt matrices for {} blocks",
                    p.len(),
                    self.config.num_blocks()
                )));
            }
            if let Some(bad) = p.iter().find(|m| m.ncols() != self.config.embed_dim) {
                return Err(PovError::Config(format!(
                    "prompt dim {} differs from embed_dim {}",
                    bad.ncols(),
                    self.config.embed_dim
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass for one clip, keeping what backward needs.
    pub fn forward_cached(
        &self,
        frames: ArrayView4<'_, F>,
        prompts: Option<&[ArrayView2<'_, F>]>,
        masks: Option<&MaskStack<F>>,
    ) -> Result<(Array1<F>, ForwardCache<F>)> {
        self.check_frames(&frames)?;
        self.check_prompts(prompts)?;
        let c = &self.config;
        let d = c.embed_dim;
        let patches = match masks {
            Some(m) => self.patchify(apply_masks(frames, m)?.view()),
            None => self.patchify(frames),
        };
        let mut seq = self.embed_patches(&patches);
        let mut blocks = Vec::with_capacity(c.num_blocks());
        for (b, &(first, last)) in c.block_ranges().iter().enumerate() {
            seq = seq.with_prompts(prompts.map(|p| p[b]));
            let mut caches = Vec::with_capacity(last - first + 1);
            let mut x = std::mem::take(&mut seq.tokens);
            for li in first..=last {
                let (nx, cache) = self.layer_forward(li, x);
                x = nx;
                caches.push(cache);
            }
            seq.tokens = x;
            blocks.push((seq.prompt_token_count, caches));
        }
        let cls = seq.tokens.slice(s![0..1, ..]).to_owned();
        let (h, xhat, rstd) = layer_norm(&cls, self.v1(self.idx.norm_g, d), self.v1(self.idx.norm_b, d));
        let feature = h.row(0).to_owned();
        let mut logits = feature.dot(&self.v2(self.idx.head_w, d, c.num_actions()));
        logits += &self.v1(self.idx.head_b, c.num_actions());
        Ok((
            logits,
            ForwardCache {
                patches,
                blocks,
                cls_xhat: xhat.row(0).to_owned(),
                cls_rstd: rstd[0],
                feature,
                frame_dims: (c.frames, c.height, c.width),
            },
        ))
    }

    /// Action logits for one clip.
    pub fn forward(
        &self,
        frames: ArrayView4<'_, F>,
        prompts: Option<&[ArrayView2<'_, F>]>,
        masks: Option<&MaskStack<F>>,
    ) -> Result<Array1<F>> {
        Ok(self.forward_cached(frames, prompts, masks)?.0)
    }

    /// Logits for a batch, one row per clip.
    pub fn forward_batch(
        &self,
        frames: &[ArrayView4<'_, F>],
        prompts: Option<&[ArrayView2<'_, F>]>,
    ) -> Result<Array2<F>> {
        use rayon::prelude::*;
        let rows: Vec<Array1<F>> = frames
            .par_iter()
            .map(|f| self.forward(f.view(), prompts, None))
            .collect::<Result<_>>()?;
        let mut out = Array2::zeros((rows.len(), self.config.num_actions()));
        for (i, row) in rows.iter().enumerate() {
            out.row_mut(i).assign(row);
        }
        Ok(out)
    }

    /// Forward with no prompts and no masks, composed from the public
    /// building blocks.
    pub fn plain_forward(&self, frames: ArrayView4<'_, F>) -> Result<Array1<F>> {
        let mut seq = self.patch_embed(frames)?;
        for range in self.config.block_ranges() {
            seq = self.block_forward(&seq, range)?;
        }
        let d = self.config.embed_dim;
        let cls = seq.tokens.slice(s![0..1, ..]).to_owned();
        let (h, _, _) = layer_norm(&cls, self.v1(self.idx.norm_g, d), self.v1(self.idx.norm_b, d));
        let mut logits = h.row(0).dot(&self.v2(self.idx.head_w, d, self.config.num_actions()));
        logits += &self.v1(self.idx.head_b, self.config.num_actions());
        Ok(logits)
    }

    fn grad_view1<'g>(grads: &'g mut [F], off: usize, n: usize) -> ArrayViewMut1<'g, F> {
        ArrayViewMut1::from(&mut grads[off..off + n])
    }

    fn grad_view2<'g>(grads: &'g mut [F], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'g, F> {
        ArrayViewMut2::from_shape((rows, cols), &mut grads[off..off + rows * cols]).expect("layout")
    }

    /// `dW += x^T dy`, `db += colsum(dy)`, returns `dy W^T`.
    fn linear_backward(
        &self,
        grads: Option<&mut [F]>,
        w_off: usize,
        b_off: usize,
        x: &Array2<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let (in_dim, out_dim) = (x.ncols(), dy.ncols());
        if let Some(grads) = grads {
            general_mat_mul(
                F::one(),
                &x.t(),
                dy,
                F::one(),
                &mut Self::grad_view2(grads, w_off, in_dim, out_dim),
            );
            let mut db = Self::grad_view1(grads, b_off, out_dim);
            for row in dy.rows() {
                db += &row;
            }
        }
        dy.dot(&self.v2(w_off, in_dim, out_dim).t())
    }

    /// Layer-norm backward; `g_off` and `b_off` must be adjacent entries.
    fn norm_backward(
        &self,
        grads: Option<&mut [F]>,
        g_off: usize,
        b_off: usize,
        dy: &Array2<F>,
        xhat: &Array2<F>,
        rstd: &Array1<F>,
    ) -> Array2<F> {
        let d = self.config.embed_dim;
        let mut scratch_g;
        let mut scratch_b;
        let (dg, db) = match grads {
            Some(grads) => {
                let (lo, hi) = grads.split_at_mut(b_off);
                (
                    ArrayViewMut1::from(&mut lo[g_off..g_off + d]),
                    ArrayViewMut1::from(&mut hi[..d]),
                )
            }
            None => {
                scratch_g = vec![F::zero(); d];
                scratch_b = vec![F::zero(); d];
                (
                    ArrayViewMut1::from(&mut scratch_g[..]),
                    ArrayViewMut1::from(&mut scratch_b[..]),
                )
            }
        };
        layer_norm_backward(dy, xhat, rstd, self.v1(g_off, d), dg, db)
    }

    fn layer_backward(
        &self,
        li: usize,
        cache: &LayerCache<F>,
        dx2: Array2<F>,
        mut grads: Option<&mut [F]>,
    ) -> Array2<F> {
        let c = &self.config;
        let ix = self.idx.layers[li];
        let d = c.embed_dim;
        let nh = c.num_heads;
        let dh = c.head_dim();
        let scale: F = F::one() / r::<F>(dh as f64).sqrt();

        // MLP branch.
        let dg = self.linear_backward(grads.as_deref_mut(), ix.fc2_w, ix.fc2_b, &cache.g, &dx2);
        let mut du = dg;
        ndarray::Zip::from(&mut du)
            .and(&cache.u)
            .for_each(|g, &u| *g *= gelu_grad(u));
        let dh2 = self.linear_backward(grads.as_deref_mut(), ix.fc1_w, ix.fc1_b, &cache.h2, &du);
        let dln2 = self.norm_backward(
            grads.as_deref_mut(),
            ix.ln2_g,
            ix.ln2_b,
            &dh2,
            &cache.xhat2,
            &cache.rstd2,
        );
        let dx1 = dx2 + &dln2;

        // Attention branch.
        let do_ = self.linear_backward(grads.as_deref_mut(), ix.proj_w, ix.proj_b, &cache.o, &dx1);
        let seq = dx1.nrows();
        let mut dqkv = Array2::zeros((seq, 3 * d));
        for h in 0..nh {
            let a = &cache.attn[h];
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let doh = do_.slice(s![.., h * dh..(h + 1) * dh]);
            let da = doh.dot(&v.t());
            general_mat_mul(
                F::one(),
                &a.t(),
                &doh,
                F::zero(),
                &mut dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]),
            );
            let mut ds = Array2::zeros((seq, seq));
            for i in 0..seq {
                let mut dot = F::zero();
                for j in 0..seq {
                    dot += da[[i, j]] * a[[i, j]];
                }
                for j in 0..seq {
                    ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot) * scale;
                }
            }
            general_mat_mul(
                F::one(),
                &ds,
                &k,
                F::zero(),
                &mut dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]),
            );
            general_mat_mul(
                F::one(),
                &ds.t(),
                &q,
                F::zero(),
                &mut dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]),
            );
        }
        let dh1 = self.linear_backward(grads.as_deref_mut(), ix.qkv_w, ix.qkv_b, &cache.h1, &dqkv);
        let dln1 = self.norm_backward(grads, ix.ln1_g, ix.ln1_b, &dh1, &cache.xhat1, &cache.rstd1);
        dx1 + &dln1
    }

    /// Accumulates parameter gradients of `dlogits . logits` into `grads`
    /// (same layout as the model buffer, skipped when `None`) and returns
    /// prompt/frame gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache<F>,
        dlogits: ArrayView1<'_, F>,
        mut grads: Option<&mut [F]>,
        want_frame_grad: bool,
    ) -> BackwardOutput<F> {
        let c = &self.config;
        let d = c.embed_dim;
        let k = c.num_actions();
        let nv = c.video_token_count();

        if let Some(g) = grads.as_deref_mut() {
            assert_eq!(g.len(), self.data.len(), "gradient buffer layout");
            let mut dw = Self::grad_view2(g, self.idx.head_w, d, k);
            for i in 0..d {
                for j in 0..k {
                    dw[[i, j]] += cache.feature[i] * dlogits[j];
                }
            }
            Self::grad_view1(g, self.idx.head_b, k).zip_mut_with(&dlogits, |g, &v| *g += v);
        }
        let dfeat = self.v2(self.idx.head_w, d, k).dot(&dlogits);

        let dcls = {
            let dy = dfeat.insert_axis(Axis(0)).to_owned();
            let xhat = cache.cls_xhat.clone().insert_axis(Axis(0));
            let rstd = Array1::from_elem(1, cache.cls_rstd);
            self.norm_backward(grads.as_deref_mut(), self.idx.norm_g, self.idx.norm_b, &dy, &xhat, &rstd)
        };

        let ranges = c.block_ranges();
        let mut prompt_grads = vec![Array2::zeros((0, d)); ranges.len()];
        let last_n = cache.blocks.last().map(|b| b.0).unwrap_or(0);
        let mut dseq = Array2::zeros((1 + nv + last_n, d));
        dseq.row_mut(0).assign(&dcls.row(0));
        for b in (0..ranges.len()).rev() {
            let (n, caches) = &cache.blocks[b];
            let (first, _) = ranges[b];
            for (offset, lc) in caches.iter().enumerate().rev() {
                dseq = self.layer_backward(first + offset, lc, dseq, grads.as_deref_mut());
            }
            prompt_grads[b] = dseq.slice(s![1 + nv.., ..]).to_owned();
            debug_assert_eq!(prompt_grads[b].nrows(), *n);
            // Prompt outputs of the previous block were discarded, so only the
            // class and video rows carry gradient backwards.
            let prev_n = if b > 0 { cache.blocks[b - 1].0 } else { 0 };
            let mut next = Array2::zeros((1 + nv + prev_n, d));
            next.slice_mut(s![..1 + nv, ..])
                .assign(&dseq.slice(s![..1 + nv, ..]));
            dseq = next;
        }

        if let Some(g) = grads.as_deref_mut() {
            Self::grad_view2(g, self.idx.pos, 1 + nv, d).zip_mut_with(&dseq, |g, &v| *g += v);
            Self::grad_view1(g, self.idx.cls, d).zip_mut_with(&dseq.row(0), |g, &v| *g += v);
        }
        if grads.is_none() && !want_frame_grad {
            return BackwardOutput {
                prompt_grads,
                frame_grad: None,
            };
        }
        let dz = dseq.slice(s![1.., ..]).to_owned();
        let dpatch = self.linear_backward(grads, self.idx.patch_w, self.idx.patch_b, &cache.patches, &dz);
        let frame_grad = want_frame_grad.then(|| {
            let g = self.unpatchify(&dpatch);
            debug_assert_eq!(
                (g.dim().0, g.dim().1, g.dim().2),
                cache.frame_dims
            );
            g
        });
        BackwardOutput {
            prompt_grads,
            frame_grad,
        }
    }
}

/// Validates that every parameter container agrees with the model and
/// returns the four disjoint parameter groups in stable order.
pub fn parameter_partition<'a, F: Real>(
    state: &'a ModelState<F>,
    bank: Option<&'a ViewPromptBank<F>>,
    masks: Option<&'a MaskFields<F>>,
) -> Result<PartitionSet<'a, F>> {
    let cfg = state.config();
    if state.layout().total() != state.data().len() {
        return Err(PovError::Integrity("model buffer does not match its layout".into()));
    }
    let mut groups: BTreeMap<Partition, Vec<ParamRef<'a, F>>> =
        Partition::ALL.iter().map(|&p| (p, Vec::new())).collect();
    for (partition, p) in state.param_refs() {
        match partition {
            Partition::Backbone | Partition::Head => groups.get_mut(&partition).unwrap().push(p),
            other => {
                return Err(PovError::Integrity(format!(
                    "model entry `{}` registered under {other}",
                    p.name
                )))
            }
        }
    }
    if let Some(bank) = bank {
        if bank.embed_dim() != cfg.embed_dim || bank.schedule() != cfg.block_schedule.as_slice() {
            return Err(PovError::Integrity(
                "prompt bank dim/schedule does not match the model".into(),
            ));
        }
        groups
            .get_mut(&Partition::ViewPrompt)
            .unwrap()
            .extend(bank.param_refs());
    }
    if let Some(masks) = masks {
        if masks.dims() != (cfg.frames, cfg.height, cfg.width) {
            return Err(PovError::Integrity(
                "mask field dims do not match the model".into(),
            ));
        }
        groups
            .get_mut(&Partition::MaskPrompt)
            .unwrap()
            .extend(masks.param_refs());
    }
    Ok(PartitionSet { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn tiny() -> ModelConfig {
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
            seed: 4,
        }
    }

    fn frames(cfg: &ModelConfig, seed: u64) -> Array4<f64> {
        let mut rng = rng::stream(seed, "frames");
        Array4::from_shape_simple_fn((cfg.frames, cfg.height, cfg.width, 3), || {
            rng::normal(&mut rng, 1.0)
        })
    }

    #[test]
    fn token_count_matches_grid() {
        let cfg = ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        };
        let m = ModelState::<f32>::new(cfg).unwrap();
        let f = Array4::zeros((4, 32, 32, 3));
        let seq = m.patch_embed(f.view()).unwrap();
        assert_eq!(seq.video_token_count, 64);
        assert_eq!(seq.count(), 65);
        assert_eq!(seq.prompt_token_count, 0);
    }

    #[test]
    fn zero_weights_give_zero_video_tokens() {
        let cfg = tiny();
        let m = ModelState::<f64>::zeros(cfg.clone()).unwrap();
        let f = Array4::zeros((2, 8, 8, 3));
        let seq = m.patch_embed(f.view()).unwrap();
        assert!(seq.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_and_embedding_are_deterministic() {
        let cfg = tiny();
        let a = ModelState::<f64>::new(cfg.clone()).unwrap();
        let b = ModelState::<f64>::new(cfg.clone()).unwrap();
        assert_eq!(a.data(), b.data());
        let f = frames(&cfg, 3);
        let ta = a.patch_embed(f.view()).unwrap();
        let tb = b.patch_embed(f.view()).unwrap();
        let bytes = |t: &TokenSequence<f64>| {
            t.tokens.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()
        };
        assert_eq!(bytes(&ta), bytes(&tb));
    }

    #[test]
    fn wrong_frame_shape_is_config_error() {
        let m = ModelState::<f64>::new(tiny()).unwrap();
        let f = Array4::zeros((2, 8, 9, 3));
        assert!(matches!(m.patch_embed(f.view()), Err(PovError::Config(_))));
    }

    #[test]
    fn block_forward_preserves_count() {
        let cfg = tiny();
        let m = ModelState::<f64>::new(cfg.clone()).unwrap();
        let seq = m.patch_embed(frames(&cfg, 1).view()).unwrap();
        let prompts = Array2::from_elem((2, 8), 0.1);
        let seq = seq.with_prompts(Some(prompts.view()));
        assert_eq!(seq.count(), 1 + 8 + 2);
        let out = m.block_forward(&seq, (0, 1)).unwrap();
        assert_eq!(out.count(), 11);
        assert_eq!(out.prompt_token_count, 2);
    }

    #[test]
    fn empty_prompts_match_plain_block() {
        let cfg = tiny();
        let m = ModelState::<f64>::new(cfg.clone()).unwrap();
        let seq = m.patch_embed(frames(&cfg, 2).view()).unwrap();
        let empty = Array2::<f64>::zeros((0, 8));
        let with = m.block_forward(&seq.with_prompts(Some(empty.view())), (0, 2)).unwrap();
        let without = m.block_forward(&seq, (0, 2)).unwrap();
        assert_eq!(with.tokens, without.tokens);
    }

    #[test]
    fn prompt_permutation_equivariance() {
        let cfg = tiny();
        let m = ModelState::<f64>::new(cfg.clone()).unwrap();
        let seq = m.patch_embed(frames(&cfg, 5).view()).unwrap();
        let mut rng = rng::stream(8, "p");
        let p = Array2::from_shape_simple_fn((2, 8), || rng::normal::<f64>(&mut rng, 0.5));
        let mut swapped = p.clone();
        swapped.row_mut(0).assign(&p.row(1));
        swapped.row_mut(1).assign(&p.row(0));
        let a = m.block_forward(&seq.with_prompts(Some(p.view())), (0, 1)).unwrap();
        let b = m.block_forward(&seq.with_prompts(Some(swapped.view())), (0, 1)).unwrap();
        let nv = 1 + seq.video_token_count;
        for i in 0..nv {
            for k in 0..8 {
                assert!((a.tokens[[i, k]] - b.tokens[[i, k]]).abs() < 1e-12);
            }
        }
        for k in 0..8 {
            assert!((a.tokens[[nv, k]] - b.tokens[[nv + 1, k]]).abs() < 1e-12);
            assert!((a.tokens[[nv + 1, k]] - b.tokens[[nv, k]]).abs() < 1e-12);
        }
    }

    #[test]
    fn unprompted_forward_equals_plain_backbone_bitwise() {
        let cfg = tiny();
        let m = ModelState::<f64>::new(cfg.clone()).unwrap();
        let f = frames(&cfg, 9);
        let a = m.forward(f.view(), None, None).unwrap();
        let b = m.plain_forward(f.view()).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_logits_shape() {
        let cfg = ModelConfig {
            frames: 2,
            height: 8,
            width: 8,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            num_layers: 2,
            block_schedule: vec![1],
            num_verbs: 6,
            num_nouns: 6,
            ..ModelConfig::default()
        };
        let m = ModelState::<f64>::new(cfg.clone()).unwrap();
        let a = frames(&cfg, 1);
        let b = frames(&cfg, 2);
        let logits = m.forward_batch(&[a.view(), b.view()], None).unwrap();
        assert_eq!(logits.dim(), (2, 36));
    }

    #[test]
    fn prompt_dim_mismatch_is_config_error() {
        let cfg = tiny();
        let m = ModelState::<f64>::new(cfg.clone()).unwrap();
        let p = Array2::<f64>::zeros((2, 7));
        let views = vec![p.view(), p.view()];
        assert!(matches!(
            m.forward(frames(&cfg, 1).view(), Some(&views), None),
            Err(PovError::Config(_))
        ));
    }
}
