//! View-aware prompt bank.
//!
//! Storage is one flat buffer laid out as `[view][block][prompt][dim]`.
//! `select` hands out views into that buffer so the prompts used in a forward
//! pass are the bank's own parameters; gradients are routed back with
//! [`ViewPromptBank::accumulate_view_grad`] and
//! [`ViewPromptBank::accumulate_joint_grad`].
//!
//! The joint prompt used for unseen views is the per-block *sum* over views,
//! so its magnitude grows with the number of views.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::error::{PovError, Result};
use crate::params::ParamRef;
use crate::real::Real;
use crate::rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPromptBank<F> {
    view_ids: Vec<String>,
    schedule: Vec<usize>,
    prompts_per_block: usize,
    embed_dim: usize,
    data: Vec<F>,
}

/// Per-block matrices `n x embed_dim` attached when the view is unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPrompt<F> {
    pub blocks: Vec<Array2<F>>,
}

impl<F: Real> JointPrompt<F> {
    pub fn views(&self) -> Vec<ArrayView2<'_, F>> {
        self.blocks.iter().map(|b| b.view()).collect()
    }
}

impl<F: Real> ViewPromptBank<F> {
    /// Truncated-normal (std 0.02) initialization, deterministic in `seed`.
    pub fn init(
        view_ids: &[String],
        schedule: &[usize],
        prompts_per_block: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut bank = Self::zeros(view_ids, schedule, prompts_per_block, embed_dim)?;
        let mut rng = rng::stream(seed, "view-prompts");
        for v in bank.data.iter_mut() {
            *v = rng::trunc_normal(&mut rng, INIT_STD);
        }
        Ok(bank)
    }

    pub fn zeros(
        view_ids: &[String],
        schedule: &[usize],
        prompts_per_block: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if view_ids.is_empty() {
            return Err(PovError::Config("prompt bank needs at least one view".into()));
        }
        if schedule.is_empty() || embed_dim == 0 {
            return Err(PovError::Config("prompt bank needs blocks and a positive dim".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = view_ids.iter().find(|v| !seen.insert(v.as_str())) {
            return Err(PovError::Config(format!("duplicate view id `{dup}`")));
        }
        let len = view_ids.len() * schedule.len() * prompts_per_block * embed_dim;
        Ok(Self {
            view_ids: view_ids.to_vec(),
            schedule: schedule.to_vec(),
            prompts_per_block,
            embed_dim,
            data: vec![F::zero(); len],
        })
    }

    pub fn from_data(
        view_ids: &[String],
        schedule: &[usize],
        prompts_per_block: usize,
        embed_dim: usize,
        data: Vec<F>,
    ) -> Result<Self> {
        let mut bank = Self::zeros(view_ids, schedule, prompts_per_block, embed_dim)?;
        if data.len() != bank.data.len() {
            return Err(PovError::Integrity(format!(
                "prompt buffer has {} values, expected {}",
                data.len(),
                bank.data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(PovError::Integrity("non-finite prompt value".into()));
        }
        bank.data = data;
        Ok(bank)
    }

    pub fn view_ids(&self) -> &[String] {
        &self.view_ids
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    pub fn prompts_per_block(&self) -> usize {
        self.prompts_per_block
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_views(&self) -> usize {
        self.view_ids.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.schedule.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    fn block_len(&self) -> usize {
        self.prompts_per_block * self.embed_dim
    }

    fn view_len(&self) -> usize {
        self.num_blocks() * self.block_len()
    }

    pub fn index_of(&self, view_id: &str) -> Result<usize> {
        self.view_ids
            .iter()
            .position(|v| v == view_id)
            .ok_or_else(|| PovError::UnknownView(view_id.to_string()))
    }

    /// Borrowed per-block prompt matrices of one view.
    pub fn select(&self, view_id: &str) -> Result<Vec<ArrayView2<'_, F>>> {
        Ok(self.select_index(self.index_of(view_id)?))
    }

    pub fn select_index(&self, view: usize) -> Vec<ArrayView2<'_, F>> {
        let (bl, vl) = (self.block_len(), self.view_len());
        (0..self.num_blocks())
            .map(|b| {
                let off = view * vl + b * bl;
                ArrayView2::from_shape(
                    (self.prompts_per_block, self.embed_dim),
                    &self.data[off..off + bl],
                )
                .expect("bank layout")
            })
            .collect()
    }

    pub fn select_mut(&mut self, view_id: &str) -> Result<Vec<ArrayViewMut2<'_, F>>> {
        let view = self.index_of(view_id)?;
        let (n, d, bl, vl) = (
            self.prompts_per_block,
            self.embed_dim,
            self.block_len(),
            self.view_len(),
        );
        let blocks = self.num_blocks();
        let slot = &mut self.data[view * vl..(view + 1) * vl];
        if bl == 0 {
            return Ok((0..blocks)
                .map(|_| ArrayViewMut2::from_shape((n, d), &mut []).expect("empty"))
                .collect());
        }
        Ok(slot
            .chunks_mut(bl)
            .map(|c| ArrayViewMut2::from_shape((n, d), c).expect("bank layout"))
            .collect())
    }

    pub fn joint(&self) -> JointPrompt<F> {
        let mut blocks: Vec<Array2<F>> = (0..self.num_blocks())
            .map(|_| Array2::zeros((self.prompts_per_block, self.embed_dim)))
            .collect();
        for v in 0..self.num_views() {
            for (acc, p) in blocks.iter_mut().zip(self.select_index(v)) {
                *acc += &p;
            }
        }
        JointPrompt { blocks }
    }

    /// Adds per-block gradients of one view's prompts into `grads`.
    pub fn accumulate_view_grad(&self, view: usize, block_grads: &[Array2<F>], grads: &mut [F]) {
        let (bl, vl) = (self.block_len(), self.view_len());
        for (b, g) in block_grads.iter().enumerate() {
            let off = view * vl + b * bl;
            for (dst, &src) in grads[off..off + bl].iter_mut().zip(g.iter()) {
                *dst += src;
            }
        }
    }

    /// The joint prompt is a sum, so each view receives the joint gradient.
    pub fn accumulate_joint_grad(&self, block_grads: &[Array2<F>], grads: &mut [F]) {
        for v in 0..self.num_views() {
            self.accumulate_view_grad(v, block_grads, grads);
        }
    }

    pub fn param_refs(&self) -> Vec<ParamRef<'_, F>> {
        let (bl, vl) = (self.block_len(), self.view_len());
        let mut out = Vec::new();
        for (v, id) in self.view_ids.iter().enumerate() {
            for b in 0..self.num_blocks() {
                let off = v * vl + b * bl;
                out.push(ParamRef {
                    name: format!("prompts.{id}.block{b}"),
                    shape: vec![self.prompts_per_block, self.embed_dim],
                    values: &self.data[off..off + bl],
                });
            }
        }
        out
    }

    pub fn cast<G: Real>(&self) -> ViewPromptBank<G> {
        ViewPromptBank {
            view_ids: self.view_ids.clone(),
            schedule: self.schedule.clone(),
            prompts_per_block: self.prompts_per_block,
            embed_dim: self.embed_dim,
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}
