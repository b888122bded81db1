use serde::{Deserialize, Serialize};

use crate::error::{PovError, Result};

/// Shape and capacity of the video transformer.
///
/// `block_schedule` lists the 1-based first layer of every prompt block; the
/// block ends right before the next listed layer (or at the last layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_verbs: usize,
    pub num_nouns: usize,
    pub block_schedule: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 32,
            width: 32,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_verbs: 6,
            num_nouns: 6,
            block_schedule: vec![1, 2, 3, 5],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PovError::Config(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return err("frames, height and width must be positive".into());
        }
        if self.patch_size == 0
            || self.height % self.patch_size != 0
            || self.width % self.patch_size != 0
        {
            return err(format!(
                "patch_size {} must divide height {} and width {}",
                self.patch_size, self.height, self.width
            ));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "num_heads {} must divide embed_dim {}",
                self.num_heads, self.embed_dim
            ));
        }
        if self.num_layers == 0 {
            return err("num_layers must be positive".into());
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return err(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio));
        }
        if self.num_verbs == 0 || self.num_nouns == 0 {
            return err("num_verbs and num_nouns must be positive".into());
        }
        let s = &self.block_schedule;
        if s.first() != Some(&1) {
            return err(format!("block_schedule {s:?} must start at layer 1"));
        }
        if s.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("block_schedule {s:?} must be strictly ascending"));
        }
        if s.iter().any(|&l| l > self.num_layers) {
            return err(format!(
                "block_schedule {s:?} exceeds num_layers {}",
                self.num_layers
            ));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.num_verbs * self.num_nouns
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn video_token_count(&self) -> usize {
        self.frames * self.patches_per_frame()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn num_blocks(&self) -> usize {
        self.block_schedule.len()
    }

    /// 0-based inclusive layer ranges, one per block.
    pub fn block_ranges(&self) -> Vec<(usize, usize)> {
        let s = &self.block_schedule;
        s.iter()
            .enumerate()
            .map(|(j, &first)| {
                let last = s.get(j + 1).map(|&n| n - 1).unwrap_or(self.num_layers);
                (first - 1, last - 1)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.video_token_count(), 64);
        assert_eq!(c.block_ranges(), vec![(0, 0), (1, 1), (2, 3), (4, 5)]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::default();
        c.patch_size = 5;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::default();
        c.num_heads = 3;
        assert!(c.validate().is_err());

        for sched in [vec![2, 3], vec![1, 3, 2], vec![1, 7], vec![]] {
            let c = ModelConfig {
                block_schedule: sched,
                ..ModelConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn full_scale_schedule_is_accepted() {
        let c = ModelConfig {
            num_layers: 16,
            block_schedule: vec![1, 2, 4, 15],
            ..ModelConfig::default()
        };
        c.validate().unwrap();
        assert_eq!(c.block_ranges(), vec![(0, 0), (1, 2), (3, 13), (14, 15)]);
    }

    #[test]
    fn shallow_and_deep_schedules() {
        let shallow = ModelConfig {
            block_schedule: vec![1],
            ..ModelConfig::default()
        };
        assert_eq!(shallow.block_ranges(), vec![(0, 5)]);
        let deep = ModelConfig {
            block_schedule: (1..=6).collect(),
            ..ModelConfig::default()
        };
        assert_eq!(deep.block_ranges().len(), 6);
        assert!(deep.block_ranges().iter().all(|(a, b)| a == b));
    }
}
