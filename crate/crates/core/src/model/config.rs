use crate::error::{Error, Result};

/// Shape of the token UNet. The same config describes the denoiser and the
/// garment extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks_per_level: usize,
    pub levels: usize,
    pub text_vocab_size: usize,
    pub max_tokens: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 32,
            channels: 3,
            patch_size: 2,
            model_dim: 64,
            heads: 4,
            blocks_per_level: 2,
            levels: 2,
            text_vocab_size: 15,
            max_tokens: 4,
            time_dim: 32,
            ffn_mult: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Down,
    Up,
}

/// Position of one transformer block in the UNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub index: usize,
    pub level: usize,
    pub path: Path,
    /// Tokens per image at this block.
    pub tokens: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.blocks_per_level == 0 {
            return bad("levels and blocks_per_level must be >= 1".into());
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        let unit = self.patch_size * (1 << (self.levels - 1));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(unit) {
            return bad(format!(
                "image size {} not divisible by patch_size * 2^(levels-1) = {unit}",
                self.image_size
            ));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim {} must be even and >= 2", self.time_dim));
        }
        if self.text_vocab_size < 2 || self.max_tokens == 0 || self.channels == 0 || self.ffn_mult == 0 {
            return bad("vocabulary, token count, channels and ffn_mult must be positive".into());
        }
        Ok(())
    }

    /// Patch tokens per side at `level`.
    pub fn grid(&self, level: usize) -> usize {
        (self.image_size / self.patch_size) >> level
    }

    pub fn tokens_at(&self, level: usize) -> usize {
        self.grid(level) * self.grid(level)
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Every block in execution order: down levels 0..L, then up levels
    /// L-2..=0. The deepest level has no up counterpart.
    pub fn blocks(&self) -> Vec<BlockInfo> {
        let mut out = Vec::new();
        let mut push = |level, path| {
            for _ in 0..self.blocks_per_level {
                let index = out.len();
                out.push(BlockInfo {
                    index,
                    level,
                    path,
                    tokens: self.tokens_at(level),
                });
            }
        };
        for level in 0..self.levels {
            push(level, Path::Down);
        }
        for level in (0..self.levels - 1).rev() {
            push(level, Path::Up);
        }
        out
    }

    pub fn block_count(&self) -> usize {
        self.blocks_per_level * (2 * self.levels - 1)
    }

    /// Indices of up-path blocks, in execution order.
    pub fn up_blocks(&self) -> Vec<usize> {
        self.blocks()
            .iter()
            .filter(|b| b.path == Path::Up)
            .map(|b| b.index)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let c = DenoiserConfig::default();
        c.validate().unwrap();
        let b = c.blocks();
        assert_eq!(b.len(), 6);
        assert_eq!(c.block_count(), 6);
        assert_eq!(
            b.iter().map(|b| b.tokens).collect::<Vec<_>>(),
            [256, 256, 64, 64, 256, 256]
        );
        assert_eq!(c.up_blocks(), [4, 5]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = DenoiserConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = DenoiserConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c = DenoiserConfig {
            levels: 3,
            image_size: 20,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
