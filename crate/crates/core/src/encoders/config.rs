use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioEncoderConfig {
    pub stem_channels: [usize; 3],
    pub stage_widths: Vec<usize>,
    pub blur_pool_enabled: bool,
    /// Attention pooling over spatial tokens; the spatial mean is used when off.
    pub attn_pool_enabled: bool,
    pub attn_heads: usize,
}

impl Default for AudioEncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: [16, 16, 32],
            stage_widths: vec![32, 64, 128, 256],
            blur_pool_enabled: true,
            attn_pool_enabled: true,
            attn_heads: 4,
        }
    }
}

impl AudioEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_channels.contains(&0) || self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config(format!(
                "audio encoder widths must be positive and at least one stage is required: stem {:?}, stages {:?}",
                self.stem_channels, self.stage_widths
            )));
        }
        let w = self.feature_dim();
        if self.attn_heads == 0 || w % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "attention pool width {w} is not divisible by {} heads",
                self.attn_heads
            )));
        }
        Ok(())
    }

    /// Width of the final stage, which is also the pooled feature size.
    pub fn feature_dim(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&0)
    }

    /// Spatial size after the stem and every stage, or an error naming the
    /// smallest input that fits.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.trace(h, w).ok_or_else(|| {
            let (mh, mw) = self.min_input_hw();
            Error::InvalidArgument(format!(
                "mel input {h}x{w} is smaller than the encoder's total downsampling; needs at least {mh}x{mw} (mels x frames)"
            ))
        })
    }

    fn trace(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut d = [h, w];
        for x in &mut d {
            // stride-2 conv, pad 1, kernel 3
            if *x == 0 {
                return None;
            }
            *x = (*x - 1) / 2 + 1;
            // 2x2 average pool
            if *x < 2 {
                return None;
            }
            *x /= 2;
            for _ in 1..self.stage_widths.len() {
                if self.blur_pool_enabled {
                    if *x < 3 {
                        return None;
                    }
                    *x = (*x + 1) / 2;
                } else {
                    if *x < 2 {
                        return None;
                    }
                    *x /= 2;
                }
            }
        }
        Some((d[0], d[1]))
    }

    pub fn min_input_hw(&self) -> (usize, usize) {
        let min = |f: &dyn Fn(usize) -> bool| (1..).find(|&n| f(n)).unwrap_or(usize::MAX);
        let big = 1 << 20;
        (
            min(&|n| self.trace(n, big).is_some()),
            min(&|n| self.trace(big, n).is_some()),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 256,
            heads: 4,
            max_len: crate::text::DEFAULT_MAX_LEN,
            vocab_size: 256 + crate::text::DEFAULT_MERGES + 3,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("text encoder depth must be at least 1".into()));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.max_len < 2 || self.vocab_size == 0 {
            return Err(Error::Config(format!(
                "text max_len {} and vocab_size {} are too small",
                self.max_len, self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSpaceConfig {
    pub embed_dim: usize,
    pub learnable_logit_scale: bool,
    /// Initial 1/τ.
    pub logit_scale_init: f64,
    /// Upper bound on 1/τ.
    pub logit_scale_max: f64,
    pub ssl_hidden: usize,
    pub ssl_dim: usize,
}

impl Default for JointSpaceConfig {
    fn default() -> Self {
        Self {
            embed_dim: 512,
            learnable_logit_scale: true,
            logit_scale_init: 1.0 / 0.07,
            logit_scale_max: 100.0,
            ssl_hidden: 512,
            ssl_dim: 256,
        }
    }
}

impl JointSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.ssl_dim == 0 || self.ssl_hidden == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        if !(self.logit_scale_init > 0.0 && self.logit_scale_max > self.logit_scale_init) {
            return Err(Error::Config(format!(
                "logit scale clamp {} must exceed a positive init {}",
                self.logit_scale_max, self.logit_scale_init
            )));
        }
        Ok(())
    }
}
