use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the 3D-DenseUNet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    /// Key width of every attention block; `None` uses the block's input channels.
    pub c_k: Option<usize>,
    /// Value width of every attention block; `None` uses the block's input channels.
    pub c_v: Option<usize>,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Decoder blocks, counted from the coarsest, whose upsampling runs
    /// through global attention; finer blocks use the bare deconvolution.
    pub attention_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration.
    pub fn toy() -> Self {
        Self {
            base_channels: 8,
            enc_blocks: 3,
            dec_blocks: 3,
            heads: 2,
            c_k: None,
            c_v: None,
            dropout_p: 0.1,
            num_classes: 4,
            in_channels: 1,
            attention_levels: 2,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            base_channels: 32,
            ..Self::toy()
        }
    }

    /// Channel count at encoder level `level` (0 = full resolution);
    /// `level == enc_blocks` is the bottleneck.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn key_width(&self, input_channels: usize) -> usize {
        self.c_k.unwrap_or(input_channels)
    }

    pub fn value_width(&self, input_channels: usize) -> usize {
        self.c_v.unwrap_or(input_channels)
    }

    /// Whether decoder block `j` (0 = coarsest) uses attention.
    pub fn decoder_attends(&self, j: usize) -> bool {
        j < self.attention_levels
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.enc_blocks
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return fail("channel and class counts must be positive".into());
        }
        if self.enc_blocks == 0 {
            return fail("at least one encoder block is required".into());
        }
        if self.enc_blocks != self.dec_blocks {
            return fail(format!(
                "enc_blocks ({}) must equal dec_blocks ({}) for skip pairing",
                self.enc_blocks, self.dec_blocks
            ));
        }
        if self.heads == 0 {
            return fail("heads must be positive".into());
        }
        if self.attention_levels > self.dec_blocks {
            return fail(format!(
                "attention_levels {} exceeds dec_blocks {}",
                self.attention_levels, self.dec_blocks
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        // the end block sees the bottleneck; decoder block j sees level enc_blocks - j
        let mut widths = vec![self.channels(self.enc_blocks)];
        widths.extend((0..self.attention_levels).map(|j| self.channels(self.enc_blocks - j)));
        for c in widths {
            let (ck, cv) = (self.key_width(c), self.value_width(c));
            if ck == 0 || cv == 0 || ck % self.heads != 0 || cv % self.heads != 0 {
                return fail(format!(
                    "c_k={ck} and c_v={cv} must be positive multiples of heads={}",
                    self.heads
                ));
            }
        }
        Ok(())
    }
}
