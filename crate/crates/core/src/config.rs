//! Network sizing shared by every model so reference-scale (224 px) and
//! desk-scale nets come from one definition.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels; must be divisible by 32.
    pub resolution: usize,
    /// Multiplier on every layer width, in `(0, 1]`.
    pub channel_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The published architecture: 224 px inputs, full widths.
    pub fn reference() -> Self {
        Self { resolution: 224, channel_scale: 1.0 }
    }

    /// CPU-trainable preset.
    pub fn desk() -> Self {
        Self { resolution: 64, channel_scale: 0.25 }
    }

    pub fn new(resolution: usize, channel_scale: f64) -> Result<Self> {
        let c = Self { resolution, channel_scale };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 32 != 0 {
            return Err(validation(format!("resolution {} is not a positive multiple of 32", self.resolution)));
        }
        if !(self.channel_scale > 0.0 && self.channel_scale <= 1.0) {
            return Err(validation(format!("channel_scale {} outside (0, 1]", self.channel_scale)));
        }
        Ok(())
    }

    /// Scaled layer width, rounded up to a multiple of 8.
    pub fn width(&self, base: usize) -> usize {
        let scaled = libm::ceil(base as f64 * self.channel_scale) as usize;
        scaled.div_ceil(8).max(1) * 8
    }
}
