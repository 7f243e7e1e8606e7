//! Model configuration. Every architectural constant lives here so the JSON
//! sidecar fully describes a model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub name: String,
    /// Width of the main block and of the hidden state.
    pub n: usize,
    /// Sampled key/value points per pixel.
    pub k: usize,
    /// Encoder feature width.
    pub d: usize,
    /// Index of the coarsest pyramid level (levels 0..=L).
    pub levels: usize,
    /// Upscaling factor.
    pub scale: usize,
    /// Attention groups.
    pub groups: usize,
    pub imdn_blocks: usize,
    pub encoder_convs: usize,
    pub offset_kernel: usize,
    /// Hidden widths of the offset block; the output width is 2k.
    pub offset_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub offsets_enabled: bool,
    pub pyramid_enabled: bool,
    pub attention_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::dap(64)
    }
}

impl ModelConfig {
    /// Full model with hidden width `n`.
    pub fn dap(n: usize) -> Self {
        Self {
            name: format!("dap-{n}"),
            n,
            k: 4,
            d: 8,
            levels: 3,
            scale: 4,
            groups: 4,
            imdn_blocks: 5,
            encoder_convs: 4,
            offset_kernel: 7,
            offset_hidden: vec![32, 64, 32, 16],
            leaky_slope: 0.1,
            offsets_enabled: true,
            pyramid_enabled: true,
            attention_enabled: true,
        }
    }

    /// Ablation rows 1 to 6.
    pub fn ablation(row: usize) -> Result<Self> {
        let (offsets, pyramid, attention, n) = match row {
            1 => (false, false, false, 64),
            2 => (false, false, true, 64),
            3 => (true, false, false, 64),
            4 => (true, true, false, 64),
            5 => (true, true, true, 64),
            6 => (true, true, true, 128),
            _ => return Err(Error::Config(format!("no ablation configuration {row}"))),
        };
        Ok(Self {
            name: format!("ablation-{row}"),
            offsets_enabled: offsets,
            pyramid_enabled: pyramid,
            attention_enabled: attention,
            ..Self::dap(n)
        })
    }

    /// Reduced configuration for tests and the toy training run.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            n: 16,
            levels: 2,
            ..Self::dap(16)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scale != 4 {
            return bad(format!("scale must be 4, got {}", self.scale));
        }
        if self.k == 0 || self.groups == 0 || self.d == 0 || self.n == 0 {
            return bad("k, d, n and groups must be positive".into());
        }
        if self.n % 4 != 0 {
            return bad(format!("n = {} must be divisible by 4", self.n));
        }
        if self.d % self.groups != 0 || self.n % self.groups != 0 {
            return bad(format!(
                "{} groups must divide d = {} and n = {}",
                self.groups, self.d, self.n
            ));
        }
        if self.offset_kernel % 2 == 0 || self.encoder_convs == 0 || self.imdn_blocks == 0 {
            return bad("offset kernel must be odd; block counts positive".into());
        }
        if !(0.0..1.0).contains(&self.leaky_slope) || self.leaky_slope == 0.0 {
            return bad(format!("leaky slope {} outside (0,1)", self.leaky_slope));
        }
        if self.pyramid_enabled && self.levels == 0 {
            return bad("a pyramid needs at least one level above 0".into());
        }
        if self.pyramid_enabled && !self.offsets_enabled {
            return bad("a pyramid without offsets is not a defined configuration".into());
        }
        Ok(())
    }

    /// Coarsest level actually evaluated.
    pub fn top_level(&self) -> usize {
        if self.pyramid_enabled {
            self.levels
        } else {
            0
        }
    }

    /// Coarsest level encoded for the previous frame. The base offset block
    /// reads only the current frame, so with a pyramid this stops one level
    /// short of [`ModelConfig::top_level`].
    pub fn previous_top_level(&self) -> usize {
        self.top_level().saturating_sub(1)
    }

    /// Whether any deformable-attention-pyramid stage runs.
    pub fn uses_dap(&self) -> bool {
        self.offsets_enabled || self.attention_enabled
    }

    /// LR extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.top_level()
    }

    pub fn head_channels(&self) -> usize {
        3 * self.scale * self.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_rows_follow_the_table() {
        let flags: Vec<_> = (1..=6)
            .map(|r| {
                let c = ModelConfig::ablation(r).unwrap();
                c.validate().unwrap();
                (c.offsets_enabled, c.pyramid_enabled, c.attention_enabled, c.n)
            })
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false, 64),
                (false, false, true, 64),
                (true, false, false, 64),
                (true, true, false, 64),
                (true, true, true, 64),
                (true, true, true, 128),
            ]
        );
        assert!(ModelConfig::ablation(7).is_err());
        assert_eq!(ModelConfig::ablation(6).unwrap().head_channels(), 48);
    }

    #[test]
    fn json_defaults_fill_missing_fields() {
        let c: ModelConfig = serde_json::from_str(r#"{"n": 128}"#).unwrap();
        assert_eq!(c.n, 128);
        assert_eq!((c.k, c.d, c.levels, c.scale), (4, 8, 3, 4));
        let mut bad = ModelConfig::toy();
        bad.scale = 2;
        assert!(bad.validate().is_err());
    }
}
