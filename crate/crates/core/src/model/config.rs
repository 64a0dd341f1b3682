use serde::{Deserialize, Serialize};

use crate::attention::{CrossWindow, Radius, SelfWindow};
use crate::dataset::POSE_DIM;
use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Model width `d_m`.
    pub d_model: usize,
    /// Self-attention heads `N_h` (cross-attention always has one).
    pub heads: usize,
    /// Encoder self-attention radius `r`.
    pub self_radius: Radius,
    /// Cross-attention radius `D`.
    pub cross_radius: Radius,
    /// Encoder and decoder depth.
    pub layers: usize,
    /// FFN inner width; 0 means `4 · d_model`.
    pub d_ff: usize,
    /// Maximum number of emitted tokens during greedy decoding.
    pub max_caption_len: usize,
    /// Filled from the vocabulary when 0.
    pub vocab_size: usize,
    /// Pose feature width `c`.
    pub pose_dim: usize,
    /// Capacity of the motion positional-encoding table.
    pub max_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            self_radius: Radius::Finite(10),
            cross_radius: Radius::Finite(10),
            layers: 1,
            d_ff: 0,
            max_caption_len: 32,
            vocab_size: 0,
            pose_dim: POSE_DIM,
            max_frames: 512,
        }
    }
}

impl ModelConfig {
    pub fn ff_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_model
        } else {
            self.d_ff
        }
    }

    pub fn self_window(&self) -> Result<SelfWindow> {
        SelfWindow::new(self.self_radius)
    }

    pub fn cross_window(&self) -> Result<CrossWindow> {
        CrossWindow::new(self.cross_radius)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model < 2 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model ({}) must be >= 2 and divisible by heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.max_caption_len < 2 {
            return fail("max_caption_len must be >= 2".into());
        }
        if self.vocab_size < 5 {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.pose_dim == 0 || self.max_frames == 0 {
            return fail("pose_dim and max_frames must be positive".into());
        }
        self.self_window()?;
        self.cross_window()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_toml() {
        let c: ModelConfig = toml::from_str("d_model = 8\nheads = 2\ncross_radius = \"inf\"\n").unwrap();
        assert_eq!(c.d_model, 8);
        assert_eq!(c.cross_radius, Radius::Unbounded);
        assert_eq!(c.self_radius, Radius::Finite(10));
        assert_eq!(c.ff_width(), 32);
        assert!(toml::from_str::<ModelConfig>("bogus = 1").is_err());
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig {
            vocab_size: 20,
            ..Default::default()
        };
        c.validate().unwrap();
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 4;
        c.layers = 0;
        assert!(c.validate().is_err());
        c.layers = 1;
        c.max_caption_len = 1;
        assert!(c.validate().is_err());
    }
}
