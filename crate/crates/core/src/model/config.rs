use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DEFAULT_SEGMENT_FRAMES, MEL_BINS};

/// One spatial resolution of the latent hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    /// Downsampling factor relative to the `80 x T` input, a power of two.
    pub factor: usize,
    /// Latent groups living at this resolution.
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of latent groups `L`.
    pub latent_groups: usize,
    /// Split index `K`: groups `1..=K` have a speaker-independent prior.
    pub split: usize,
    /// Scales in top-down order (coarsest first).
    pub scales: Vec<ScaleSpec>,
    pub segment_frames: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    /// Channel multiplier inside decoder cells.
    pub expand: usize,
    pub speaker_embedding_dim: usize,
    pub cin_epsilon: f64,
    pub log_var_min: f64,
    pub log_var_max: f64,
    /// Log standard deviation of the Gaussian reconstruction likelihood.
    pub decoder_log_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults: `L = 8`, `K = 3` over three scales.
    pub fn desk() -> Self {
        ModelConfig {
            latent_groups: 8,
            split: 3,
            scales: vec![
                ScaleSpec { factor: 8, groups: 2 },
                ScaleSpec { factor: 4, groups: 3 },
                ScaleSpec { factor: 2, groups: 3 },
            ],
            segment_frames: DEFAULT_SEGMENT_FRAMES,
            base_channels: 32,
            latent_channels: 4,
            expand: 2,
            speaker_embedding_dim: 64,
            cin_epsilon: 1e-5,
            log_var_min: -8.0,
            log_var_max: 4.0,
            decoder_log_std: -0.5 * (2.0 * std::f64::consts::PI).ln(),
        }
    }

    /// Single latent group with an unconditional prior: a plain conditional VAE.
    pub fn single_latent() -> Self {
        ModelConfig {
            latent_groups: 1,
            split: 1,
            scales: vec![ScaleSpec { factor: 4, groups: 1 }],
            ..ModelConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.latent_groups;
        if !(1 <= self.split && self.split <= l) {
            return Err(Error::config(format!(
                "split index must satisfy 1 <= K <= L, got K={} L={l}",
                self.split
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::config("at least one latent scale is required"));
        }
        let total: usize = self.scales.iter().map(|s| s.groups).sum();
        if total != l {
            return Err(Error::config(format!(
                "scale schedule holds {total} groups but L={l}"
            )));
        }
        if self.segment_frames == 0 {
            return Err(Error::config("segment length must be positive"));
        }
        let mut prev = usize::MAX;
        for s in &self.scales {
            if s.groups == 0 {
                return Err(Error::config("every scale needs at least one group"));
            }
            if !s.factor.is_power_of_two() || s.factor < 2 {
                return Err(Error::config(format!(
                    "scale factor {} is not a power of two >= 2",
                    s.factor
                )));
            }
            if MEL_BINS % s.factor != 0 || self.segment_frames % s.factor != 0 {
                return Err(Error::config(format!(
                    "scale factor {} does not divide the {MEL_BINS}x{} input",
                    s.factor, self.segment_frames
                )));
            }
            if s.factor >= prev {
                return Err(Error::config("scale factors must strictly decrease top-down"));
            }
            prev = s.factor;
        }
        if self.base_channels < 2 || self.latent_channels == 0 || self.expand == 0 {
            return Err(Error::config("channel counts must be positive (base at least 2)"));
        }
        if self.speaker_embedding_dim == 0 {
            return Err(Error::config("speaker embedding dimension must be positive"));
        }
        if !(self.cin_epsilon > 0.0) {
            return Err(Error::config("cin_epsilon must be positive"));
        }
        if !(self.log_var_min < self.log_var_max) || !self.log_var_min.is_finite() || !self.log_var_max.is_finite() {
            return Err(Error::config("log-variance clamp range is empty or infinite"));
        }
        if !self.decoder_log_std.is_finite() {
            return Err(Error::config("decoder_log_std must be finite"));
        }
        Ok(())
    }

    /// Scale index (into `scales`) of each level, top-down.
    pub fn level_scales(&self) -> Vec<usize> {
        self.scales
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.groups))
            .collect()
    }

    /// Spatial size `(h, w)` of a scale.
    pub fn scale_dims(&self, scale: usize) -> (usize, usize) {
        let f = self.scales[scale].factor;
        (MEL_BINS / f, self.segment_frames / f)
    }

    /// Shape `(channels, h, w)` of latent group `level` (1-based).
    pub fn latent_shape(&self, level: usize) -> [usize; 3] {
        let (h, w) = self.scale_dims(self.level_scales()[level - 1]);
        [self.latent_channels, h, w]
    }

    pub fn is_speaker_invariant(&self, level: usize) -> bool {
        level <= self.split
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::single_latent().validate().unwrap();
        assert_eq!(ModelConfig::desk().latent_shape(1), [4, 10, 5]);
        assert_eq!(ModelConfig::desk().latent_shape(8), [4, 40, 20]);
    }

    #[test]
    fn rejects_bad_schedules() {
        let bad = |f: &dyn Fn(&mut ModelConfig)| {
            let mut c = ModelConfig::desk();
            f(&mut c);
            matches!(c.validate(), Err(Error::Config(_)))
        };
        assert!(bad(&|c| c.split = 0));
        assert!(bad(&|c| c.split = 9));
        assert!(bad(&|c| c.latent_groups = 7));
        assert!(bad(&|c| c.scales[0].factor = 3));
        assert!(bad(&|c| c.scales[0].factor = 16));
        assert!(bad(&|c| c.segment_frames = 36));
        assert!(bad(&|c| c.scales.swap(0, 2)));
    }
}
