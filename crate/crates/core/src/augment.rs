//! SpecAugment-style time and frequency masking on feature matrices.
//! Applied only at batch-assembly time during training; decoding always sees
//! clean features.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub n_freq_masks: usize,
    /// Maximum width (in channels) of one frequency mask.
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    /// Each time mask spans at most `floor(max_time_fraction * T)` frames.
    pub max_time_fraction: f64,
    pub mask_value: f64,
}

impl AugmentPolicy {
    /// Scaled-down analog of the usual SpecAugment settings, for feature dim `d`.
    pub fn default_for_dim(d: usize) -> Self {
        AugmentPolicy {
            n_freq_masks: 2,
            max_freq_width: d / 5,
            n_time_masks: 2,
            max_time_fraction: 0.1,
            mask_value: 0.0,
        }
    }

    pub fn validate(&self, key_prefix: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_time_fraction) {
            return Err(Error::InvalidConfig {
                key: format!("{key_prefix}.max_time_fraction"),
                message: format!("must be in [0, 1], got {}", self.max_time_fraction),
            });
        }
        Ok(())
    }
}

/// Masks random contiguous channel bands and frame spans. The input is left
/// untouched; output shape equals input shape.
pub fn spec_augment(
    features: &Array2<f32>,
    policy: &AugmentPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f32>> {
    let (t, d) = features.dim();
    if policy.max_freq_width > d {
        return Err(Error::MaskWiderThanFeatures {
            width: policy.max_freq_width,
            dim: d,
        });
    }
    let mut out = features.clone();
    let mask = policy.mask_value as f32;
    for _ in 0..policy.n_freq_masks {
        let width = rng.gen_range(0..=policy.max_freq_width);
        if width == 0 {
            continue;
        }
        let start = rng.gen_range(0..=d - width);
        for row in 0..t {
            for c in start..start + width {
                out[(row, c)] = mask;
            }
        }
    }
    let max_span = (policy.max_time_fraction * t as f64).floor() as usize;
    for _ in 0..policy.n_time_masks {
        let span = rng.gen_range(0..=max_span);
        if span == 0 {
            continue;
        }
        let start = rng.gen_range(0..=t - span);
        for row in start..start + span {
            for c in 0..d {
                out[(row, c)] = mask;
            }
        }
    }
    Ok(out)
}
