//! The run configuration: one structured document combining every knob of the
//! pipeline. All fields have defaults (mirrored by `configs/default.json`);
//! unknown keys are rejected at deserialization time.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::am::ModelConfig;
use crate::augment::AugmentPolicy;
use crate::corpus::SynthConfig;
use crate::decoder::TuneRanges;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub train: TrainConfig,
    pub ipl: IplConfig,
    pub decode: DecodeConfig,
    pub lm: LmConfig,
    pub harness: HarnessConfig,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentPolicy::default_for_dim(SynthConfig::default().feature_dim),
            train: TrainConfig::default(),
            ipl: IplConfig::default(),
            decode: DecodeConfig::default(),
            lm: LmConfig::default(),
            harness: HarnessConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Halve the learning rate once at this global epoch, if set.
    pub halve_lr_at_epoch: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.06,
            halve_lr_at_epoch: Some(200),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IplConfig {
    pub bootstrap_epochs: usize,
    pub rounds: usize,
    /// Pseudo-labels are regenerated after this many fine-tuning epochs.
    pub epochs_per_round: usize,
    /// Fraction p of the unlabeled pool drawn (fresh) each round.
    pub subset_fraction: f64,
    pub use_lm_decoding: bool,
    pub use_rescoring: bool,
    pub use_augmentation: bool,
    /// Re-tune decode weights before every round instead of once after
    /// bootstrap.
    pub tune_per_round: bool,
    /// Random-search budget for decode-weight tuning; 0 keeps the configured
    /// weights fixed.
    pub tune_budget: usize,
    /// Tune on at most this many dev utterances (0 = all).
    pub tune_dev_cap: usize,
    /// Epoch budget for each from-scratch round (and the from-scratch arm of
    /// the fine-tune comparison); defaults to `bootstrap_epochs`.
    pub scratch_epochs: Option<usize>,
}

impl Default for IplConfig {
    fn default() -> Self {
        IplConfig {
            bootstrap_epochs: 40,
            rounds: 12,
            epochs_per_round: 20,
            subset_fraction: 0.25,
            use_lm_decoding: true,
            use_rescoring: false,
            use_augmentation: true,
            tune_per_round: true,
            tune_budget: 16,
            tune_dev_cap: 48,
            scratch_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub lm_weight: f64,
    pub word_score: f64,
    pub beam_size: usize,
    pub beam_threshold: f64,
    pub tune_ranges: TuneRanges,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let p = crate::decoder::DecodeParams::default();
        DecodeConfig {
            lm_weight: p.lm_weight,
            word_score: p.word_score,
            beam_size: p.beam_size,
            beam_threshold: p.beam_threshold,
            tune_ranges: TuneRanges::default(),
        }
    }
}

impl DecodeConfig {
    pub fn params(&self) -> crate::decoder::DecodeParams {
        crate::decoder::DecodeParams {
            lm_weight: self.lm_weight,
            word_score: self.word_score,
            beam_size: self.beam_size,
            beam_threshold: self.beam_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    /// First-pass n-gram order.
    pub order: usize,
    /// Second-pass (rescoring) n-gram order.
    pub rescore_order: usize,
    pub vocab_cap: usize,
    /// Sentences of synthetic in-domain text used when training LMs from the
    /// task's word chain.
    pub corpus_sentences: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            order: 3,
            rescore_order: 5,
            vocab_cap: 200,
            corpus_sentences: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Subset fractions swept by `harness subset`.
    pub subset_fractions: Vec<f64>,
    /// Run seeds for the ablation's noise band.
    pub ablation_seeds: Vec<u64>,
    /// First-pass LM weights swept by `harness lm-weight-sweep`.
    pub sweep_decode_weights: Vec<f64>,
    /// Rescoring LM weights swept by `harness lm-weight-sweep`.
    pub sweep_rescore_weights: Vec<f64>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            subset_fractions: vec![0.1, 0.2, 0.4, 1.0],
            ablation_seeds: vec![11, 12, 13],
            sweep_decode_weights: vec![0.0, 0.5, 1.0, 2.0],
            sweep_rescore_weights: vec![0.0, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Dataset generation seed.
    pub data: u64,
    /// Master seed for model init, training order, subset draws, tuning.
    pub run: u64,
    /// Seed for synthetic LM corpora.
    pub text: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            run: 2,
            text: 3,
        }
    }
}

impl RunConfig {
    /// Validates every invariant, reporting the dotted key path of the first
    /// violation.
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.augment.validate("augment")?;
        if self.augment.max_freq_width > self.synth.feature_dim {
            return Err(Error::InvalidConfig {
                key: "augment.max_freq_width".into(),
                message: format!(
                    "mask width {} exceeds synth.feature_dim {}",
                    self.augment.max_freq_width, self.synth.feature_dim
                ),
            });
        }
        if !(self.train.learning_rate > 0.0) {
            return Err(Error::InvalidConfig {
                key: "train.learning_rate".into(),
                message: format!("must be > 0, got {}", self.train.learning_rate),
            });
        }
        if !(self.ipl.subset_fraction > 0.0 && self.ipl.subset_fraction <= 1.0) {
            return Err(Error::InvalidConfig {
                key: "ipl.subset_fraction".into(),
                message: format!("must be in (0, 1], got {}", self.ipl.subset_fraction),
            });
        }
        if self.ipl.use_rescoring && !self.ipl.use_lm_decoding {
            return Err(Error::InvalidConfig {
                key: "ipl.use_rescoring".into(),
                message: "rescoring requires ipl.use_lm_decoding".into(),
            });
        }
        self.decode.params().validate()?;
        let (rl, rh) = self.decode.tune_ranges.lm_weight;
        let (sl, sh) = self.decode.tune_ranges.word_score;
        if rl > rh || sl > sh {
            return Err(Error::InvalidConfig {
                key: "decode.tune_ranges".into(),
                message: "ranges must be (lo, hi) with lo <= hi".into(),
            });
        }
        if self.lm.order == 0 || self.lm.rescore_order == 0 {
            return Err(Error::InvalidConfig {
                key: "lm.order".into(),
                message: "orders must be >= 1".into(),
            });
        }
        if self.lm.vocab_cap == 0 {
            return Err(Error::InvalidConfig {
                key: "lm.vocab_cap".into(),
                message: "must be >= 1".into(),
            });
        }
        if self.harness.subset_fractions.is_empty()
            || self
                .harness
                .subset_fractions
                .iter()
                .any(|&f| !(f > 0.0 && f <= 1.0))
        {
            return Err(Error::InvalidConfig {
                key: "harness.subset_fractions".into(),
                message: "fractions must all lie in (0, 1]".into(),
            });
        }
        if self.harness.ablation_seeds.is_empty() {
            return Err(Error::InvalidConfig {
                key: "harness.ablation_seeds".into(),
                message: "need at least one seed".into(),
            });
        }
        Ok(())
    }

    pub fn scratch_epochs(&self) -> usize {
        self.ipl.scratch_epochs.unwrap_or(self.ipl.bootstrap_epochs)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Short content hash of the resolved config, stamped on every harness CSV.
pub fn config_hash(config: &RunConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
