//! Deterministic iterative pseudo-labeling (IPL) lab for CTC speech
//! recognition on synthetic audio features.
//!
//! The crate is organized around the training loop: [`corpus`] synthesizes the
//! task and handles text normalization, [`am`] is the CTC acoustic model,
//! [`lm`] estimates Kneser-Ney n-gram language models, [`decoder`] performs
//! lexicon-constrained beam search with shallow LM fusion, [`ipl`] runs the
//! pseudo-labeling loop itself, and [`eval`] computes WER and drives the
//! experiment harness. Everything is a pure function of its config and seeds;
//! two runs with the same inputs produce byte-identical artifacts.

pub mod am;
pub mod augment;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod ipl;
pub mod lm;

pub use am::{AcousticModel, EmissionLattice, LossRecord, ModelConfig, OptimizerState};
pub use augment::AugmentPolicy;
pub use config::RunConfig;
pub use corpus::{Dataset, SynthConfig, SynthDataset, TextCorpus, Utterance, Vocabulary};
pub use decoder::{BeamHypothesis, DecodeParams, Lexicon};
pub use error::{Error, Result};
pub use eval::{HiddenRefs, WerBreakdown};
pub use ipl::{IplConfig, IplRunRecord, PseudoLabeledSet};
pub use lm::NGramLM;
