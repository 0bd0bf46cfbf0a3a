//! The iterative pseudo-labeling engine and the from-scratch multi-round
//! baseline.
//!
//! One IPL run: bootstrap on the labeled split, then repeat (draw a fresh
//! unlabeled subset, pseudo-label it with the current model, fine-tune the
//! same model on labeled + pseudo-labeled with samples pooled uniformly so
//! the unlabeled weight is implicitly the sample ratio). The model is never
//! reinitialized between rounds. Pseudo-labels are used without filtering;
//! empty transcripts train as pure-blank targets and CTC-infeasible ones are
//! skipped and counted. Augmentation belongs to the fine-tuning phase only;
//! the bootstrap is shared verbatim by every strategy, which keeps ablations
//! comparable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::am::{
    ctc_feasible, save_checkpoint, AcousticModel, LossRecord, OptimizerState, SampleOrigin,
    TrainSample,
};
use crate::augment::AugmentPolicy;
use crate::config::RunConfig;
pub use crate::config::IplConfig;
use crate::corpus::{stage_rng, sub_seed, Dataset, Utterance};
use crate::decoder::{decode_batch, greedy_batch, tune_decode_params, DecodeParams, Lexicon};
use crate::error::{Error, Result};
use crate::eval::wer;
use crate::lm::NGramLM;

/// External models the engine decodes with. `lm` is required when LM decoding
/// is enabled; `rescore_lm` when rescoring is.
#[derive(Clone, Copy)]
pub struct IplResources<'a> {
    pub lexicon: &'a Lexicon,
    pub lm: Option<&'a NGramLM>,
    pub rescore_lm: Option<&'a NGramLM>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlEntry {
    pub id: String,
    pub words: Vec<String>,
    /// Decode objective score; absent for greedy pseudo-labels.
    pub score: Option<f64>,
}

/// One round's pseudo-labels plus the bookkeeping the paper's analyses need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSet {
    pub round: usize,
    pub entries: Vec<PlEntry>,
    pub empty_count: usize,
    pub infeasible_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    /// Global epoch counter (bootstrap epochs included).
    pub epoch: u64,
    pub phase: String,
    pub dev_wer_greedy: f64,
    pub loss: LossRecord,
}

/// Full audit trail of a run: per-epoch dev WER, per-round pseudo-label sets,
/// loss history, wall clock per phase, and the resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IplRunRecord {
    pub protocol: String,
    pub config_echo: RunConfig,
    pub bootstrap_epochs: usize,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub curve: Vec<EpochPoint>,
    pub pseudo_label_sets: Vec<PseudoLabeledSet>,
    /// Pseudo-label WER against hidden references; filled by the eval module,
    /// never by the engine itself.
    pub pl_wer_per_round: Vec<Option<f64>>,
    pub tuned_params: Vec<(usize, DecodeParams)>,
    pub wall_clock_secs: BTreeMap<String, f64>,
    /// Fingerprint of the parameter vector at the end of each phase; lets
    /// tests assert fine-tuning continuity across rounds.
    pub phase_fingerprints: Vec<(String, String)>,
    pub final_dev_wer_greedy: f64,
    /// Deterministic work counters (the efficiency analog).
    pub train_samples_processed: u64,
    pub utterances_decoded: u64,
    /// Training samples processed per phase, in phase order.
    pub phase_train_samples: Vec<(String, u64)>,
}

impl IplRunRecord {
    fn new(protocol: &str, cfg: &RunConfig, epochs_per_round: usize) -> Self {
        IplRunRecord {
            protocol: protocol.to_string(),
            config_echo: cfg.clone(),
            bootstrap_epochs: cfg.ipl.bootstrap_epochs,
            rounds: cfg.ipl.rounds,
            epochs_per_round,
            curve: Vec::new(),
            pseudo_label_sets: Vec::new(),
            pl_wer_per_round: Vec::new(),
            tuned_params: Vec::new(),
            wall_clock_secs: BTreeMap::new(),
            phase_fingerprints: Vec::new(),
            final_dev_wer_greedy: f64::NAN,
            train_samples_processed: 0,
            utterances_decoded: 0,
            phase_train_samples: Vec::new(),
        }
    }

    pub fn expected_epochs(&self) -> usize {
        self.bootstrap_epochs + self.rounds * self.epochs_per_round
    }
}

fn fingerprint(model: &AcousticModel) -> String {
    let mut hasher = Sha256::new();
    for v in model.params() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Draws `ceil(fraction * |ids|)` ids uniformly without replacement.
pub fn draw_subset(ids: &[String], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction in (0, 1]");
    let n = ids.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool[..k].iter().map(|&i| ids[i].clone()).collect()
}

/// Feature dimension from the dataset itself (falls back to the config).
pub(crate) fn dataset_input_dim(dataset: &Dataset, cfg: &RunConfig) -> usize {
    dataset
        .labeled
        .first()
        .map(|u| u.features.ncols())
        .unwrap_or(cfg.synth.feature_dim)
}

pub(crate) fn labeled_samples(dataset: &Dataset) -> Result<Vec<TrainSample>> {
    dataset
        .labeled
        .iter()
        .map(|u| {
            let words = u
                .transcript
                .as_ref()
                .ok_or_else(|| Error::MissingTranscript { id: u.id.clone() })?;
            let target = dataset
                .vocabulary
                .tokenize_words(words)
                .ok_or_else(|| Error::InvalidConfig {
                    key: "dataset".into(),
                    message: format!("transcript of `{}` not coverable by vocabulary", u.id),
                })?;
            Ok(TrainSample {
                utterance_id: u.id.clone(),
                features: u.features.clone(),
                target,
                origin: SampleOrigin::Labeled,
            })
        })
        .collect()
}

/// Dev WER of beam decoding under the given weights; used by the tuning
/// ratchet.
fn params_dev_wer(
    model: &AcousticModel,
    lm: &NGramLM,
    lexicon: &Lexicon,
    dev: &[Utterance],
    params: &DecodeParams,
) -> Result<f64> {
    let outcomes = decode_batch(model, dev, lexicon, lm, params, None)?;
    let mut agg = crate::eval::WerBreakdown::default();
    for (u, o) in dev.iter().zip(&outcomes) {
        let reference = u
            .transcript
            .as_ref()
            .ok_or_else(|| Error::MissingReference { id: u.id.clone() })?;
        let hyp = o
            .hypothesis
            .as_ref()
            .map(|h| h.words.clone())
            .unwrap_or_default();
        agg.accumulate(&wer(reference, &hyp));
    }
    Ok(agg.wer)
}

/// Corpus-level greedy dev WER: greedy decode, lexicon segmentation, pooled
/// edit counts.
pub fn dev_wer_greedy(model: &AcousticModel, dev: &[Utterance], lexicon: &Lexicon) -> Result<f64> {
    let decoded = greedy_batch(model, dev, lexicon)?;
    let mut agg = crate::eval::WerBreakdown::default();
    for (u, (_, _, words)) in dev.iter().zip(&decoded) {
        let reference = u
            .transcript
            .as_ref()
            .ok_or_else(|| Error::MissingReference { id: u.id.clone() })?;
        agg.accumulate(&wer(reference, words));
    }
    Ok(agg.wer)
}

struct Engine<'a> {
    dataset: &'a Dataset,
    cfg: &'a RunConfig,
    res: IplResources<'a>,
    record: IplRunRecord,
    run_dir: Option<&'a Path>,
}

impl<'a> Engine<'a> {
    fn train_phase(
        &mut self,
        model: &mut AcousticModel,
        optimizer: &mut OptimizerState,
        samples: &[TrainSample],
        policy: Option<&AugmentPolicy>,
        epochs: usize,
        phase: &str,
    ) -> Result<()> {
        let started = Instant::now();
        let dev = &self.dataset.dev;
        let lexicon = self.res.lexicon;
        let curve = &mut self.record.curve;
        let phase_name = phase.to_string();
        crate::am::train_epochs(
            model,
            optimizer,
            samples,
            policy,
            epochs,
            sub_seed(self.cfg.seeds.run, "train"),
            |epoch, m, loss| {
                curve.push(EpochPoint {
                    epoch,
                    phase: phase_name.clone(),
                    dev_wer_greedy: dev_wer_greedy(m, dev, lexicon)?,
                    loss: *loss,
                });
                Ok(())
            },
        )?;
        self.record.train_samples_processed += (samples.len() * epochs) as u64;
        self.record
            .phase_train_samples
            .push((phase.to_string(), (samples.len() * epochs) as u64));
        *self
            .record
            .wall_clock_secs
            .entry(phase.to_string())
            .or_default() += started.elapsed().as_secs_f64();
        self.record
            .phase_fingerprints
            .push((phase.to_string(), fingerprint(model)));
        Ok(())
    }

    fn tune(
        &mut self,
        model: &AcousticModel,
        round: usize,
        base: &DecodeParams,
    ) -> Result<DecodeParams> {
        let lm = self.res.lm.expect("tuning requires an LM");
        let cap = match self.cfg.ipl.tune_dev_cap {
            0 => self.dataset.dev.len(),
            c => c.min(self.dataset.dev.len()),
        };
        let tune_dev = &self.dataset.dev[..cap];
        let outcome = tune_decode_params(
            model,
            lm,
            self.res.lexicon,
            tune_dev,
            base,
            self.cfg.ipl.tune_budget,
            &self.cfg.decode.tune_ranges,
            sub_seed(self.cfg.seeds.run, &format!("tune-{round}")),
        )?;
        self.record.utterances_decoded += (cap * (self.cfg.ipl.tune_budget + 1)) as u64;
        // Ratchet: the incumbent weights stay unless a sampled candidate
        // strictly beats them on the tuning slice. Random search with a small
        // budget occasionally draws only poor candidates; without this, one
        // bad tuning round derails pseudo-label quality for the whole run.
        let incumbent_wer = params_dev_wer(model, lm, self.res.lexicon, tune_dev, base)?;
        let best_wer = outcome
            .table
            .iter()
            .map(|r| r.dev_wer)
            .fold(f64::INFINITY, f64::min);
        let chosen = if best_wer < incumbent_wer {
            outcome.params
        } else {
            *base
        };
        self.record.tuned_params.push((round, chosen));
        Ok(chosen)
    }

    /// Pseudo-labels the given unlabeled utterances with the current model.
    fn pseudo_label(
        &mut self,
        model: &AcousticModel,
        round: usize,
        selected: &[&Utterance],
        params: &DecodeParams,
    ) -> Result<(Vec<TrainSample>, PseudoLabeledSet)> {
        let started = Instant::now();
        let lexicon = self.res.lexicon;
        let mut entries = Vec::with_capacity(selected.len());
        let mut samples = Vec::with_capacity(selected.len());
        let mut empty_count = 0usize;
        let mut infeasible_count = 0usize;

        // (words, tokens, score) per utterance, decoded in parallel.
        let decoded: Vec<(Vec<String>, Vec<usize>, Option<f64>)> = if self.cfg.ipl.use_lm_decoding
        {
            let lm = self.res.lm.expect("LM decoding requires an LM");
            let rescore = if self.cfg.ipl.use_rescoring {
                let lm2 = self.res.rescore_lm.expect("rescoring requires a second LM");
                Some((lm2, params.lm_weight, params.word_score))
            } else {
                None
            };
            let owned: Vec<Utterance> = selected.iter().map(|&u| u.clone()).collect();
            decode_batch(model, &owned, lexicon, lm, params, rescore)?
                .into_iter()
                .map(|o| match o.hypothesis {
                    Some(h) => {
                        let tokens = lexicon.tokens_for(&h.words).expect("beam emits lexicon words");
                        (h.words, tokens, Some(h.total))
                    }
                    None => (Vec::new(), Vec::new(), None),
                })
                .collect()
        } else {
            let owned: Vec<Utterance> = selected.iter().map(|&u| u.clone()).collect();
            greedy_batch(model, &owned, lexicon)?
                .into_iter()
                .map(|(_, tokens, words)| (words, tokens, None))
                .collect()
        };
        self.record.utterances_decoded += selected.len() as u64;

        for (u, (words, tokens, score)) in selected.iter().zip(decoded) {
            if tokens.is_empty() {
                empty_count += 1;
            }
            entries.push(PlEntry {
                id: u.id.clone(),
                words,
                score,
            });
            if !ctc_feasible(model.out_frames(u.features.nrows()), &tokens) {
                infeasible_count += 1;
                continue;
            }
            samples.push(TrainSample {
                utterance_id: u.id.clone(),
                features: u.features.clone(),
                target: tokens,
                origin: SampleOrigin::Pseudo,
            });
        }

        let set = PseudoLabeledSet {
            round,
            entries,
            empty_count,
            infeasible_count,
        };
        if let Some(dir) = self.run_dir {
            write_pl_tsv(&set, &dir.join(format!("pl_round_{round}.tsv")))?;
        }
        *self
            .record
            .wall_clock_secs
            .entry(format!("pseudo-label-{round}"))
            .or_default() += started.elapsed().as_secs_f64();
        Ok((samples, set))
    }

    fn select(&self, ids: &[String]) -> Vec<&'a Utterance> {
        // Keep dataset order for deterministic, id-sorted artifacts.
        self.dataset
            .unlabeled
            .iter()
            .filter(|u| ids.contains(&u.id))
            .collect()
    }

    fn finish(
        mut self,
        model: AcousticModel,
        optimizer: OptimizerState,
    ) -> Result<(AcousticModel, OptimizerState, IplRunRecord)> {
        self.record.final_dev_wer_greedy =
            dev_wer_greedy(&model, &self.dataset.dev, self.res.lexicon)?;
        if let Some(dir) = self.run_dir {
            save_checkpoint(&model, &optimizer, &dir.join("model.ckpt"))?;
            write_curves_csv(&self.record, &dir.join("curves.csv"))?;
            let json = serde_json::to_string_pretty(&self.record)?;
            let path = dir.join("record.json");
            fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        Ok((model, optimizer, self.record))
    }
}

fn check_resources(cfg: &RunConfig, res: &IplResources) -> Result<()> {
    if cfg.ipl.use_lm_decoding && res.lm.is_none() {
        return Err(Error::InvalidConfig {
            key: "ipl.use_lm_decoding".into(),
            message: "enabled but no language model supplied".into(),
        });
    }
    if cfg.ipl.use_rescoring && res.rescore_lm.is_none() {
        return Err(Error::InvalidConfig {
            key: "ipl.use_rescoring".into(),
            message: "enabled but no rescoring language model supplied".into(),
        });
    }
    Ok(())
}

/// Runs the iterative pseudo-labeling loop. Returns the fine-tuned model and
/// the run record; when `run_dir` is set, also writes `pl_round_<r>.tsv`,
/// per-round checkpoints, `curves.csv`, `model.ckpt`, and `record.json`.
pub fn run_ipl(
    dataset: &Dataset,
    cfg: &RunConfig,
    res: IplResources,
    run_dir: Option<&Path>,
) -> Result<(AcousticModel, OptimizerState, IplRunRecord)> {
    cfg.validate()?;
    check_resources(cfg, &res)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut engine = Engine {
        dataset,
        cfg,
        res,
        record: IplRunRecord::new("ipl", cfg, cfg.ipl.epochs_per_round),
        run_dir,
    };

    let mut model = AcousticModel::init(
        &cfg.model,
        dataset_input_dim(dataset, cfg),
        dataset.vocabulary.n_labels(),
        sub_seed(cfg.seeds.run, "model-init"),
    )?;
    let mut optimizer = OptimizerState::new(
        model.n_params(),
        cfg.train.learning_rate,
        cfg.train.halve_lr_at_epoch,
    );

    let labeled = labeled_samples(dataset)?;
    engine.train_phase(
        &mut model,
        &mut optimizer,
        &labeled,
        None,
        cfg.ipl.bootstrap_epochs,
        "bootstrap",
    )?;

    let mut params = cfg.decode.params();
    if cfg.ipl.use_lm_decoding && cfg.ipl.tune_budget > 0 {
        params = engine.tune(&model, 0, &params)?;
    }

    let unlabeled_ids: Vec<String> = dataset.unlabeled.iter().map(|u| u.id.clone()).collect();
    let policy = cfg.ipl.use_augmentation.then_some(&cfg.augment);

    for round in 1..=cfg.ipl.rounds {
        let result = (|| -> Result<()> {
            if cfg.ipl.use_lm_decoding && cfg.ipl.tune_per_round && round > 1 {
                params = engine.tune(&model, round, &params)?;
            }
            let mut rng = stage_rng(sub_seed(cfg.seeds.run, "subset"), &format!("round-{round}"));
            let ids = draw_subset(&unlabeled_ids, cfg.ipl.subset_fraction, &mut rng);
            let selected = engine.select(&ids);
            let (pseudo, set) = engine.pseudo_label(&model, round, &selected, &params)?;
            engine.record.pseudo_label_sets.push(set);
            engine.record.pl_wer_per_round.push(None);

            let mut pool = labeled.clone();
            pool.extend(pseudo);
            engine.train_phase(
                &mut model,
                &mut optimizer,
                &pool,
                policy,
                cfg.ipl.epochs_per_round,
                &format!("round-{round}"),
            )?;
            if let Some(dir) = run_dir {
                save_checkpoint(&model, &optimizer, &dir.join(format!("round-{round}.ckpt")))?;
            }
            Ok(())
        })();
        result.map_err(|e| e.in_round(round))?;
    }

    engine.finish(model, optimizer)
}

/// The from-scratch baseline: each round pseudo-labels the entire unlabeled
/// set with the previous round's model, then trains a fresh model (new
/// initialization, fresh optimizer) on labeled + pseudo-labeled for a full
/// budget.
pub fn run_scratch_rounds(
    dataset: &Dataset,
    cfg: &RunConfig,
    res: IplResources,
    run_dir: Option<&Path>,
) -> Result<(AcousticModel, OptimizerState, IplRunRecord)> {
    cfg.validate()?;
    check_resources(cfg, &res)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let scratch_epochs = cfg.scratch_epochs();
    let mut engine = Engine {
        dataset,
        cfg,
        res,
        record: IplRunRecord::new("scratch-rounds", cfg, scratch_epochs),
        run_dir,
    };

    let mut model = AcousticModel::init(
        &cfg.model,
        dataset_input_dim(dataset, cfg),
        dataset.vocabulary.n_labels(),
        sub_seed(cfg.seeds.run, "model-init"),
    )?;
    let mut optimizer = OptimizerState::new(
        model.n_params(),
        cfg.train.learning_rate,
        cfg.train.halve_lr_at_epoch,
    );

    let labeled = labeled_samples(dataset)?;
    engine.train_phase(
        &mut model,
        &mut optimizer,
        &labeled,
        None,
        cfg.ipl.bootstrap_epochs,
        "bootstrap",
    )?;

    let mut params = cfg.decode.params();
    if cfg.ipl.use_lm_decoding && cfg.ipl.tune_budget > 0 {
        params = engine.tune(&model, 0, &params)?;
    }
    let policy = cfg.ipl.use_augmentation.then_some(&cfg.augment);

    for round in 1..=cfg.ipl.rounds {
        let result = (|| -> Result<()> {
            if cfg.ipl.use_lm_decoding && cfg.ipl.tune_per_round && round > 1 {
                params = engine.tune(&model, round, &params)?;
            }
            let selected: Vec<&Utterance> = dataset.unlabeled.iter().collect();
            let (pseudo, set) = engine.pseudo_label(&model, round, &selected, &params)?;
            engine.record.pseudo_label_sets.push(set);
            engine.record.pl_wer_per_round.push(None);

            // Fresh model and optimizer: this is the "from scratch" arm.
            model = AcousticModel::init(
                &cfg.model,
                dataset_input_dim(dataset, cfg),
                dataset.vocabulary.n_labels(),
                sub_seed(cfg.seeds.run, &format!("scratch-init-{round}")),
            )?;
            optimizer = OptimizerState::new(
                model.n_params(),
                cfg.train.learning_rate,
                cfg.train.halve_lr_at_epoch,
            );
            let mut pool = labeled.clone();
            pool.extend(pseudo);
            engine.train_phase(
                &mut model,
                &mut optimizer,
                &pool,
                policy,
                scratch_epochs,
                &format!("scratch-round-{round}"),
            )?;
            if let Some(dir) = run_dir {
                save_checkpoint(&model, &optimizer, &dir.join(format!("round-{round}.ckpt")))?;
            }
            Ok(())
        })();
        result.map_err(|e| e.in_round(round))?;
    }

    engine.finish(model, optimizer)
}

fn write_pl_tsv(set: &PseudoLabeledSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    for e in &set.entries {
        let score = e
            .score
            .map(|s| format!("{s}"))
            .unwrap_or_else(|| "greedy".to_string());
        out.push_str(&format!("{}\t{}\t{}\n", e.id, score, e.words.join(" ")));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `curves.csv`: epoch, greedy dev WER, and the loss decomposition per epoch.
pub fn write_curves_csv(record: &IplRunRecord, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,phase,dev_wer_greedy,loss_L,loss_U,lambda\n");
    for p in &record.curve {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.epoch,
            p.phase,
            p.dev_wer_greedy,
            p.loss.labeled_loss,
            p.loss.unlabeled_loss,
            p.loss.unlabeled_weight
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_dataset;
    use crate::lm::train_ngram;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.synth.vocab_size = 8;
        cfg.synth.feature_dim = 6;
        cfg.synth.labeled = 6;
        cfg.synth.unlabeled = 12;
        cfg.synth.dev = 4;
        cfg.synth.test = 4;
        cfg.synth.words_per_utterance = (1, 3);
        cfg.model.conv = vec![crate::am::ConvSpec {
            kernel: 3,
            stride: 2,
            channels: 8,
        }];
        cfg.model.hidden = vec![16];
        cfg.augment = AugmentPolicy::default_for_dim(6);
        cfg.ipl.bootstrap_epochs = 2;
        cfg.ipl.rounds = 2;
        cfg.ipl.epochs_per_round = 2;
        cfg.ipl.tune_budget = 2;
        cfg.lm.order = 2;
        cfg.lm.corpus_sentences = 30;
        cfg
    }

    fn tiny_setup(cfg: &RunConfig) -> (crate::corpus::SynthDataset, Lexicon, NGramLM) {
        let bundle = synth_dataset(&cfg.synth, cfg.seeds.data).unwrap();
        let lexicon = Lexicon::from_vocabulary(&bundle.dataset.vocabulary);
        let text = crate::corpus::synth_text(
            &cfg.synth,
            cfg.seeds.data,
            cfg.lm.corpus_sentences,
            cfg.synth.words_per_utterance,
            cfg.seeds.text,
        )
        .unwrap();
        let lm = train_ngram(&text, cfg.lm.order, cfg.lm.vocab_cap).unwrap();
        (bundle, lexicon, lm)
    }

    #[test]
    fn draw_subset_counts_and_permutation() {
        let ids: Vec<String> = (0..8).map(|i| format!("u{i}")).collect();
        let mut rng = stage_rng(1, "draw");
        let quarter = draw_subset(&ids, 0.25, &mut rng);
        assert_eq!(quarter.len(), 2);

        let mut rng = stage_rng(2, "draw");
        let all = draw_subset(&ids, 1.0, &mut rng);
        assert_eq!(all.len(), 8);
        let mut sorted = all.clone();
        sorted.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(sorted, want, "p=1 must be a permutation");
    }

    #[test]
    fn draw_subset_is_uniform() {
        // 10_000 seeded draws of 5 from 10: each id's inclusion frequency
        // stays within 3 sigma of 0.5 (binomial oracle).
        let ids: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let mut counts = vec![0usize; 10];
        let n = 10_000;
        for trial in 0..n {
            let mut rng = stage_rng(trial as u64, "draw-uniform");
            for id in draw_subset(&ids, 0.5, &mut rng) {
                let idx: usize = id[1..].parse().unwrap();
                counts[idx] += 1;
            }
        }
        let sigma = (n as f64 * 0.25).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - n as f64 * 0.5).abs();
            assert!(dev <= 3.0 * sigma, "id {i}: count {c} deviates {dev}");
        }
    }

    #[test]
    fn zero_rounds_is_supervised_only() {
        let mut cfg = tiny_cfg();
        cfg.ipl.rounds = 0;
        let (bundle, lexicon, lm) = tiny_setup(&cfg);
        let res = IplResources {
            lexicon: &lexicon,
            lm: Some(&lm),
            rescore_lm: None,
        };
        let (_, _, record) = run_ipl(&bundle.dataset, &cfg, res, None).unwrap();
        assert!(record.pseudo_label_sets.is_empty());
        assert_eq!(record.curve.len(), cfg.ipl.bootstrap_epochs);
        assert_eq!(record.expected_epochs(), cfg.ipl.bootstrap_epochs);
    }

    #[test]
    fn runs_are_deterministic_and_sized() {
        let cfg = tiny_cfg();
        let (bundle, lexicon, lm) = tiny_setup(&cfg);
        let res = IplResources {
            lexicon: &lexicon,
            lm: Some(&lm),
            rescore_lm: None,
        };
        let (_, _, r1) = run_ipl(&bundle.dataset, &cfg, res, None).unwrap();
        let (_, _, r2) = run_ipl(&bundle.dataset, &cfg, res, None).unwrap();
        assert_eq!(r1.curve, r2.curve);
        assert_eq!(r1.pseudo_label_sets, r2.pseudo_label_sets);
        assert_eq!(r1.phase_fingerprints, r2.phase_fingerprints);
        assert_eq!(r1.curve.len(), r1.expected_epochs());
        let expect = (cfg.ipl.subset_fraction * cfg.synth.unlabeled as f64).ceil() as usize;
        for set in &r1.pseudo_label_sets {
            assert_eq!(set.entries.len(), expect);
        }
    }

    /// The model object is never reinitialized between rounds: a run with one
    /// round ends exactly where a two-round run's first round ended.
    #[test]
    fn fine_tune_continuity_across_rounds() {
        let cfg2 = tiny_cfg();
        let mut cfg1 = tiny_cfg();
        cfg1.ipl.rounds = 1;
        let (bundle, lexicon, lm) = tiny_setup(&cfg2);
        let res = IplResources {
            lexicon: &lexicon,
            lm: Some(&lm),
            rescore_lm: None,
        };
        let (_, _, r1) = run_ipl(&bundle.dataset, &cfg1, res, None).unwrap();
        let (_, _, r2) = run_ipl(&bundle.dataset, &cfg2, res, None).unwrap();
        // Fingerprints: [bootstrap, round-1] vs [bootstrap, round-1, round-2].
        assert_eq!(r1.phase_fingerprints[0], r2.phase_fingerprints[0]);
        assert_eq!(r1.phase_fingerprints[1], r2.phase_fingerprints[1]);
        assert_ne!(r2.phase_fingerprints[1].1, r2.phase_fingerprints[2].1);
    }

    #[test]
    fn scratch_rounds_protocol_shape() {
        let mut cfg = tiny_cfg();
        cfg.ipl.rounds = 1;
        let (bundle, lexicon, lm) = tiny_setup(&cfg);
        let res = IplResources {
            lexicon: &lexicon,
            lm: Some(&lm),
            rescore_lm: None,
        };
        let (_, _, record) = run_scratch_rounds(&bundle.dataset, &cfg, res, None).unwrap();
        assert_eq!(record.pseudo_label_sets.len(), 1);
        assert_eq!(
            record.pseudo_label_sets[0].entries.len(),
            bundle.dataset.unlabeled.len(),
            "scratch rounds label the entire unlabeled set"
        );
        let (_, _, again) = run_scratch_rounds(&bundle.dataset, &cfg, res, None).unwrap();
        assert_eq!(record.curve, again.curve);
        // Fresh init each round: the scratch round does NOT continue from
        // bootstrap.
        assert_eq!(record.phase_fingerprints.len(), 2);
    }

    #[test]
    fn missing_lm_is_a_config_error() {
        let cfg = tiny_cfg();
        let (bundle, lexicon, _) = tiny_setup(&cfg);
        let res = IplResources {
            lexicon: &lexicon,
            lm: None,
            rescore_lm: None,
        };
        assert!(matches!(
            run_ipl(&bundle.dataset, &cfg, res, None),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn run_dir_artifacts_written() {
        let mut cfg = tiny_cfg();
        cfg.ipl.rounds = 1;
        let (bundle, lexicon, lm) = tiny_setup(&cfg);
        let res = IplResources {
            lexicon: &lexicon,
            lm: Some(&lm),
            rescore_lm: None,
        };
        let dir = tempfile::tempdir().unwrap();
        run_ipl(&bundle.dataset, &cfg, res, Some(dir.path())).unwrap();
        for name in ["pl_round_1.tsv", "round-1.ckpt", "model.ckpt", "curves.csv", "record.json"] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert!(curves.starts_with("epoch,phase,dev_wer_greedy,loss_L,loss_U,lambda"));
        assert_eq!(
            curves.lines().count(),
            1 + cfg.ipl.bootstrap_epochs + cfg.ipl.rounds * cfg.ipl.epochs_per_round
        );
    }
}
