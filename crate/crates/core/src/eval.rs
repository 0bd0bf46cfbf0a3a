//! Word error rate computation, model evaluation, and the experiment harness.
//!
//! This module is also the only place allowed to touch the hidden references
//! of the unlabeled split: [`HiddenRefs`] keeps its table private, so training
//! code paths cannot read pseudo-label ground truth even by accident.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::am::AcousticModel;
use crate::config::{config_hash, RunConfig};
use crate::corpus::{filter_overlap, synth_text, Dataset, TextCorpus, Utterance};
use crate::decoder::{
    beam_search, decode_batch, greedy_batch, rescore_beam, DecodeParams, Lexicon,
};
use crate::error::{Error, Result};
use crate::ipl::{
    dataset_input_dim, dev_wer_greedy, run_ipl, run_scratch_rounds, IplResources, IplRunRecord,
    PseudoLabeledSet,
};
use crate::lm::{perplexity, train_ngram, NGramLM};

/// Evaluation-only side table mapping unlabeled utterance ids to their true
/// transcripts. Constructed by dataset synthesis, readable only through this
/// module's evaluation entry points.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenRefs {
    refs: BTreeMap<String, Vec<String>>,
}

impl HiddenRefs {
    pub(crate) fn new(refs: BTreeMap<String, Vec<String>>) -> Self {
        HiddenRefs { refs }
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub(crate) fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (id, words) in &self.refs {
            out.push_str(&format!("{}\t{}\n", id, words.join(" ")));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads the side table written next to a dataset directory.
    pub fn load(dataset_dir: &Path) -> Result<Self> {
        let path = dataset_dir.join("hidden_refs.tsv");
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut refs = BTreeMap::new();
        for line in raw.lines().filter(|l| !l.is_empty()) {
            let (id, words) = line.split_once('\t').ok_or_else(|| Error::CorruptHeader {
                path: path.clone(),
                message: format!("line without tab: {line}"),
            })?;
            refs.insert(
                id.to_string(),
                words.split_whitespace().map(str::to_string).collect(),
            );
        }
        Ok(HiddenRefs { refs })
    }

    fn get(&self, id: &str) -> Option<&[String]> {
        self.refs.get(id).map(|v| v.as_slice())
    }

    /// All hidden reference sentences, in id order.
    fn sentences(&self) -> Vec<Vec<String>> {
        self.refs.values().cloned().collect()
    }
}

/// Edit-distance breakdown of one (or an aggregate of) reference/hypothesis
/// pairs. `wer` may exceed 1 when the hypothesis is longer than the
/// reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
    /// Set when `ref_words == 0`; `wer` is then defined as the insertion count.
    pub empty_reference: bool,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    fn finish(mut self) -> Self {
        if self.ref_words == 0 {
            self.empty_reference = true;
            self.wer = self.insertions as f64;
        } else {
            self.wer = self.errors() as f64 / self.ref_words as f64;
        }
        self
    }

    /// Pools error counts corpus-style: total errors over total reference words.
    pub fn accumulate(&mut self, other: &WerBreakdown) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_words += other.ref_words;
        *self = self.finish();
    }
}

/// Minimum-edit-distance alignment with unit costs. Among minimal alignments
/// the one with fewer insertions, then fewer deletions, wins.
pub fn wer(reference: &[String], hypothesis: &[String]) -> WerBreakdown {
    // DP over (total_edits, insertions, deletions), compared lexicographically.
    // Addition preserves the lexicographic order, so DP substructure holds.
    let n = reference.len();
    let m = hypothesis.len();
    let mut prev: Vec<(usize, usize, usize)> = (0..=m).map(|j| (j, j, 0)).collect();
    let mut cur = vec![(0usize, 0usize, 0usize); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, i);
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let sub = add3(prev[j - 1], (sub_cost, 0, 0));
            let del = add3(prev[j], (1, 0, 1));
            let ins = add3(cur[j - 1], (1, 1, 0));
            cur[j] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (total, insertions, deletions) = prev[m];
    WerBreakdown {
        substitutions: total - insertions - deletions,
        deletions,
        insertions,
        ref_words: n,
        wer: 0.0,
        empty_reference: false,
    }
    .finish()
}

fn add3(a: (usize, usize, usize), b: (usize, usize, usize)) -> (usize, usize, usize) {
    (a.0 + b.0, a.1 + b.1, a.2 + b.2)
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

/// How to turn lattices into word sequences during evaluation, mirroring the
/// greedy / beam / beam+rescore rows of the paper's decoding comparisons.
pub enum DecodeSpec<'a> {
    Greedy,
    Beam {
        lm: &'a NGramLM,
        params: DecodeParams,
    },
    BeamRescore {
        lm: &'a NGramLM,
        params: DecodeParams,
        rescore_lm: &'a NGramLM,
        rescore_weight: f64,
        rescore_word_score: f64,
    },
}

/// Where reference transcripts come from: the utterances themselves, or the
/// evaluation-only hidden table (for pseudo-label quality measurement).
pub enum RefSource<'a> {
    Transcripts,
    Hidden(&'a HiddenRefs),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub reference: Vec<String>,
    pub hypothesis: Vec<String>,
    pub breakdown: WerBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub aggregate: WerBreakdown,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Per-utterance TSV: `<id>\t<wer>\t<reference>\t<hypothesis>`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                r.breakdown.wer,
                r.reference.join(" "),
                r.hypothesis.join(" ")
            ));
        }
        out
    }

    pub fn recomputed_aggregate(&self) -> WerBreakdown {
        let mut agg = WerBreakdown::default();
        for r in &self.rows {
            agg.accumulate(&r.breakdown);
        }
        agg
    }
}

/// Decodes a split and reports corpus-level WER (pooled errors over pooled
/// reference words) plus per-utterance rows.
pub fn evaluate(
    model: &AcousticModel,
    utterances: &[Utterance],
    lexicon: &Lexicon,
    spec: &DecodeSpec,
    refs: &RefSource,
) -> Result<EvalReport> {
    let hypotheses: Vec<Vec<String>> = match spec {
        DecodeSpec::Greedy => greedy_batch(model, utterances, lexicon)?
            .into_iter()
            .map(|(_, _, words)| words)
            .collect(),
        DecodeSpec::Beam { lm, params } => {
            decode_batch(model, utterances, lexicon, lm, params, None)?
                .into_iter()
                .map(|o| o.hypothesis.map(|h| h.words).unwrap_or_default())
                .collect()
        }
        DecodeSpec::BeamRescore {
            lm,
            params,
            rescore_lm,
            rescore_weight,
            rescore_word_score,
        } => decode_batch(
            model,
            utterances,
            lexicon,
            lm,
            params,
            Some((rescore_lm, *rescore_weight, *rescore_word_score)),
        )?
        .into_iter()
        .map(|o| o.hypothesis.map(|h| h.words).unwrap_or_default())
        .collect(),
    };

    let mut aggregate = WerBreakdown::default();
    let mut rows = Vec::with_capacity(utterances.len());
    for (u, hypothesis) in utterances.iter().zip(hypotheses) {
        let reference: Vec<String> = match refs {
            RefSource::Transcripts => u
                .transcript
                .clone()
                .ok_or_else(|| Error::MissingReference { id: u.id.clone() })?,
            RefSource::Hidden(hidden) => hidden
                .get(&u.id)
                .ok_or_else(|| Error::MissingReference { id: u.id.clone() })?
                .to_vec(),
        };
        let breakdown = wer(&reference, &hypothesis);
        aggregate.accumulate(&breakdown);
        rows.push(EvalRow {
            id: u.id.clone(),
            reference,
            hypothesis,
            breakdown,
        });
    }
    Ok(EvalReport { aggregate, rows })
}

/// Pooled WER of one round's pseudo-labels against the hidden references.
pub fn pseudo_label_wer(set: &PseudoLabeledSet, hidden: &HiddenRefs) -> Result<WerBreakdown> {
    let mut agg = WerBreakdown::default();
    for e in &set.entries {
        let reference = hidden
            .get(&e.id)
            .ok_or_else(|| Error::MissingReference { id: e.id.clone() })?;
        agg.accumulate(&wer(reference, &e.words));
    }
    Ok(agg)
}

/// Fills `pl_wer_per_round` on a finished run record. Lives here because only
/// the eval module may read the hidden table.
pub fn annotate_pl_quality(record: &mut IplRunRecord, hidden: &HiddenRefs) -> Result<()> {
    record.pl_wer_per_round = record
        .pseudo_label_sets
        .iter()
        .map(|set| pseudo_label_wer(set, hidden).map(|b| Some(b.wer)))
        .collect::<Result<Vec<_>>>()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Experiment harness
// ---------------------------------------------------------------------------

/// One deterministic CSV artifact. The first line is always
/// `# config_hash=<hex>` so plots can be traced back to their config.
#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub file_name: String,
    pub header: String,
    pub rows: Vec<String>,
    pub config_hash: String,
}

impl Csv {
    fn new(file_name: &str, header: &str, cfg: &RunConfig) -> Self {
        Csv {
            file_name: file_name.to_string(),
            header: header.to_string(),
            rows: Vec::new(),
            config_hash: config_hash(cfg),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("# config_hash={}\n{}\n", self.config_hash, self.header);
        for row in &self.rows {
            out.push_str(row);
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(&self.file_name);
        fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Trains the first-pass LM on clean in-domain text sampled from the task's
/// word chain (text seed, so no overlap with the dataset draws).
pub fn train_task_lm(cfg: &RunConfig, order: usize) -> Result<NGramLM> {
    let text = synth_text(
        &cfg.synth,
        cfg.seeds.data,
        cfg.lm.corpus_sentences,
        cfg.synth.words_per_utterance,
        cfg.seeds.text,
    )?;
    train_ngram(&text, order, cfg.lm.vocab_cap)
}

fn ipl_resources<'a>(
    lexicon: &'a Lexicon,
    lm: Option<&'a NGramLM>,
    rescore: Option<&'a NGramLM>,
) -> IplResources<'a> {
    IplResources {
        lexicon,
        lm,
        rescore_lm: rescore,
    }
}

/// Figure-2 analog: the {augmentation} x {LM decoding} grid plus a supervised
/// baseline trained on the labeled split for the same total epoch budget.
/// One run per (variant, seed); rows carry the full dev-WER curves.
pub fn harness_ablation(dataset: &Dataset, cfg: &RunConfig) -> Result<Csv> {
    let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
    let lm = train_task_lm(cfg, cfg.lm.order)?;
    let rescore_lm = if cfg.ipl.use_rescoring {
        Some(train_task_lm(cfg, cfg.lm.rescore_order)?)
    } else {
        None
    };
    let total_epochs = cfg.ipl.bootstrap_epochs + cfg.ipl.rounds * cfg.ipl.epochs_per_round;

    let mut csv = Csv::new(
        "ablation.csv",
        "variant,seed,epoch,phase,dev_wer_greedy",
        cfg,
    );
    let variants: [(&str, bool, bool); 5] = [
        ("baseline", false, false),
        ("ipl_neither", false, false),
        ("ipl_augment", false, true),
        ("ipl_lm", true, false),
        ("ipl_lm_augment", true, true),
    ];
    for &seed in &cfg.harness.ablation_seeds {
        for (name, use_lm, use_aug) in variants {
            let mut run_cfg = cfg.clone();
            run_cfg.seeds.run = seed;
            run_cfg.ipl.use_lm_decoding = use_lm;
            run_cfg.ipl.use_rescoring = use_lm && cfg.ipl.use_rescoring;
            run_cfg.ipl.use_augmentation = use_aug;
            if name == "baseline" {
                run_cfg.ipl.rounds = 0;
                run_cfg.ipl.bootstrap_epochs = total_epochs;
            }
            let res = ipl_resources(
                &lexicon,
                use_lm.then_some(&lm),
                run_cfg.ipl.use_rescoring.then(|| rescore_lm.as_ref().expect("built above")),
            );
            let (_, _, record) = run_ipl(dataset, &run_cfg, res, None)?;
            for p in &record.curve {
                csv.rows.push(format!(
                    "{name},{seed},{},{},{}",
                    p.epoch, p.phase, p.dev_wer_greedy
                ));
            }
        }
    }
    Ok(csv)
}

/// Figure-3 analog: one full IPL run per subset fraction.
pub fn harness_subset(dataset: &Dataset, cfg: &RunConfig) -> Result<Csv> {
    let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
    let lm = train_task_lm(cfg, cfg.lm.order)?;
    let rescore_lm = if cfg.ipl.use_rescoring {
        Some(train_task_lm(cfg, cfg.lm.rescore_order)?)
    } else {
        None
    };
    let mut csv = Csv::new("subset.csv", "fraction,epoch,phase,dev_wer_greedy", cfg);
    for &fraction in &cfg.harness.subset_fractions {
        let mut run_cfg = cfg.clone();
        run_cfg.ipl.subset_fraction = fraction;
        let res = ipl_resources(&lexicon, Some(&lm), rescore_lm.as_ref());
        let (_, _, record) = run_ipl(dataset, &run_cfg, res, None)?;
        for p in &record.curve {
            csv.rows.push(format!(
                "{fraction},{},{},{}",
                p.epoch, p.phase, p.dev_wer_greedy
            ));
        }
    }
    Ok(csv)
}

/// Figure-1 analog: after one full pseudo-labeling pass, fine-tune the
/// bootstrap model vs. train a fresh model from scratch on identical labels.
pub fn harness_finetune_vs_scratch(dataset: &Dataset, cfg: &RunConfig) -> Result<Csv> {
    use crate::am::{train_epochs, OptimizerState};
    use crate::corpus::sub_seed;

    let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
    let lm = train_task_lm(cfg, cfg.lm.order)?;

    // Shared bootstrap.
    let mut boot_cfg = cfg.clone();
    boot_cfg.ipl.rounds = 0;
    let res = ipl_resources(&lexicon, Some(&lm), None);
    let (boot_model, boot_opt, _) = run_ipl(dataset, &boot_cfg, res, None)?;

    // One pseudo-labeling pass over the entire unlabeled set.
    let mut pl_cfg = cfg.clone();
    pl_cfg.ipl.subset_fraction = 1.0;
    let params = if cfg.ipl.tune_budget > 0 {
        crate::decoder::tune_decode_params(
            &boot_model,
            &lm,
            &lexicon,
            &dataset.dev,
            &cfg.decode.params(),
            cfg.ipl.tune_budget,
            &cfg.decode.tune_ranges,
            sub_seed(cfg.seeds.run, "tune-0"),
        )?
        .params
    } else {
        cfg.decode.params()
    };
    let outcomes = decode_batch(&boot_model, &dataset.unlabeled, &lexicon, &lm, &params, None)?;
    let mut pool = crate::ipl::labeled_samples(dataset)?;
    for (u, o) in dataset.unlabeled.iter().zip(&outcomes) {
        let tokens = match &o.hypothesis {
            Some(h) => lexicon.tokens_for(&h.words).expect("lexicon words"),
            None => Vec::new(),
        };
        if !crate::am::ctc_feasible(boot_model.out_frames(u.features.nrows()), &tokens) {
            continue;
        }
        pool.push(crate::am::TrainSample {
            utterance_id: u.id.clone(),
            features: u.features.clone(),
            target: tokens,
            origin: crate::am::SampleOrigin::Pseudo,
        });
    }

    let epochs = cfg.scratch_epochs();
    let policy = cfg.ipl.use_augmentation.then_some(&cfg.augment);
    let mut csv = Csv::new(
        "finetune_vs_scratch.csv",
        "strategy,epoch,dev_wer_greedy",
        cfg,
    );

    let n_params = boot_model.n_params();
    for (strategy, mut model, mut opt) in [
        ("fine_tune", boot_model.clone(), boot_opt.clone()),
        (
            "from_scratch",
            AcousticModel::init(
                &cfg.model,
                dataset_input_dim(dataset, cfg),
                dataset.vocabulary.n_labels(),
                sub_seed(cfg.seeds.run, "ftvs-scratch-init"),
            )?,
            OptimizerState::new(n_params, cfg.train.learning_rate, cfg.train.halve_lr_at_epoch),
        ),
    ] {
        let rows = &mut csv.rows;
        let dev = &dataset.dev;
        let lexicon_ref = &lexicon;
        let mut step = 0usize;
        train_epochs(
            &mut model,
            &mut opt,
            &pool,
            policy,
            epochs,
            sub_seed(cfg.seeds.run, &format!("ftvs-{strategy}")),
            |_, m, _| {
                step += 1;
                rows.push(format!(
                    "{strategy},{step},{}",
                    dev_wer_greedy(m, dev, lexicon_ref)?
                ));
                Ok(())
            },
        )?;
    }
    Ok(csv)
}

/// Table-3 analog: from-scratch pseudo-labeling rounds 0..3 vs full IPL, with
/// deterministic work counters as the efficiency measure.
pub fn harness_rounds(dataset: &Dataset, cfg: &RunConfig) -> Result<Csv> {
    let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
    let lm = train_task_lm(cfg, cfg.lm.order)?;
    let res = ipl_resources(&lexicon, Some(&lm), None);

    let mut scratch_cfg = cfg.clone();
    scratch_cfg.ipl.rounds = 3;
    scratch_cfg.ipl.use_rescoring = false;
    let (_, _, scratch) = run_scratch_rounds(dataset, &scratch_cfg, res, None)?;

    let mut ipl_cfg = cfg.clone();
    ipl_cfg.ipl.use_rescoring = false;
    let (_, _, ipl) = run_ipl(dataset, &ipl_cfg, res, None)?;

    let mut csv = Csv::new(
        "rounds.csv",
        "protocol,round,dev_wer_greedy,cumulative_train_samples,cumulative_decoded",
        cfg,
    );
    // Round 0 is the bootstrap model; scratch round r is phase scratch-round-r.
    let mut cumulative_samples = 0u64;
    let mut cumulative_decoded = 0u64;
    for (round, phase) in std::iter::once((0usize, "bootstrap".to_string()))
        .chain((1..=3).map(|r| (r, format!("scratch-round-{r}"))))
    {
        let last = scratch
            .curve
            .iter()
            .filter(|p| p.phase == phase)
            .next_back()
            .expect("phase recorded");
        cumulative_samples += scratch
            .phase_train_samples
            .iter()
            .find(|(name, _)| *name == phase)
            .map(|(_, n)| *n)
            .unwrap_or(0);
        if round > 0 {
            cumulative_decoded += dataset.unlabeled.len() as u64;
        }
        csv.rows.push(format!(
            "scratch,{round},{},{cumulative_samples},{cumulative_decoded}",
            last.dev_wer_greedy
        ));
    }
    csv.rows.push(format!(
        "ipl,{},{},{},{}",
        ipl.rounds, ipl.final_dev_wer_greedy, ipl.train_samples_processed, ipl.utterances_decoded
    ));
    Ok(csv)
}

/// Table-4 / label-leakage analog: IPL with a leaky LM (trained on text
/// containing the unlabeled split's true sentences), a clean LM of the same
/// size, and a clean LM on 4x more in-domain text.
pub fn harness_lm_corpora(dataset: &Dataset, hidden: &HiddenRefs, cfg: &RunConfig) -> Result<Csv> {
    let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
    let hidden_sentences = hidden.sentences();
    let n = cfg.lm.corpus_sentences.max(hidden_sentences.len());

    // Clean text is chain-sampled with margin, then overlap-filtered against
    // the hidden sentences, exactly the corpus-preparation pipeline.
    let clean_pool = synth_text(
        &cfg.synth,
        cfg.seeds.data,
        n * 6,
        cfg.synth.words_per_utterance,
        cfg.seeds.text.wrapping_add(1),
    )?;
    let (clean_filtered, _) = filter_overlap(
        &clean_pool,
        &std::collections::BTreeSet::new(),
        &hidden_sentences,
    );

    let take = |corpus: &TextCorpus, count: usize, tag: &str| -> TextCorpus {
        TextCorpus::new(
            corpus
                .documents
                .iter()
                .take(count)
                .map(|(t, b)| (format!("{tag}-{t}"), b.clone()))
                .collect(),
        )
    };

    let leaky = {
        let mut docs: Vec<(String, Vec<String>)> = hidden_sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("leak-{i:05}"), s.clone()))
            .collect();
        let filler = take(&clean_filtered, n - hidden_sentences.len().min(n), "fill");
        docs.extend(filler.documents);
        TextCorpus::new(docs)
    };
    let clean_same = take(&clean_filtered, n, "clean");
    let clean_large = {
        let more = synth_text(
            &cfg.synth,
            cfg.seeds.data,
            n * 24,
            cfg.synth.words_per_utterance,
            cfg.seeds.text.wrapping_add(2),
        )?;
        let (filtered, _) = filter_overlap(&more, &std::collections::BTreeSet::new(), &hidden_sentences);
        take(&filtered, 4 * n, "large")
    };

    let dev_text: Vec<Vec<String>> = dataset
        .dev
        .iter()
        .map(|u| u.transcript.clone().expect("dev has transcripts"))
        .collect();

    let mut csv = Csv::new(
        "lm_corpora.csv",
        "lm_corpus,sentences,dev_ppl,final_dev_wer_greedy,mean_pl_wer",
        cfg,
    );
    for (name, corpus) in [
        ("leaky", &leaky),
        ("clean_same", &clean_same),
        ("clean_4x", &clean_large),
    ] {
        let lm = train_ngram(corpus, cfg.lm.order, cfg.lm.vocab_cap)?;
        let ppl = perplexity(&lm, &dev_text);
        let mut run_cfg = cfg.clone();
        run_cfg.ipl.use_lm_decoding = true;
        run_cfg.ipl.use_rescoring = false;
        let res = ipl_resources(&lexicon, Some(&lm), None);
        let (_, _, mut record) = run_ipl(dataset, &run_cfg, res, None)?;
        annotate_pl_quality(&mut record, hidden)?;
        let pl_wers: Vec<f64> = record.pl_wer_per_round.iter().flatten().copied().collect();
        let mean_pl = if pl_wers.is_empty() {
            f64::NAN
        } else {
            pl_wers.iter().sum::<f64>() / pl_wers.len() as f64
        };
        csv.rows.push(format!(
            "{name},{},{ppl},{},{mean_pl}",
            corpus.documents.len(),
            record.final_dev_wer_greedy
        ));
    }
    Ok(csv)
}

/// Appendix-B analog: grid over first-pass and rescoring LM weights, WER
/// evaluated on both the dev and the labeled training split.
pub fn harness_lm_weight_sweep(dataset: &Dataset, cfg: &RunConfig) -> Result<Csv> {
    let lexicon = Lexicon::from_vocabulary(&dataset.vocabulary);
    let lm = train_task_lm(cfg, cfg.lm.order)?;
    let rescore_lm = train_task_lm(cfg, cfg.lm.rescore_order)?;

    let mut boot_cfg = cfg.clone();
    boot_cfg.ipl.rounds = 0;
    let res = ipl_resources(&lexicon, Some(&lm), None);
    let (model, _, _) = run_ipl(dataset, &boot_cfg, res, None)?;

    let mut csv = Csv::new(
        "lm_weight_sweep.csv",
        "decode_lm_weight,rescore_lm_weight,dev_wer,train_wer",
        cfg,
    );
    for &dw in &cfg.harness.sweep_decode_weights {
        let params = DecodeParams {
            lm_weight: dw,
            ..cfg.decode.params()
        };
        // Decode each split once per first-pass weight; rescore per weight.
        let mut beams: Vec<(usize, Vec<crate::decoder::BeamHypothesis>)> = Vec::new();
        for (split, utts) in [&dataset.dev, &dataset.labeled].into_iter().enumerate() {
            let decoded: Vec<Vec<crate::decoder::BeamHypothesis>> = utts
                .par_iter()
                .map(|u| {
                    let lattice = model.forward(&u.features.view(), &u.id)?;
                    Ok(beam_search(&lattice, &lexicon, &lm, &params))
                })
                .collect::<Result<_>>()?;
            beams.extend(decoded.into_iter().map(|b| (split, b)));
        }

        for &rw in &cfg.harness.sweep_rescore_weights {
            let mut aggs = [WerBreakdown::default(), WerBreakdown::default()];
            let mut idx = [0usize; 2];
            for (split, beam) in &beams {
                let utts: &[Utterance] = if *split == 0 {
                    &dataset.dev
                } else {
                    &dataset.labeled
                };
                let u = &utts[idx[*split]];
                idx[*split] += 1;
                let hyp = if beam.is_empty() {
                    Vec::new()
                } else {
                    rescore_beam(beam, &rescore_lm, rw, cfg.decode.word_score)?.words
                };
                let reference = u.transcript.as_ref().expect("labeled/dev transcripts");
                aggs[*split].accumulate(&wer(reference, &hyp));
            }
            csv.rows.push(format!(
                "{dw},{rw},{},{}",
                aggs[0].wer, aggs[1].wer
            ));
        }
    }
    Ok(csv)
}
