//! Lexicon-constrained CTC prefix beam search with shallow LM fusion and word
//! insertion score, plus second-pass beam rescoring and random-search tuning
//! of the decode weights.
//!
//! Scores are natural-log throughout; LM log10 scores are folded in with an
//! `ln 10` factor, so a hypothesis total is
//! `am + lm_weight * ln(10) * lm_log10 + word_score * |words|`.
//! The LM contribution covers completed words only (no `</s>` term).

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::am::{ctc_log_prob, greedy_decode, AcousticModel, EmissionLattice};
use crate::corpus::{Utterance, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::wer;
use crate::lm::{LmState, NGramLM};

pub const LN_10: f64 = std::f64::consts::LN_10;

/// Word -> character-token-sequence map compiled into a trie. Node 0 is the
/// root; nodes carry the words completed at them.
#[derive(Debug, Clone)]
pub struct Lexicon {
    words: Vec<String>,
    spellings: Vec<Vec<usize>>,
    nodes: Vec<TrieNode>,
    /// Lexicographic rank per word index, for deterministic tie-breaking.
    rank: Vec<usize>,
    /// Token id -> character, for rendering out-of-lexicon token runs.
    alphabet: Vec<char>,
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    children: Vec<(usize, usize)>, // (token, node), sorted by token
    completes: Vec<usize>,
}

impl Lexicon {
    pub fn from_vocabulary(vocab: &Vocabulary) -> Self {
        let pairs: Vec<(String, Vec<usize>)> = vocab
            .words()
            .iter()
            .map(|w| {
                let spelling = w.chars().map(|c| vocab.token_id(c).expect("vocab char")).collect();
                (w.clone(), spelling)
            })
            .collect();
        Self::from_pairs(pairs, vocab.tokens().to_vec())
    }

    pub fn from_pairs(pairs: Vec<(String, Vec<usize>)>, alphabet: Vec<char>) -> Self {
        let mut lex = Lexicon {
            words: Vec::new(),
            spellings: Vec::new(),
            nodes: vec![TrieNode::default()],
            rank: Vec::new(),
            alphabet,
        };
        for (word, spelling) in pairs {
            let idx = lex.words.len();
            let mut node = 0usize;
            for &tok in &spelling {
                node = match lex.nodes[node].children.binary_search_by_key(&tok, |e| e.0) {
                    Ok(pos) => lex.nodes[node].children[pos].1,
                    Err(pos) => {
                        let new = lex.nodes.len();
                        lex.nodes.push(TrieNode::default());
                        lex.nodes[node].children.insert(pos, (tok, new));
                        new
                    }
                };
            }
            lex.nodes[node].completes.push(idx);
            lex.words.push(word);
            lex.spellings.push(spelling);
        }
        let mut order: Vec<usize> = (0..lex.words.len()).collect();
        order.sort_by(|&a, &b| lex.words[a].cmp(&lex.words[b]));
        lex.rank = vec![0; lex.words.len()];
        for (r, &idx) in order.iter().enumerate() {
            lex.rank[idx] = r;
        }
        debug_assert!(lex.check_paths(), "trie must reproduce all entries");
        lex
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    pub fn spelling(&self, word: &str) -> Option<&[usize]> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| self.spellings[i].as_slice())
    }

    /// Token ids for a word sequence, `None` if any word is out of lexicon.
    pub fn tokens_for(&self, words: &[String]) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for w in words {
            out.extend_from_slice(self.spelling(w)?);
        }
        Some(out)
    }

    fn step(&self, node: usize, token: usize) -> Option<usize> {
        self.nodes[node]
            .children
            .binary_search_by_key(&token, |e| e.0)
            .ok()
            .map(|pos| self.nodes[node].children[pos].1)
    }

    fn check_paths(&self) -> bool {
        // Walk each spelling and confirm the trie reproduces it.
        self.spellings.iter().enumerate().all(|(idx, spelling)| {
            let mut node = 0;
            for &tok in spelling {
                match self.step(node, tok) {
                    Some(next) => node = next,
                    None => return false,
                }
            }
            self.nodes[node].completes.contains(&idx)
        })
    }

    /// Splits a collapsed token sequence into lexicon words: minimize
    /// unmatched tokens, then word count; maximal unmatched runs come out as
    /// one pseudo-word each. Used to evaluate greedy (lexicon-free) decoding
    /// at the word level.
    pub fn segment_tokens(&self, tokens: &[usize]) -> Vec<String> {
        let n = tokens.len();
        // best[pos][prev_skipped] = (unmatched, words); choice: token count of
        // the matched word, or 0 for a skip.
        const INF: (usize, usize) = (usize::MAX / 2, usize::MAX / 2);
        let mut best = vec![[INF; 2]; n + 1];
        let mut choice = vec![[0usize; 2]; n + 1];
        best[n] = [(0, 0); 2];
        for pos in (0..n).rev() {
            for prev_skipped in [false, true] {
                let s = usize::from(prev_skipped);
                // Matching words, longest first, beats skipping on ties.
                let mut matches: Vec<usize> = Vec::new();
                let mut node = 0usize;
                for (depth, &tok) in tokens[pos..].iter().enumerate() {
                    match self.step(node, tok) {
                        Some(next) => {
                            node = next;
                            if !self.nodes[node].completes.is_empty() {
                                matches.push(depth + 1);
                            }
                        }
                        None => break,
                    }
                }
                let mut cell = INF;
                let mut pick = 0usize;
                for &len in matches.iter().rev() {
                    let sub = best[pos + len][0];
                    let cand = (sub.0, sub.1 + 1);
                    if cand < cell {
                        cell = cand;
                        pick = len;
                    }
                }
                let sub = best[pos + 1][1];
                let cand = (sub.0 + 1, sub.1 + usize::from(!prev_skipped));
                if cand < cell {
                    cell = cand;
                    pick = 0;
                }
                best[pos][s] = cell;
                choice[pos][s] = pick;
            }
        }

        let mut out = Vec::new();
        let mut pos = 0usize;
        let mut prev_skipped = false;
        let mut run = String::new();
        while pos < n {
            let pick = choice[pos][usize::from(prev_skipped)];
            if pick == 0 {
                let c = self
                    .alphabet
                    .get(tokens[pos].saturating_sub(1))
                    .copied()
                    .unwrap_or('?');
                run.push(c);
                pos += 1;
                prev_skipped = true;
            } else {
                if !run.is_empty() {
                    out.push(std::mem::take(&mut run));
                }
                // The chosen length may complete several words only if two
                // entries share a spelling; entry order breaks that tie.
                let mut node = 0usize;
                for &tok in &tokens[pos..pos + pick] {
                    node = self.step(node, tok).expect("match came from the trie");
                }
                let widx = self.nodes[node].completes[0];
                out.push(self.words[widx].clone());
                pos += pick;
                prev_skipped = false;
            }
        }
        if !run.is_empty() {
            out.push(run);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    /// LM weight (the paper's alpha), applied to log10 LM scores.
    pub lm_weight: f64,
    /// Word insertion score (the paper's beta), per emitted word.
    pub word_score: f64,
    pub beam_size: usize,
    /// Natural-log pruning gap: hypotheses worse than the frame best by more
    /// than this are dropped.
    pub beam_threshold: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams {
            lm_weight: 1.5,
            word_score: 0.0,
            beam_size: 64,
            beam_threshold: 20.0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::InvalidConfig {
                key: "decode.beam_size".into(),
                message: "must be >= 1".into(),
            });
        }
        if !(self.beam_threshold > 0.0) {
            return Err(Error::InvalidConfig {
                key: "decode.beam_threshold".into(),
                message: format!("must be > 0, got {}", self.beam_threshold),
            });
        }
        Ok(())
    }
}

/// One finished beam entry: a word sequence with its score decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub words: Vec<String>,
    /// Natural-log CTC prefix probability accumulated over the search.
    pub am_score: f64,
    /// log10 LM probability of the emitted words.
    pub lm_score: f64,
    pub word_count: usize,
    pub total: f64,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Clone)]
struct Hyp {
    words: Vec<u32>,
    node: usize,
    last_token: Option<usize>,
    lm_state: LmState,
    lm_score: f64,
    /// ln prob of paths for this prefix ending in blank.
    p_blank: f64,
    /// ln prob of paths ending in the prefix's last token.
    p_token: f64,
}

impl Hyp {
    fn am(&self) -> f64 {
        log_add(self.p_blank, self.p_token)
    }

    fn total(&self, params: &DecodeParams) -> f64 {
        self.am() + params.lm_weight * LN_10 * self.lm_score
            + params.word_score * self.words.len() as f64
    }
}

/// CTC prefix beam search over the lattice, constrained to lexicon words,
/// with shallow LM fusion. Returns up to `beam_size` finished hypotheses
/// sorted by total score (ties: lexicographically earlier word sequence).
/// Hypotheses still inside an unfinished word are dropped at the end; an
/// empty return means no word could be completed.
pub fn beam_search(
    lattice: &EmissionLattice,
    lexicon: &Lexicon,
    lm: &NGramLM,
    params: &DecodeParams,
) -> Vec<BeamHypothesis> {
    beam_search_impl(lattice, lexicon, lm, params, true)
}

pub(crate) fn beam_search_impl(
    lattice: &EmissionLattice,
    lexicon: &Lexicon,
    lm: &NGramLM,
    params: &DecodeParams,
    merge: bool,
) -> Vec<BeamHypothesis> {
    let frames = lattice.frames();
    let mut beam = vec![Hyp {
        words: Vec::new(),
        node: 0,
        last_token: None,
        lm_state: lm.initial_state(),
        lm_score: 0.0,
        p_blank: 0.0,
        p_token: f64::NEG_INFINITY,
    }];

    // In no-merge mode every candidate gets a unique key, turning the search
    // into plain path enumeration; used to check that merging is only an
    // optimization.
    let mut unique = 0u64;
    for t in 0..frames {
        let row = lattice.log_probs.row(t);
        let mut next: HashMap<(Vec<u32>, usize, u64), Hyp> = HashMap::new();
        let upsert = |next: &mut HashMap<(Vec<u32>, usize, u64), Hyp>,
                          template: &Hyp,
                          node: usize,
                          blank_add: f64,
                          token_add: f64,
                          unique: &mut u64| {
            let tag = if merge {
                0
            } else {
                *unique += 1;
                *unique
            };
            let key = (template.words.clone(), node, tag);
            match next.get_mut(&key) {
                Some(h) => {
                    h.p_blank = log_add(h.p_blank, blank_add);
                    h.p_token = log_add(h.p_token, token_add);
                }
                None => {
                    let mut h = template.clone();
                    h.node = node;
                    h.p_blank = blank_add;
                    h.p_token = token_add;
                    next.insert(key, h);
                }
            }
        };

        for hyp in &beam {
            let p_all = hyp.am();
            // Blank keeps the prefix.
            upsert(
                &mut next,
                hyp,
                hyp.node,
                p_all + row[crate::am::BLANK],
                f64::NEG_INFINITY,
                &mut unique,
            );
            // Repeating the last emitted token collapses into it.
            if let Some(z) = hyp.last_token {
                if hyp.p_token > f64::NEG_INFINITY {
                    upsert(
                        &mut next,
                        hyp,
                        hyp.node,
                        f64::NEG_INFINITY,
                        hyp.p_token + row[z],
                        &mut unique,
                    );
                }
            }
            // Trie-edge extensions.
            for &(tok, child) in &lexicon.nodes[hyp.node].children {
                let base = if hyp.last_token == Some(tok) {
                    hyp.p_blank
                } else {
                    p_all
                };
                if base == f64::NEG_INFINITY {
                    continue;
                }
                let contribution = base + row[tok];
                let mut template = hyp.clone();
                template.last_token = Some(tok);
                if !lexicon.nodes[child].children.is_empty() {
                    upsert(
                        &mut next,
                        &template,
                        child,
                        f64::NEG_INFINITY,
                        contribution,
                        &mut unique,
                    );
                }
                for &widx in &lexicon.nodes[child].completes {
                    let (state, inc) = lm.advance(&hyp.lm_state, lexicon.word(widx));
                    let mut done = template.clone();
                    done.words.push(widx as u32);
                    done.lm_state = state;
                    done.lm_score += inc;
                    upsert(&mut next, &done, 0, f64::NEG_INFINITY, contribution, &mut unique);
                }
            }
        }

        let mut candidates: Vec<Hyp> = next.into_values().collect();
        candidates.sort_by(|a, b| {
            b.total(params)
                .partial_cmp(&a.total(params))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| rank_key(lexicon, &a.words).cmp(&rank_key(lexicon, &b.words)))
                .then_with(|| a.node.cmp(&b.node))
        });
        candidates.truncate(params.beam_size.max(1));
        if let Some(best) = candidates.first() {
            let cutoff = best.total(params) - params.beam_threshold;
            candidates.retain(|h| h.total(params) >= cutoff);
        }
        beam = candidates;
    }

    let mut finished: Vec<BeamHypothesis> = beam
        .into_iter()
        .filter(|h| h.node == 0 && !h.words.is_empty())
        .map(|h| BeamHypothesis {
            words: h.words.iter().map(|&i| lexicon.word(i as usize).to_string()).collect(),
            am_score: h.am(),
            lm_score: h.lm_score,
            word_count: h.words.len(),
            total: h.total(params),
        })
        .collect();
    if !merge {
        // Regroup duplicated word sequences, summing their path mass.
        let mut grouped: HashMap<Vec<String>, BeamHypothesis> = HashMap::new();
        for h in finished {
            match grouped.get_mut(&h.words) {
                Some(g) => {
                    g.am_score = log_add(g.am_score, h.am_score);
                }
                None => {
                    grouped.insert(h.words.clone(), h);
                }
            }
        }
        finished = grouped
            .into_values()
            .map(|mut h| {
                h.total = h.am_score
                    + params.lm_weight * LN_10 * h.lm_score
                    + params.word_score * h.word_count as f64;
                h
            })
            .collect();
    }
    finished.sort_by(|a, b| {
        b.total
            .partial_cmp(&a.total)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.words.cmp(&b.words))
    });
    finished.truncate(params.beam_size);
    finished
}

fn rank_key(lexicon: &Lexicon, words: &[u32]) -> Vec<usize> {
    words.iter().map(|&w| lexicon.rank[w as usize]).collect()
}

/// Re-ranks an existing beam with a second LM: argmax of
/// `am + alpha2 * ln(10) * log10 p_lm2(y) + beta2 * |y|`. Ties keep the
/// earliest incoming entry.
pub fn rescore_beam(
    beam: &[BeamHypothesis],
    lm2: &NGramLM,
    alpha2: f64,
    beta2: f64,
) -> Result<BeamHypothesis> {
    if beam.is_empty() {
        return Err(Error::EmptyBeam);
    }
    let mut best: Option<(f64, &BeamHypothesis, f64)> = None;
    for h in beam {
        let lm_score = lm2.score(&h.words, false);
        let total = h.am_score + alpha2 * LN_10 * lm_score + beta2 * h.word_count as f64;
        if best.map_or(true, |(b, _, _)| total > b) {
            best = Some((total, h, lm_score));
        }
    }
    let (total, h, lm_score) = best.expect("non-empty beam");
    Ok(BeamHypothesis {
        words: h.words.clone(),
        am_score: h.am_score,
        lm_score,
        word_count: h.word_count,
        total,
    })
}

/// Scores a fixed word sequence against a lattice with the decode objective:
/// exact CTC log-probability of its token sequence plus LM and word terms.
/// `None` when the sequence is out-of-lexicon or CTC-infeasible.
pub fn score_word_sequence(
    lattice: &EmissionLattice,
    lexicon: &Lexicon,
    lm: &NGramLM,
    params: &DecodeParams,
    words: &[String],
) -> Option<f64> {
    let tokens = lexicon.tokens_for(words)?;
    let am = ctc_log_prob(&lattice.log_probs.view(), &tokens).ok()?;
    Some(am + params.lm_weight * LN_10 * lm.score(words, false) + params.word_score * words.len() as f64)
}

/// Decode outcome for one utterance; `hypothesis` is `None` when the beam
/// finished no word (treated as an empty transcript downstream).
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    pub utterance_id: String,
    pub hypothesis: Option<BeamHypothesis>,
}

/// Beam-decodes a batch in parallel (results in input order). When `rescore`
/// is set, each beam is re-ranked with `(lm2, alpha2, beta2)`.
pub fn decode_batch(
    model: &AcousticModel,
    utterances: &[Utterance],
    lexicon: &Lexicon,
    lm: &NGramLM,
    params: &DecodeParams,
    rescore: Option<(&NGramLM, f64, f64)>,
) -> Result<Vec<DecodeOutcome>> {
    utterances
        .par_iter()
        .map(|u| {
            let lattice = model.forward(&u.features.view(), &u.id)?;
            let beam = beam_search(&lattice, lexicon, lm, params);
            let hypothesis = if beam.is_empty() {
                None
            } else {
                match rescore {
                    Some((lm2, a2, b2)) => Some(rescore_beam(&beam, lm2, a2, b2)?),
                    None => Some(beam.into_iter().next().expect("non-empty")),
                }
            };
            Ok(DecodeOutcome {
                utterance_id: u.id.clone(),
                hypothesis,
            })
        })
        .collect()
}

/// Greedy-decodes a batch in parallel: per-frame argmax collapsed to tokens,
/// then segmented into words against the lexicon.
pub fn greedy_batch(
    model: &AcousticModel,
    utterances: &[Utterance],
    lexicon: &Lexicon,
) -> Result<Vec<(String, Vec<usize>, Vec<String>)>> {
    utterances
        .par_iter()
        .map(|u| {
            let lattice = model.forward(&u.features.view(), &u.id)?;
            let tokens = greedy_decode(&lattice);
            let words = lexicon.segment_tokens(&tokens);
            Ok((u.id.clone(), tokens, words))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneRanges {
    pub lm_weight: (f64, f64),
    pub word_score: (f64, f64),
}

impl Default for TuneRanges {
    fn default() -> Self {
        TuneRanges {
            lm_weight: (0.0, 4.0),
            word_score: (-3.0, 3.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TuneRow {
    pub lm_weight: f64,
    pub word_score: f64,
    pub dev_wer: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub params: DecodeParams,
    pub table: Vec<TuneRow>,
}

/// Random search over `(lm_weight, word_score)`: samples `budget` pairs
/// uniformly, decodes the dev set with each, returns the pair with the lowest
/// dev WER (ties: smaller lm_weight, then smaller word_score).
pub fn tune_decode_params(
    model: &AcousticModel,
    lm: &NGramLM,
    lexicon: &Lexicon,
    dev: &[Utterance],
    base: &DecodeParams,
    budget: usize,
    ranges: &TuneRanges,
    seed: u64,
) -> Result<TuneOutcome> {
    assert!(budget >= 1, "tuning budget must be >= 1");
    assert!(!dev.is_empty(), "dev set must be non-empty");
    let mut rng = crate::corpus::stage_rng(seed, "tune-decode");
    let pairs: Vec<(f64, f64)> = (0..budget)
        .map(|_| {
            (
                rng.gen_range(ranges.lm_weight.0..=ranges.lm_weight.1),
                rng.gen_range(ranges.word_score.0..=ranges.word_score.1),
            )
        })
        .collect();

    let mut table = Vec::with_capacity(budget);
    for &(lm_weight, word_score) in &pairs {
        let params = DecodeParams {
            lm_weight,
            word_score,
            ..*base
        };
        let outcomes = decode_batch(model, dev, lexicon, lm, &params, None)?;
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
        table.push(TuneRow {
            lm_weight,
            word_score,
            dev_wer: agg.wer,
        });
    }
    let best = table
        .iter()
        .cloned()
        .min_by(|a, b| {
            a.dev_wer
                .partial_cmp(&b.dev_wer)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.lm_weight.partial_cmp(&b.lm_weight).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.word_score.partial_cmp(&b.word_score).unwrap_or(std::cmp::Ordering::Equal))
        })
        .expect("budget >= 1");
    Ok(TuneOutcome {
        params: DecodeParams {
            lm_weight: best.lm_weight,
            word_score: best.word_score,
            ..*base
        },
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::stage_rng;
    use ndarray::Array2;

    fn lattice(rows: Vec<Vec<f64>>) -> EmissionLattice {
        let t = rows.len();
        let k = rows[0].len();
        let mut m = Array2::from_shape_vec((t, k), rows.into_iter().flatten().collect()).unwrap();
        for mut row in m.rows_mut() {
            let lse: f64 = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        EmissionLattice {
            log_probs: m,
            utterance_id: "t".into(),
        }
    }

    fn random_lattice(frames: usize, labels: usize, seed: u64) -> EmissionLattice {
        let mut rng = stage_rng(seed, "dec-test");
        lattice(
            (0..frames)
                .map(|_| (0..labels).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect(),
        )
    }

    fn flat_lm(words: &[&str]) -> NGramLM {
        NGramLM::uniform(words.iter().map(|s| s.to_string()).collect())
    }

    // Tokens: a=1, b=2, c=3.
    fn simple_lexicon(words: &[&str]) -> Lexicon {
        let alphabet = vec!['a', 'b', 'c'];
        let pairs = words
            .iter()
            .map(|w| {
                let spelling = w
                    .chars()
                    .map(|c| alphabet.iter().position(|&a| a == c).unwrap() + 1)
                    .collect();
                (w.to_string(), spelling)
            })
            .collect();
        Lexicon::from_pairs(pairs, alphabet)
    }

    #[test]
    fn trie_reproduces_entries() {
        let lex = simple_lexicon(&["ab", "a", "abc", "ba", "cab"]);
        assert!(lex.check_paths());
        assert_eq!(lex.spelling("abc"), Some(&[1usize, 2, 3][..]));
        assert_eq!(lex.tokens_for(&["ba".into(), "a".into()]), Some(vec![2, 1, 1]));
        assert_eq!(lex.tokens_for(&["zz".into()]), None);
    }

    #[test]
    fn single_word_lexicon_decodes_it() {
        let lex = simple_lexicon(&["ab"]);
        let lm = flat_lm(&["ab"]);
        // Frames strongly favor a, a, b, with a blank in the middle.
        let lat = lattice(vec![
            vec![0.0, 8.0, 0.0, 0.0],
            vec![8.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 8.0, 0.0],
        ]);
        let beam = beam_search(&lat, &lex, &lm, &DecodeParams::default());
        assert_eq!(beam[0].words, vec!["ab".to_string()]);
    }

    #[test]
    fn empty_when_no_word_completes() {
        let lex = simple_lexicon(&["abc"]);
        let lm = flat_lm(&["abc"]);
        // Two frames cannot complete a three-token word.
        let lat = random_lattice(2, 4, 3);
        assert!(beam_search(&lat, &lex, &lm, &DecodeParams::default()).is_empty());
    }

    /// Brute-force oracle: enumerate every path through the lattice, group by
    /// collapsed token sequence, then score every lexicon-valid word sequence
    /// by the decode objective. Fully independent of the beam search.
    fn oracle_best(
        lat: &EmissionLattice,
        lex: &Lexicon,
        lm: &NGramLM,
        params: &DecodeParams,
    ) -> Option<(Vec<String>, f64)> {
        let frames = lat.frames();
        let labels = lat.n_labels();
        let mut by_seq: HashMap<Vec<usize>, f64> = HashMap::new();
        for code in 0..labels.pow(frames as u32) {
            let mut c = code;
            let mut lp = 0.0;
            let mut collapsed = Vec::new();
            let mut prev = None;
            for t in 0..frames {
                let l = c % labels;
                c /= labels;
                lp += lat.log_probs[(t, l)];
                if prev != Some(l) && l != 0 {
                    collapsed.push(l);
                }
                prev = Some(l);
            }
            let e = by_seq.entry(collapsed).or_insert(f64::NEG_INFINITY);
            *e = log_add(*e, lp);
        }
        // Enumerate word sequences whose token length fits in `frames`.
        let mut best: Option<(Vec<String>, f64)> = None;
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            if !seq.is_empty() {
                let words: Vec<String> =
                    seq.iter().map(|&i| lex.word(i).to_string()).collect();
                let tokens = lex.tokens_for(&words).unwrap();
                if let Some(&am) = by_seq.get(&tokens) {
                    if am > f64::NEG_INFINITY {
                        let total = am
                            + params.lm_weight * LN_10 * lm.score(&words, false)
                            + params.word_score * words.len() as f64;
                        let better = match &best {
                            None => true,
                            Some((bw, bt)) => {
                                total > *bt || (total == *bt && words < *bw)
                            }
                        };
                        if better {
                            best = Some((words, total));
                        }
                    }
                }
            }
            let used: usize = seq
                .iter()
                .map(|&i| lex.spellings[i].len())
                .sum();
            for i in 0..lex.len() {
                if used + lex.spellings[i].len() <= frames {
                    let mut s = seq.clone();
                    s.push(i);
                    stack.push(s);
                }
            }
        }
        best
    }

    fn exhaustive_params(lm_weight: f64, word_score: f64) -> DecodeParams {
        DecodeParams {
            lm_weight,
            word_score,
            beam_size: 100_000,
            beam_threshold: 1e9,
        }
    }

    #[test]
    fn beam_at_exhaustive_width_matches_oracle() {
        let lex = simple_lexicon(&["ab", "a", "b", "ba"]);
        let lm = flat_lm(&["ab", "a", "b", "ba"]);
        for seed in 0..25u64 {
            let lat = random_lattice(4, 3, 100 + seed);
            for (alpha, beta) in [(0.0, 0.0), (1.3, -0.4)] {
                let params = exhaustive_params(alpha, beta);
                let beam = beam_search(&lat, &lex, &lm, &params);
                let oracle = oracle_best(&lat, &lex, &lm, &params);
                match oracle {
                    None => assert!(beam.is_empty(), "seed {seed}"),
                    Some((words, total)) => {
                        assert_eq!(beam[0].words, words, "seed {seed} alpha {alpha}");
                        assert!(
                            (beam[0].total - total).abs() < 1e-9,
                            "seed {seed}: beam {} oracle {total}",
                            beam[0].total
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn beam_top_score_recomputable_from_scratch() {
        let lex = simple_lexicon(&["ab", "a", "b"]);
        let lm = flat_lm(&["ab", "a", "b"]);
        for seed in 0..10u64 {
            let lat = random_lattice(4, 3, 300 + seed);
            let params = exhaustive_params(1.1, 0.3);
            let beam = beam_search(&lat, &lex, &lm, &params);
            for h in &beam {
                let direct = score_word_sequence(&lat, &lex, &lm, &params, &h.words).unwrap();
                assert!(
                    (h.total - direct).abs() < 1e-6,
                    "{:?}: beam {} direct {}",
                    h.words,
                    h.total,
                    direct
                );
            }
        }
    }

    #[test]
    fn enlarging_beam_never_hurts_top_score() {
        let lex = simple_lexicon(&["ab", "a", "b", "ba", "c"]);
        let lm = flat_lm(&["ab", "a", "b", "ba", "c"]);
        for seed in 0..10u64 {
            let lat = random_lattice(5, 4, 700 + seed);
            let mut prev = f64::NEG_INFINITY;
            for size in [1usize, 2, 4, 8, 16, 64, 100_000] {
                let params = DecodeParams {
                    lm_weight: 0.8,
                    word_score: -0.2,
                    beam_size: size,
                    beam_threshold: 1e9,
                };
                let beam = beam_search(&lat, &lex, &lm, &params);
                if let Some(top) = beam.first() {
                    assert!(
                        top.total >= prev - 1e-12,
                        "seed {seed} size {size}: {} < {prev}",
                        top.total
                    );
                    prev = top.total;
                }
            }
        }
    }

    #[test]
    fn merging_is_only_an_optimization() {
        let lex = simple_lexicon(&["ab", "a", "b"]);
        let lm = flat_lm(&["ab", "a", "b"]);
        for seed in 0..10u64 {
            let lat = random_lattice(4, 3, 900 + seed);
            let params = exhaustive_params(0.9, 0.1);
            let merged = beam_search_impl(&lat, &lex, &lm, &params, true);
            let unmerged = beam_search_impl(&lat, &lex, &lm, &params, false);
            match (merged.first(), unmerged.first()) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    assert_eq!(a.words, b.words, "seed {seed}");
                    assert!((a.total - b.total).abs() < 1e-9);
                }
                other => panic!("seed {seed}: merge mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn rescore_identity_and_singleton() {
        let lex = simple_lexicon(&["ab", "a", "b"]);
        let lm = flat_lm(&["ab", "a", "b"]);
        let lat = random_lattice(4, 3, 55);
        let params = exhaustive_params(1.2, 0.5);
        let beam = beam_search(&lat, &lex, &lm, &params);
        assert!(!beam.is_empty());
        // Same LM and weights: returns the beam head.
        let top = rescore_beam(&beam, &lm, params.lm_weight, params.word_score).unwrap();
        assert_eq!(top.words, beam[0].words);
        assert!((top.total - beam[0].total).abs() < 1e-9);
        // Singleton beam returns its only element.
        let single = rescore_beam(&beam[..1], &lm, 3.0, -1.0).unwrap();
        assert_eq!(single.words, beam[0].words);
        // Empty beam errors.
        assert!(matches!(rescore_beam(&[], &lm, 1.0, 0.0), Err(Error::EmptyBeam)));
    }

    #[test]
    fn rescore_hand_computed_fixture() {
        // Three hypotheses with hand-recomputed totals under (alpha2, beta2).
        let beam = vec![
            BeamHypothesis {
                words: vec!["a".into()],
                am_score: -1.0,
                lm_score: -0.5,
                word_count: 1,
                total: 0.0,
            },
            BeamHypothesis {
                words: vec!["ab".into()],
                am_score: -1.4,
                lm_score: -0.2,
                word_count: 1,
                total: 0.0,
            },
            BeamHypothesis {
                words: vec!["a".into(), "b".into()],
                am_score: -2.0,
                lm_score: -0.3,
                word_count: 2,
                total: 0.0,
            },
        ];
        // LM scoring each sequence at fixed log10 values: uniform over 2
        // words -> alphabet 4, each word -1/log10(4)... use hand LM instead.
        let lm2 = NGramLM::from_entries(
            1,
            vec!["a".into(), "ab".into(), "b".into()],
            vec![
                (vec!["a".into()], -0.30, None),
                (vec!["ab".into()], -0.70, None),
                (vec!["b".into()], -0.40, None),
            ],
        )
        .unwrap();
        let (a2, b2) = (2.0, 0.5);
        // totals: am + a2*ln10*lm + b2*count
        // h0: -1.0 + 2*ln10*(-0.30) + 0.5 = -1.881551...
        // h1: -1.4 + 2*ln10*(-0.70) + 0.5 = -4.123952...
        // h2: -2.0 + 2*ln10*(-0.70) + 1.0 = -4.223952...
        let got = rescore_beam(&beam, &lm2, a2, b2).unwrap();
        assert_eq!(got.words, vec!["a".to_string()]);
        let expect = -1.0 + a2 * LN_10 * (-0.30) + b2;
        assert!((got.total - expect).abs() < 1e-12);
    }

    #[test]
    fn segmentation_prefers_coverage_then_fewer_words() {
        let lex = simple_lexicon(&["ab", "a", "b", "cab"]);
        // "abab" -> [ab, ab], not [a, b, a, b].
        assert_eq!(
            lex.segment_tokens(&[1, 2, 1, 2]),
            vec!["ab".to_string(), "ab".to_string()]
        );
        // "cabab" -> [cab, ab].
        assert_eq!(
            lex.segment_tokens(&[3, 1, 2, 1, 2]),
            vec!["cab".to_string(), "ab".to_string()]
        );
        // Coverage dominates: skipping one c and matching "cab" beats
        // skipping both and matching "ab".
        assert_eq!(
            lex.segment_tokens(&[3, 3, 1, 2]),
            vec!["c".to_string(), "cab".to_string()]
        );
        // Unmatched run renders as one pseudo-word.
        assert_eq!(
            lex.segment_tokens(&[3, 3, 2, 1]),
            vec!["cc".to_string(), "b".to_string(), "a".to_string()]
        );
        assert_eq!(lex.segment_tokens(&[]), Vec::<String>::new());
    }
}
