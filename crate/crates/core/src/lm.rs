//! Back-off n-gram language models with interpolated Kneser-Ney smoothing,
//! perplexity, and ARPA-format persistence.
//!
//! Count conventions (shared by the test oracle):
//! - Sentences are padded with a single leading `<s>` and a trailing `</s>`.
//!   Raw counts at order `o` are all length-`o` windows not ending in `<s>`;
//!   sentence-initial words are thus predicted from the `[<s>]` context, as
//!   in the usual ARPA layout.
//! - The highest order that has any counts keeps raw counts (orders above the
//!   longest padded sentence stay empty and simply back off). Lower orders
//!   use continuation counts `N1+(. g)` (distinct left types, `<s>` included)
//!   computed from raw counts one order up, except grams starting with `<s>`,
//!   which cannot be left-extended and keep their raw counts.
//! - One discount per order, `D = c1 / (c1 + 2 c2)` over that order's
//!   count-of-counts, falling back to `0.5` when the histogram degenerates
//!   (`c2 = 0`, or `c1 = 0` which would zero the smoothing mass).
//! - Seen grams store the full interpolated probability; the back-off weight
//!   of a context is its interpolation mass, so ARPA-style back-off scoring
//!   reproduces the interpolated model exactly and every context normalizes
//!   to 1 over the prediction alphabet (vocabulary + `<unk>` + `</s>`).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TextCorpus;
use crate::error::{Error, Result};

pub const UNK: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const FIRST_WORD_ID: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramEntry {
    pub log10_prob: f64,
    pub backoff_log10: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    order: usize,
    /// Sorted vocabulary (without the special tokens).
    words: Vec<String>,
    ids: HashMap<String, u32>,
    /// `grams[o-1]` maps id sequences of length `o` to entries.
    grams: Vec<BTreeMap<Vec<u32>, GramEntry>>,
    smoothing: String,
}

/// Incremental scoring state: the last `order - 1` word ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmState(Vec<u32>);

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn smoothing(&self) -> &str {
        &self.smoothing
    }

    /// Size of the prediction alphabet: vocabulary plus `<unk>` and `</s>`.
    pub fn alphabet_size(&self) -> usize {
        self.words.len() + 2
    }

    fn word_id(&self, w: &str) -> u32 {
        *self.ids.get(w).unwrap_or(&UNK)
    }

    fn id_token(&self, id: u32) -> &str {
        match id {
            UNK => "<unk>",
            BOS => "<s>",
            EOS => "</s>",
            _ => &self.words[(id - FIRST_WORD_ID) as usize],
        }
    }

    /// Events a context's conditional distribution ranges over.
    fn alphabet_ids(&self) -> impl Iterator<Item = u32> + '_ {
        [UNK, EOS]
            .into_iter()
            .chain((0..self.words.len() as u32).map(|i| i + FIRST_WORD_ID))
    }

    pub fn initial_state(&self) -> LmState {
        if self.order == 1 {
            LmState(Vec::new())
        } else {
            LmState(vec![BOS])
        }
    }

    /// Conditional log10 probability with standard longest-match back-off.
    fn cond_log10(&self, context: &[u32], word: u32) -> f64 {
        let max_ctx = context.len().min(self.order - 1);
        let mut ctx = &context[context.len() - max_ctx..];
        let mut backoff = 0.0;
        loop {
            let mut key = Vec::with_capacity(ctx.len() + 1);
            key.extend_from_slice(ctx);
            key.push(word);
            if let Some(entry) = self.grams.get(ctx.len()).and_then(|m| m.get(&key)) {
                return backoff + entry.log10_prob;
            }
            if ctx.is_empty() {
                // Unigram table covers the whole alphabet, so this only
                // triggers for hand-built models with gaps; treat as floor.
                return backoff - 99.0;
            }
            if let Some(entry) = self.grams[ctx.len() - 1].get(ctx) {
                backoff += entry.backoff_log10.unwrap_or(0.0);
            }
            ctx = &ctx[1..];
        }
    }

    /// Advances the scoring state by one word, returning the log10 increment.
    pub fn advance(&self, state: &LmState, word: &str) -> (LmState, f64) {
        let id = self.word_id(word);
        let inc = self.cond_log10(&state.0, id);
        let mut ctx = state.0.clone();
        ctx.push(id);
        let keep = self.order.saturating_sub(1);
        if ctx.len() > keep {
            ctx.drain(0..ctx.len() - keep);
        }
        (LmState(ctx), inc)
    }

    /// Log10 increment for terminating the sentence at `state`.
    pub fn end_increment(&self, state: &LmState) -> f64 {
        self.cond_log10(&state.0, EOS)
    }

    /// Total log10 probability of a word sequence, starting from `<s>`
    /// context, optionally terminated with `</s>`.
    pub fn score(&self, words: &[String], with_eos: bool) -> f64 {
        let mut state = self.initial_state();
        let mut total = 0.0;
        for w in words {
            let (next, inc) = self.advance(&state, w);
            total += inc;
            state = next;
        }
        if with_eos {
            total += self.end_increment(&state);
        }
        total
    }

    /// Direct constructor for hand-built fixtures and tests.
    pub fn from_entries(
        order: usize,
        words: Vec<String>,
        entries: Vec<(Vec<String>, f64, Option<f64>)>,
    ) -> Result<Self> {
        let mut lm = NGramLM {
            order,
            words: words.clone(),
            ids: id_map(&words),
            grams: vec![BTreeMap::new(); order],
            smoothing: "hand-built".into(),
        };
        for (gram, log10_prob, backoff_log10) in entries {
            let key: Vec<u32> = gram
                .iter()
                .map(|w| match w.as_str() {
                    "<unk>" => UNK,
                    "<s>" => BOS,
                    "</s>" => EOS,
                    _ => lm.word_id(w),
                })
                .collect();
            if key.is_empty() || key.len() > order {
                return Err(Error::InvalidConfig {
                    key: "lm.entries".into(),
                    message: format!("gram {gram:?} has invalid length for order {order}"),
                });
            }
            lm.grams[key.len() - 1].insert(
                key,
                GramEntry {
                    log10_prob,
                    backoff_log10,
                },
            );
        }
        Ok(lm)
    }

    /// Uniform unigram model: every event in the prediction alphabet
    /// (vocabulary + `<unk>` + `</s>`) gets probability `1 / alphabet_size`,
    /// so perplexity of any in-vocabulary text is exactly the alphabet size.
    pub fn uniform(words: Vec<String>) -> Self {
        let mut lm = NGramLM {
            order: 1,
            ids: id_map(&words),
            words,
            grams: vec![BTreeMap::new()],
            smoothing: "uniform".into(),
        };
        let logp = -((lm.alphabet_size() as f64).log10());
        let ids: Vec<u32> = lm.alphabet_ids().collect();
        for id in ids {
            lm.grams[0].insert(
                vec![id],
                GramEntry {
                    log10_prob: logp,
                    backoff_log10: None,
                },
            );
        }
        lm
    }
}

fn id_map(words: &[String]) -> HashMap<String, u32> {
    words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.clone(), i as u32 + FIRST_WORD_ID))
        .collect()
}

/// Trains an interpolated Kneser-Ney model of the given order. The vocabulary
/// keeps the `vocab_cap` most frequent words (ties break lexicographically);
/// everything else maps to `<unk>`. No pruning.
pub fn train_ngram(corpus: &TextCorpus, order: usize, vocab_cap: usize) -> Result<NGramLM> {
    if order == 0 {
        return Err(Error::InvalidConfig {
            key: "lm.order".into(),
            message: "order must be >= 1".into(),
        });
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    // Frequency-capped vocabulary.
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in corpus.sentences() {
        for w in sentence {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut by_freq: Vec<(&str, usize)> = freq.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    by_freq.truncate(vocab_cap);
    let mut words: Vec<String> = by_freq.into_iter().map(|(w, _)| w.to_string()).collect();
    words.sort();
    let ids = id_map(&words);

    let mapped: Vec<Vec<u32>> = corpus
        .sentences()
        .map(|s| s.iter().map(|w| *ids.get(w.as_str()).unwrap_or(&UNK)).collect())
        .collect();

    // Raw counts per order: single <s> pad, windows never end in <s>.
    let mut raw: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for sentence in &mapped {
        let mut padded = Vec::with_capacity(sentence.len() + 2);
        padded.push(BOS);
        padded.extend_from_slice(sentence);
        padded.push(EOS);
        for o in 1..=order.min(padded.len()) {
            for window in padded.windows(o) {
                if window[o - 1] == BOS {
                    continue;
                }
                *raw[o - 1].entry(window.to_vec()).or_default() += 1;
            }
        }
    }

    // Adjusted counts: raw at the highest populated order, continuation counts
    // below (raw for <s>-initial grams, which have no left extensions).
    let mut adjusted: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    let mut top_seen = false;
    for o in (1..=order).rev() {
        if !top_seen {
            if raw[o - 1].is_empty() {
                continue;
            }
            adjusted[o - 1] = raw[o - 1].clone();
            top_seen = true;
            continue;
        }
        let mut cont: HashMap<Vec<u32>, u64> = HashMap::new();
        for gram in raw[o].keys() {
            *cont.entry(gram[1..].to_vec()).or_default() += 1;
        }
        let mut table = HashMap::new();
        for (gram, &raw_count) in &raw[o - 1] {
            let count = if gram[0] == BOS {
                raw_count
            } else {
                cont.get(gram).copied().unwrap_or(0)
            };
            if count > 0 {
                table.insert(gram.clone(), count);
            }
        }
        adjusted[o - 1] = table;
    }

    // One discount per order from that order's count-of-counts.
    let discounts: Vec<f64> = adjusted
        .iter()
        .map(|table| {
            let c1 = table.values().filter(|&&c| c == 1).count() as f64;
            let c2 = table.values().filter(|&&c| c == 2).count() as f64;
            if c1 == 0.0 || c2 == 0.0 {
                0.5
            } else {
                c1 / (c1 + 2.0 * c2)
            }
        })
        .collect();

    let mut lm = NGramLM {
        order,
        words,
        ids,
        grams: vec![BTreeMap::new(); order],
        smoothing: format!(
            "interpolated-kneser-ney d=[{}]",
            discounts
                .iter()
                .map(|d| format!("{d:.6}"))
                .collect::<Vec<_>>()
                .join(",")
        ),
    };

    // Unigrams: interpolate with the uniform distribution over the alphabet.
    let alphabet: Vec<u32> = lm.alphabet_ids().collect();
    let d1 = discounts[0];
    let c1_total: u64 = adjusted[0]
        .iter()
        .filter(|(g, _)| g[0] != BOS)
        .map(|(_, &c)| c)
        .sum();
    let t1 = adjusted[0].iter().filter(|(g, _)| g[0] != BOS).count() as f64;
    let uniform = 1.0 / alphabet.len() as f64;
    let mut unigram_probs: HashMap<u32, f64> = HashMap::new();
    for &a in &alphabet {
        let count = adjusted[0].get(&vec![a]).copied().unwrap_or(0) as f64;
        let p = ((count - d1).max(0.0) + d1 * t1 * uniform) / c1_total as f64;
        unigram_probs.insert(a, p);
        lm.grams[0].insert(
            vec![a],
            GramEntry {
                log10_prob: p.log10(),
                backoff_log10: None,
            },
        );
    }
    // <s> is context-only: sentinel probability, back-off weight filled below.
    lm.grams[0].insert(
        vec![BOS],
        GramEntry {
            log10_prob: -99.0,
            backoff_log10: None,
        },
    );

    // Higher orders, bottom up, so each order can read the one below.
    let mut lower: HashMap<Vec<u32>, f64> = unigram_probs
        .iter()
        .map(|(&a, &p)| (vec![a], p))
        .collect();
    for o in 2..=order {
        let d = discounts[o - 1];
        let table = &adjusted[o - 1];
        let mut ctx_total: HashMap<&[u32], u64> = HashMap::new();
        let mut ctx_types: HashMap<&[u32], u64> = HashMap::new();
        for (gram, &count) in table {
            let ctx = &gram[..o - 1];
            *ctx_total.entry(ctx).or_default() += count;
            *ctx_types.entry(ctx).or_default() += 1;
        }
        let mut this_level: HashMap<Vec<u32>, f64> = HashMap::new();
        for (gram, &count) in table {
            let ctx = &gram[..o - 1];
            let total = ctx_total[ctx] as f64;
            let types = ctx_types[ctx] as f64;
            let lambda = d * types / total;
            // Every suffix of a seen gram is itself a seen lower-order gram:
            // <s>-initial suffixes keep raw counts, all others have at least
            // one left extension (this gram's first token).
            let p_lower = *lower
                .get(&gram[1..].to_vec())
                .expect("suffix of a seen gram is seen one order down");
            let p = ((count as f64 - d).max(0.0)) / total + lambda * p_lower;
            this_level.insert(gram.clone(), p);
            lm.grams[o - 1].insert(
                gram.clone(),
                GramEntry {
                    log10_prob: p.log10(),
                    backoff_log10: None,
                },
            );
        }
        // Back-off weight of each context: its interpolation mass.
        for (ctx, &total) in &ctx_total {
            let lambda = d * ctx_types[ctx] as f64 / total as f64;
            let entry = lm.grams[o - 2]
                .get_mut(&ctx.to_vec())
                .expect("every context occurs as a lower-order gram");
            entry.backoff_log10 = Some(lambda.log10());
        }
        lower = this_level;
    }

    Ok(lm)
}

/// Perplexity `10^(-(sum log10 p) / N)` with `N` counting every scored token
/// including the sentence-final `</s>`.
pub fn perplexity(lm: &NGramLM, text: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for sentence in text {
        total += lm.score(sentence, true);
        n += sentence.len() + 1;
    }
    10f64.powf(-total / n as f64)
}

// ---------------------------------------------------------------------------
// ARPA serialization
// ---------------------------------------------------------------------------

pub fn write_arpa(lm: &NGramLM, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("\\data\\\n");
    for o in 1..=lm.order {
        writeln!(out, "ngram {}={}", o, lm.grams[o - 1].len()).unwrap();
    }
    for o in 1..=lm.order {
        writeln!(out, "\n\\{o}-grams:").unwrap();
        for (gram, entry) in &lm.grams[o - 1] {
            let tokens: Vec<&str> = gram.iter().map(|&id| lm.id_token(id)).collect();
            match entry.backoff_log10 {
                Some(b) => writeln!(
                    out,
                    "{:.6}\t{}\t{:.6}",
                    entry.log10_prob,
                    tokens.join(" "),
                    b
                )
                .unwrap(),
                None => writeln!(out, "{:.6}\t{}", entry.log10_prob, tokens.join(" ")).unwrap(),
            }
        }
    }
    out.push_str("\n\\end\\\n");
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_arpa(path: &Path) -> Result<NGramLM> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw.lines().enumerate().peekable();

    // Header.
    let mut declared: Vec<usize> = Vec::new();
    for (no, line) in lines.by_ref() {
        let line = line.trim();
        if line.is_empty() {
            if declared.is_empty() {
                continue;
            }
            break;
        }
        if line == "\\data\\" {
            continue;
        }
        if let Some(rest) = line.strip_prefix("ngram ") {
            let (o, count) = rest.split_once('=').ok_or(Error::ArpaFormat {
                line: no + 1,
                message: format!("bad ngram declaration `{line}`"),
            })?;
            let o: usize = o.trim().parse().map_err(|_| Error::ArpaFormat {
                line: no + 1,
                message: format!("bad order in `{line}`"),
            })?;
            let count: usize = count.trim().parse().map_err(|_| Error::ArpaFormat {
                line: no + 1,
                message: format!("bad count in `{line}`"),
            })?;
            if o != declared.len() + 1 {
                return Err(Error::ArpaFormat {
                    line: no + 1,
                    message: format!("orders must be declared consecutively, got {o}"),
                });
            }
            declared.push(count);
        } else {
            return Err(Error::ArpaFormat {
                line: no + 1,
                message: format!("expected \\data\\ header or ngram line, got `{line}`"),
            });
        }
    }
    if declared.is_empty() {
        return Err(Error::ArpaFormat {
            line: 1,
            message: "missing \\data\\ section".into(),
        });
    }
    let order = declared.len();

    // Sections: collect raw string grams first to assign ids afterwards.
    let mut sections: Vec<Vec<(Vec<String>, f64, Option<f64>)>> = vec![Vec::new(); order];
    let mut current: Option<usize> = None;
    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "\\end\\" {
            current = None;
            continue;
        }
        if let Some(rest) = line.strip_prefix('\\') {
            let o: usize = rest
                .strip_suffix("-grams:")
                .and_then(|s| s.parse().ok())
                .ok_or(Error::ArpaFormat {
                    line: no + 1,
                    message: format!("malformed section header `{line}`"),
                })?;
            if o == 0 || o > order {
                return Err(Error::ArpaFormat {
                    line: no + 1,
                    message: format!("section order {o} out of declared range"),
                });
            }
            current = Some(o);
            continue;
        }
        let o = current.ok_or(Error::ArpaFormat {
            line: no + 1,
            message: "gram line outside any section".into(),
        })?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 3 {
            return Err(Error::ArpaFormat {
                line: no + 1,
                message: format!("expected 2 or 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let logp: f64 = fields[0].parse().map_err(|_| Error::ArpaFormat {
            line: no + 1,
            message: format!("bad log probability `{}`", fields[0]),
        })?;
        let tokens: Vec<String> = fields[1].split(' ').map(str::to_string).collect();
        if tokens.len() != o {
            return Err(Error::ArpaFormat {
                line: no + 1,
                message: format!("{o}-gram line has {} tokens", tokens.len()),
            });
        }
        let backoff = match fields.get(2) {
            Some(b) => Some(b.parse::<f64>().map_err(|_| Error::ArpaFormat {
                line: no + 1,
                message: format!("bad backoff `{b}`"),
            })?),
            None => None,
        };
        sections[o - 1].push((tokens, logp, backoff));
    }

    for (o, (section, &want)) in sections.iter().zip(declared.iter()).enumerate() {
        if section.len() != want {
            return Err(Error::ArpaCountMismatch {
                order: o + 1,
                declared: want,
                found: section.len(),
            });
        }
    }

    let mut words: Vec<String> = sections[0]
        .iter()
        .map(|(tokens, _, _)| tokens[0].clone())
        .filter(|w| w != "<unk>" && w != "<s>" && w != "</s>")
        .collect();
    words.sort();
    words.dedup();

    let entries: Vec<(Vec<String>, f64, Option<f64>)> =
        sections.into_iter().flatten().collect();
    let mut lm = NGramLM::from_entries(order, words, entries)?;
    lm.smoothing = "arpa".into();
    Ok(lm)
}
