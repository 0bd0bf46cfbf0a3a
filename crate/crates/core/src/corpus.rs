//! Synthetic task generation, text normalization, and corpus filtering.
//!
//! The synthetic "audio" task works in feature space directly: every
//! character of the vocabulary gets a fixed prototype vector in `R^D`, an
//! utterance's feature matrix is the concatenation of its characters'
//! prototypes (each repeated a random number of frames) plus i.i.d. Gaussian
//! noise. Transcripts are sampled from a seeded word-bigram chain so that
//! n-gram language models trained on text from the same chain carry real
//! signal about likely word sequences.
//!
//! Everything here is a deterministic function of `(config, seed)`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::HiddenRefs;

pub const FEATURE_MAGIC: &[u8; 5] = b"FMAT1";

/// Derives an independent RNG for a named generation stage. Stage tags keep
/// the draws of one stage stable when another stage's draw count changes.
pub(crate) fn stage_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derives a named sub-seed from a master seed.
pub(crate) fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[0..8].try_into().unwrap())
}

/// Word list plus the derived character-token alphabet.
///
/// Token index 0 is reserved for the CTC blank; character tokens occupy
/// indices `1..=tokens.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    tokens: Vec<char>,
}

impl Vocabulary {
    /// Builds a vocabulary from unique lowercase a-z words. The token list is
    /// the sorted set of distinct characters across all words.
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for w in &words {
            if w.is_empty() || !w.chars().all(|c| c.is_ascii_lowercase()) {
                return Err(Error::InvalidConfig {
                    key: "vocabulary.words".into(),
                    message: format!("word `{w}` is not non-empty lowercase a-z"),
                });
            }
            if !seen.insert(w.clone()) {
                return Err(Error::InvalidConfig {
                    key: "vocabulary.words".into(),
                    message: format!("duplicate word `{w}`"),
                });
            }
        }
        let tokens: BTreeSet<char> = words.iter().flat_map(|w| w.chars()).collect();
        Ok(Vocabulary {
            words,
            tokens: tokens.into_iter().collect(),
        })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokens(&self) -> &[char] {
        &self.tokens
    }

    /// Number of output labels the acoustic model needs: blank + tokens.
    pub fn n_labels(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Token id of a character (blank is 0, characters start at 1).
    pub fn token_id(&self, c: char) -> Option<usize> {
        self.tokens.binary_search(&c).ok().map(|i| i + 1)
    }

    pub fn token_char(&self, id: usize) -> Option<char> {
        if id == 0 {
            None
        } else {
            self.tokens.get(id - 1).copied()
        }
    }

    /// Character-token ids for a word sequence (words concatenated, no
    /// separator token).
    pub fn tokenize_words(&self, words: &[String]) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for w in words {
            for c in w.chars() {
                out.push(self.token_id(c)?);
            }
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

/// One synthetic utterance: a `T x D` feature matrix plus, for every split
/// except `unlabeled`, its reference transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Array2<f32>,
    pub transcript: Option<Vec<String>>,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Utterance>,
    pub unlabeled: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub vocabulary: Vocabulary,
    pub seed: u64,
}

impl Dataset {
    pub fn split(&self, source: Source) -> &[Utterance] {
        match source {
            Source::Labeled => &self.labeled,
            Source::Unlabeled => &self.unlabeled,
            Source::Dev => &self.dev,
            Source::Test => &self.test,
        }
    }
}

/// Output of [`synth_dataset`]: the dataset itself, the evaluation-only side
/// table with the unlabeled split's true transcripts, and the per-character
/// prototypes the features were built from (exposed for test oracles).
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub hidden_refs: HiddenRefs,
    pub prototypes: Array2<f32>,
}

/// Text corpus abstraction: a list of (title, body) documents. At toy scale
/// each document body is a single sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCorpus {
    pub documents: Vec<(String, Vec<String>)>,
    pub word_count: usize,
}

impl TextCorpus {
    pub fn new(documents: Vec<(String, Vec<String>)>) -> Self {
        let word_count = documents.iter().map(|(_, body)| body.len()).sum();
        TextCorpus {
            documents,
            word_count,
        }
    }

    pub fn sentences(&self) -> impl Iterator<Item = &[String]> {
        self.documents.iter().map(|(_, body)| body.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of vocabulary words.
    pub vocab_size: usize,
    /// Feature dimension D.
    pub feature_dim: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev: usize,
    pub test: usize,
    /// Inclusive range of words per utterance.
    pub words_per_utterance: (usize, usize),
    /// Inclusive range of frames per character.
    pub frames_per_char: (usize, usize),
    /// Standard deviation of the i.i.d. Gaussian feature noise.
    pub noise_sigma: f64,
    /// Inclusive range of word lengths used when generating the vocabulary.
    pub word_len: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 30,
            feature_dim: 10,
            labeled: 48,
            unlabeled: 480,
            dev: 96,
            test: 96,
            words_per_utterance: (3, 6),
            frames_per_char: (3, 6),
            noise_sigma: 0.68,
            word_len: (2, 4),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, message: String| {
            Err(Error::InvalidConfig {
                key: format!("synth.{key}"),
                message,
            })
        };
        if self.vocab_size < 2 {
            return fail("vocab_size", format!("must be >= 2, got {}", self.vocab_size));
        }
        if self.feature_dim == 0 {
            return fail("feature_dim", "must be >= 1".into());
        }
        for (key, n) in [
            ("labeled", self.labeled),
            ("unlabeled", self.unlabeled),
            ("dev", self.dev),
            ("test", self.test),
        ] {
            if n == 0 {
                return fail(key, "split must be non-empty".into());
            }
        }
        if self.noise_sigma < 0.0 {
            return fail("noise_sigma", format!("must be >= 0, got {}", self.noise_sigma));
        }
        for (key, (lo, hi)) in [
            ("words_per_utterance", self.words_per_utterance),
            ("frames_per_char", self.frames_per_char),
            ("word_len", self.word_len),
        ] {
            if lo == 0 || lo > hi {
                return fail(key, format!("invalid range ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// Seeded word-bigram chain used to sample transcripts and in-domain text.
/// Every word gets a handful of preferred successors so n-gram models trained
/// on chain output have something to learn.
#[derive(Debug, Clone)]
pub(crate) struct WordChain {
    start: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

impl WordChain {
    fn build(n_words: usize, rng: &mut ChaCha8Rng) -> Self {
        // Zipf-ish start distribution over the (sorted) vocabulary.
        let mut start: Vec<f64> = (0..n_words).map(|i| 1.0 / (i as f64 + 1.5)).collect();
        normalize(&mut start);

        let mut transitions = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            let mut row = vec![0.1 / n_words as f64; n_words];
            let n_pref = 3.min(n_words);
            let mut picked = Vec::new();
            while picked.len() < n_pref {
                let j = rng.gen_range(0..n_words);
                if !picked.contains(&j) {
                    picked.push(j);
                }
            }
            let pref_mass = [0.5, 0.25, 0.15];
            for (slot, &j) in picked.iter().enumerate() {
                row[j] += pref_mass[slot.min(pref_mass.len() - 1)];
            }
            normalize(&mut row);
            transitions.push(row);
        }
        WordChain { start, transitions }
    }

    fn sample_sentence(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut cur = sample_index(&self.start, rng);
        out.push(cur);
        for _ in 1..len {
            cur = sample_index(&self.transitions[cur], rng);
            out.push(cur);
        }
        out
    }
}

fn normalize(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

#[derive(Debug, Clone)]
pub(crate) struct Language {
    pub vocab: Vocabulary,
    pub chain: WordChain,
    pub prototypes: Array2<f32>,
}

/// Vocabulary, word chain, and character prototypes derived from
/// `(config, seed)`. Words never contain adjacent repeated characters so
/// labeled targets stay CTC-feasible at small frames-per-char settings.
pub(crate) fn build_language(config: &SynthConfig, seed: u64) -> Result<Language> {
    let mut rng = stage_rng(seed, "vocab");
    let mut words = BTreeSet::new();
    let mut attempts = 0usize;
    while words.len() < config.vocab_size {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidConfig {
                key: "synth.vocab_size".into(),
                message: "cannot generate enough distinct words for this word_len range".into(),
            });
        }
        let len = rng.gen_range(config.word_len.0..=config.word_len.1);
        let mut w = String::with_capacity(len);
        let mut prev = None;
        for _ in 0..len {
            let mut c = (b'a' + rng.gen_range(0..26u8)) as char;
            while prev == Some(c) {
                c = (b'a' + rng.gen_range(0..26u8)) as char;
            }
            w.push(c);
            prev = Some(c);
        }
        words.insert(w);
    }
    let vocab = Vocabulary::new(words.into_iter().collect())?;

    let mut chain_rng = stage_rng(seed, "chain");
    let chain = WordChain::build(vocab.words().len(), &mut chain_rng);

    // Prototypes live in a low-dimensional latent space mixed across all
    // channels, so channels are correlated (as in real spectrogram features)
    // and masking a band leaves the character recoverable from the rest.
    let mut proto_rng = stage_rng(seed, "prototypes");
    let n_tokens = vocab.tokens().len();
    let latent_dim = 6.min(config.feature_dim);
    let scale = 1.0 / (latent_dim as f64).sqrt();
    let mixing: Vec<f64> = (0..latent_dim * config.feature_dim)
        .map(|_| gaussian(&mut proto_rng))
        .collect();
    let mut prototypes = Array2::<f32>::zeros((n_tokens, config.feature_dim));
    for mut row in prototypes.rows_mut() {
        let latent: Vec<f64> = (0..latent_dim).map(|_| gaussian(&mut proto_rng)).collect();
        for (d, v) in row.iter_mut().enumerate() {
            let mixed: f64 = latent
                .iter()
                .enumerate()
                .map(|(l, &z)| z * mixing[l * config.feature_dim + d])
                .sum();
            *v = (scale * mixed) as f32;
        }
    }

    Ok(Language {
        vocab,
        chain,
        prototypes,
    })
}

/// Standard-normal draw via Box-Muller; uses exactly two uniforms per call so
/// draw streams stay reproducible.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates the full synthetic dataset: paired, unpaired, dev, and test
/// splits with hidden references for the unpaired split kept in a separate
/// evaluation-only table.
pub fn synth_dataset(config: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    config.validate()?;
    let language = build_language(config, seed)?;

    let mut hidden = BTreeMap::new();
    let labeled = synth_split(config, &language, seed, Source::Labeled, config.labeled, None)?;
    let unlabeled = synth_split(
        config,
        &language,
        seed,
        Source::Unlabeled,
        config.unlabeled,
        Some(&mut hidden),
    )?;
    let dev = synth_split(config, &language, seed, Source::Dev, config.dev, None)?;
    let test = synth_split(config, &language, seed, Source::Test, config.test, None)?;

    Ok(SynthDataset {
        dataset: Dataset {
            labeled,
            unlabeled,
            dev,
            test,
            vocabulary: language.vocab,
            seed,
        },
        hidden_refs: HiddenRefs::new(hidden),
        prototypes: language.prototypes,
    })
}

fn split_prefix(source: Source) -> &'static str {
    match source {
        Source::Labeled => "lab",
        Source::Unlabeled => "unl",
        Source::Dev => "dev",
        Source::Test => "tst",
    }
}

fn synth_split(
    config: &SynthConfig,
    language: &Language,
    seed: u64,
    source: Source,
    count: usize,
    mut hidden: Option<&mut BTreeMap<String, Vec<String>>>,
) -> Result<Vec<Utterance>> {
    let prefix = split_prefix(source);
    let mut rng = stage_rng(seed, &format!("split-{prefix}"));
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{prefix}-{i:04}");
        let len = rng.gen_range(config.words_per_utterance.0..=config.words_per_utterance.1);
        let word_ids = language.chain.sample_sentence(len, &mut rng);
        let words: Vec<String> = word_ids
            .iter()
            .map(|&w| language.vocab.words()[w].clone())
            .collect();
        let features = render_features(config, language, &words, &mut rng);
        let (transcript, hidden_entry) = match source {
            Source::Unlabeled => (None, Some(words)),
            _ => (Some(words), None),
        };
        if let (Some(entry), Some(map)) = (hidden_entry, hidden.as_deref_mut()) {
            map.insert(id.clone(), entry);
        }
        out.push(Utterance {
            id,
            features,
            transcript,
            source,
        });
    }
    Ok(out)
}

fn render_features(
    config: &SynthConfig,
    language: &Language,
    words: &[String],
    rng: &mut ChaCha8Rng,
) -> Array2<f32> {
    let mut rows: Vec<f32> = Vec::new();
    let mut n_frames = 0usize;
    for word in words {
        for c in word.chars() {
            let token = language.vocab.token_id(c).expect("vocab char") - 1;
            let frames = rng.gen_range(config.frames_per_char.0..=config.frames_per_char.1);
            for _ in 0..frames {
                for d in 0..config.feature_dim {
                    let noise = if config.noise_sigma > 0.0 {
                        (config.noise_sigma * gaussian(rng)) as f32
                    } else {
                        0.0
                    };
                    rows.push(language.prototypes[(token, d)] + noise);
                }
                n_frames += 1;
            }
        }
    }
    Array2::from_shape_vec((n_frames, config.feature_dim), rows).expect("row-major build")
}

/// Samples an in-domain text corpus from the same word chain as the dataset
/// identified by `(config, dataset_seed)`. One sentence per document.
pub fn synth_text(
    config: &SynthConfig,
    dataset_seed: u64,
    n_sentences: usize,
    len_range: (usize, usize),
    text_seed: u64,
) -> Result<TextCorpus> {
    config.validate()?;
    let language = build_language(config, dataset_seed)?;
    let mut rng = stage_rng(text_seed, "text");
    let mut documents = Vec::with_capacity(n_sentences);
    for i in 0..n_sentences {
        let len = rng.gen_range(len_range.0..=len_range.1);
        let word_ids = language.chain.sample_sentence(len, &mut rng);
        let words: Vec<String> = word_ids
            .iter()
            .map(|&w| language.vocab.words()[w].clone())
            .collect();
        documents.push((format!("doc-{i:05}"), words));
    }
    Ok(TextCorpus::new(documents))
}

const ABBREVIATIONS: [(&str, &str); 5] = [
    ("mr.", "mister"),
    ("mrs.", "missus"),
    ("dr.", "doctor"),
    ("st.", "saint"),
    ("no.", "number"),
];

/// Normalizes raw text into a word sequence: lowercase, expand the fixed
/// abbreviation table, strip everything outside a-z and space, collapse
/// whitespace. Idempotent.
pub fn normalize_text(raw: &str) -> Vec<String> {
    let lower = raw.to_lowercase();
    let mut out = Vec::new();
    for tok in lower.split_whitespace() {
        let tok = ABBREVIATIONS
            .iter()
            .find(|(abbr, _)| *abbr == tok)
            .map(|(_, exp)| *exp)
            .unwrap_or(tok);
        // Strip non-letters; punctuation splits nothing, it just vanishes.
        let cleaned: String = tok.chars().filter(|c| c.is_ascii_lowercase()).collect();
        if !cleaned.is_empty() {
            out.push(cleaned);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub removed_by_title: usize,
    pub removed_by_text: usize,
}

/// Drops every document whose normalized title is excluded and every document
/// containing an excluded text as a contiguous word subsequence. Surviving
/// documents keep their original order.
pub fn filter_overlap(
    corpus: &TextCorpus,
    excluded_titles: &BTreeSet<String>,
    excluded_texts: &[Vec<String>],
) -> (TextCorpus, FilterReport) {
    let mut report = FilterReport::default();
    let mut survivors = Vec::new();
    for (title, body) in &corpus.documents {
        let norm_title = normalize_text(title).join(" ");
        if excluded_titles.contains(&norm_title) {
            report.removed_by_title += 1;
            continue;
        }
        if excluded_texts
            .iter()
            .any(|needle| contains_subsequence(body, needle))
        {
            report.removed_by_text += 1;
            continue;
        }
        survivors.push((title.clone(), body.clone()));
    }
    (TextCorpus::new(survivors), report)
}

fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() {
        return true;
    }
    if needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

// ---------------------------------------------------------------------------
// Dataset directory layout:
//   meta.json            config echo, seed, split ids, vocabulary words
//   features/<id>.fmat   "FMAT1", T u32 LE, D u32 LE, T*D f32 LE row-major
//   transcripts.tsv      <id>\t<words>  for labeled/dev/test
//   hidden_refs.tsv      <id>\t<words>  evaluation-only
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    config: Option<SynthConfig>,
    seed: u64,
    counts: BTreeMap<String, usize>,
    splits: BTreeMap<String, Vec<String>>,
    vocabulary: Vec<String>,
}

pub fn write_dataset(dataset: &Dataset, hidden: Option<&HiddenRefs>, dir: &Path) -> Result<()> {
    write_dataset_with_config(dataset, hidden, dir, None)
}

pub fn write_dataset_with_config(
    dataset: &Dataset,
    hidden: Option<&HiddenRefs>,
    dir: &Path,
    config: Option<&SynthConfig>,
) -> Result<()> {
    let features_dir = dir.join("features");
    fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;

    let mut splits = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut transcripts = String::new();
    for source in [Source::Labeled, Source::Unlabeled, Source::Dev, Source::Test] {
        let utts = dataset.split(source);
        let prefix = split_prefix(source);
        splits.insert(
            prefix.to_string(),
            utts.iter().map(|u| u.id.clone()).collect::<Vec<_>>(),
        );
        counts.insert(prefix.to_string(), utts.len());
        for u in utts {
            write_features(&features_dir.join(format!("{}.fmat", u.id)), &u.features)?;
            if let Some(words) = &u.transcript {
                transcripts.push_str(&format!("{}\t{}\n", u.id, words.join(" ")));
            }
        }
    }

    let meta = DatasetMeta {
        config: config.cloned(),
        seed: dataset.seed,
        counts,
        splits,
        vocabulary: dataset.vocabulary.words().to_vec(),
    };
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, meta_json).map_err(|e| Error::io(&meta_path, e))?;

    let t_path = dir.join("transcripts.tsv");
    fs::write(&t_path, transcripts).map_err(|e| Error::io(&t_path, e))?;

    if let Some(hidden) = hidden {
        hidden.write_tsv(&dir.join("hidden_refs.tsv"))?;
    }
    Ok(())
}

fn write_features(path: &Path, features: &Array2<f32>) -> Result<()> {
    let (t, d) = features.dim();
    let mut buf = Vec::with_capacity(13 + 4 * t * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Array2<f32>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 13];
    file.read_exact(&mut header)
        .map_err(|_| Error::CorruptHeader {
            path: path.into(),
            message: "file shorter than header".into(),
        })?;
    if &header[0..5] != FEATURE_MAGIC {
        return Err(Error::CorruptHeader {
            path: path.into(),
            message: format!("bad magic {:?}", &header[0..5]),
        });
    }
    let t = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != t * d * 4 {
        return Err(Error::DimensionMismatch {
            path: path.into(),
            message: format!(
                "header says {}x{} ({} bytes), payload has {} bytes",
                t,
                d,
                t * d * 4,
                payload.len()
            ),
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((t, d), values).map_err(|_| Error::DimensionMismatch {
        path: path.into(),
        message: "shape build failed".into(),
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_raw)?;

    let t_path = dir.join("transcripts.tsv");
    let t_raw = fs::read_to_string(&t_path).map_err(|e| Error::io(&t_path, e))?;
    let mut transcripts: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in t_raw.lines().filter(|l| !l.is_empty()) {
        let (id, words) = line.split_once('\t').ok_or_else(|| Error::CorruptHeader {
            path: t_path.clone(),
            message: format!("line without tab: {line}"),
        })?;
        transcripts.insert(
            id.to_string(),
            words.split_whitespace().map(str::to_string).collect(),
        );
    }

    let features_dir = dir.join("features");
    let read_split = |prefix: &str, source: Source| -> Result<Vec<Utterance>> {
        let ids = meta.splits.get(prefix).cloned().unwrap_or_default();
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let features = read_features(&features_dir.join(format!("{id}.fmat")))?;
            let transcript = if source == Source::Unlabeled {
                None
            } else {
                Some(
                    transcripts
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| Error::MissingTranscript { id: id.clone() })?,
                )
            };
            out.push(Utterance {
                id,
                features,
                transcript,
                source,
            });
        }
        Ok(out)
    };

    let labeled = read_split("lab", Source::Labeled)?;
    let unlabeled = read_split("unl", Source::Unlabeled)?;
    let dev = read_split("dev", Source::Dev)?;
    let test = read_split("tst", Source::Test)?;
    Ok(Dataset {
        labeled,
        unlabeled,
        dev,
        test,
        vocabulary: Vocabulary::new(meta.vocabulary)?,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            vocab_size: 6,
            feature_dim: 4,
            labeled: 3,
            unlabeled: 5,
            dev: 2,
            test: 2,
            words_per_utterance: (1, 3),
            frames_per_char: (2, 4),
            noise_sigma: 0.1,
            word_len: (2, 3),
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(&tiny_config(), 7).unwrap();
        let b = synth_dataset(&tiny_config(), 7).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.prototypes, b.prototypes);
        let c = synth_dataset(&tiny_config(), 8).unwrap();
        assert_ne!(a.dataset.labeled[0].features, c.dataset.labeled[0].features);
    }

    #[test]
    fn synth_counts_match_config() {
        let cfg = SynthConfig {
            labeled: 10,
            unlabeled: 100,
            ..tiny_config()
        };
        let out = synth_dataset(&cfg, 3).unwrap();
        assert_eq!(out.dataset.labeled.len(), 10);
        assert_eq!(out.dataset.unlabeled.len(), 100);
        assert_eq!(out.dataset.unlabeled.len() / out.dataset.labeled.len(), 10);
    }

    #[test]
    fn synth_rejects_bad_config() {
        let mut cfg = tiny_config();
        cfg.vocab_size = 1;
        assert!(matches!(
            synth_dataset(&cfg, 0),
            Err(Error::InvalidConfig { .. })
        ));
        let mut cfg = tiny_config();
        cfg.dev = 0;
        assert!(synth_dataset(&cfg, 0).is_err());
        let mut cfg = tiny_config();
        cfg.noise_sigma = -0.5;
        assert!(synth_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn split_ids_are_disjoint_and_transcripts_consistent() {
        let out = synth_dataset(&tiny_config(), 11).unwrap();
        let d = &out.dataset;
        let mut ids = HashSet::new();
        for u in d
            .labeled
            .iter()
            .chain(&d.unlabeled)
            .chain(&d.dev)
            .chain(&d.test)
        {
            assert!(ids.insert(u.id.clone()), "duplicate id {}", u.id);
            assert_eq!(u.transcript.is_none(), u.source == Source::Unlabeled);
            assert!(u.features.iter().all(|v| v.is_finite()));
            assert!(u.features.nrows() >= 1);
        }
    }

    /// At sigma = 0 every frame equals its character's prototype exactly, so a
    /// nearest-prototype matcher over frames must recover the character
    /// sequence. Independent of the generation internals except the prototype
    /// table itself.
    #[test]
    fn noiseless_frames_classify_to_exact_characters() {
        let mut cfg = tiny_config();
        cfg.noise_sigma = 0.0;
        let out = synth_dataset(&cfg, 21).unwrap();
        let vocab = &out.dataset.vocabulary;
        for u in out.dataset.labeled.iter().chain(&out.dataset.dev) {
            let words = u.transcript.as_ref().unwrap();
            let want: Vec<char> = words.iter().flat_map(|w| w.chars()).collect();
            let mut got = Vec::new();
            let mut last: Option<usize> = None;
            for frame in u.features.rows() {
                let mut best = (f32::INFINITY, 0usize);
                for (k, proto) in out.prototypes.rows().into_iter().enumerate() {
                    let dist: f32 = frame
                        .iter()
                        .zip(proto.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if dist < best.0 {
                        best = (dist, k);
                    }
                }
                // Collapse frame runs; adjacent repeated characters cannot
                // occur inside a word, and runs of the same char across word
                // boundaries collapse identically in the reference.
                if last != Some(best.1) {
                    got.push(vocab.tokens()[best.1]);
                    last = Some(best.1);
                }
            }
            let mut want_collapsed = Vec::new();
            for c in want {
                if want_collapsed.last() != Some(&c) {
                    want_collapsed.push(c);
                }
            }
            assert_eq!(got, want_collapsed, "utterance {}", u.id);
        }
    }

    #[test]
    fn normalize_applies_stated_rules() {
        assert_eq!(
            normalize_text("Mr. Smith, HELLO!!"),
            vec!["mister", "smith", "hello"]
        );
        assert_eq!(normalize_text(""), Vec::<String>::new());
        assert_eq!(normalize_text("  \t \n "), Vec::<String>::new());
        assert_eq!(
            normalize_text("Dr. No. 42 st. jean—luc"),
            vec!["doctor", "number", "saint", "jeanluc"]
        );
    }

    #[test]
    fn normalize_is_idempotent_on_random_strings() {
        let mut rng = stage_rng(99, "normalize-prop");
        let charset: Vec<char> = "abcXYZ .,!?919-_日本\t'".chars().collect();
        for _ in 0..1000 {
            let len = rng.gen_range(0..40);
            let s: String = (0..len)
                .map(|_| charset[rng.gen_range(0..charset.len())])
                .collect();
            let once = normalize_text(&s);
            let twice = normalize_text(&once.join(" "));
            assert_eq!(once, twice, "input {s:?}");
            assert!(once
                .iter()
                .all(|w| !w.is_empty() && w.chars().all(|c| c.is_ascii_lowercase())));
        }
    }

    #[test]
    fn filter_removes_by_title_and_text() {
        let corpus = TextCorpus::new(vec![
            ("alpha".into(), vec!["a".into(), "b".into(), "c".into()]),
            ("beta".into(), vec!["d".into(), "e".into()]),
            ("gamma".into(), vec!["f".into()]),
        ]);
        let titles: BTreeSet<String> = ["beta".to_string()].into();
        let (kept, report) = filter_overlap(&corpus, &titles, &[]);
        assert_eq!(kept.documents.len(), 2);
        assert_eq!(report.removed_by_title, 1);

        // Excluded text equal to a full body removes that document.
        let texts = vec![vec!["f".to_string()]];
        let (kept2, report2) = filter_overlap(&corpus, &BTreeSet::new(), &texts);
        assert_eq!(kept2.documents.len(), 2);
        assert_eq!(report2.removed_by_text, 1);
        assert!(kept2.documents.iter().all(|(t, _)| t != "gamma"));
    }

    #[test]
    fn filter_removes_exactly_planted_excerpts() {
        // Uniform random words over a wide vocabulary, so 5-gram collisions
        // between documents are effectively impossible (chain text repeats
        // itself too much for an exact-match test).
        let mut rng = stage_rng(17, "filter-test");
        let vocab: Vec<String> = (0..200).map(|i| format!("w{i:03}")).collect();
        let corpus = TextCorpus::new(
            (0..20)
                .map(|i| {
                    let body: Vec<String> = (0..25)
                        .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                        .collect();
                    (format!("doc-{i:02}"), body)
                })
                .collect(),
        );
        // Plant 5-word excerpts from documents 2, 7, 11, 19.
        let planted: Vec<usize> = vec![2, 7, 11, 19];
        let excerpts: Vec<Vec<String>> = planted
            .iter()
            .map(|&i| corpus.documents[i].1[3..8].to_vec())
            .collect();
        let (kept, report) = filter_overlap(&corpus, &BTreeSet::new(), &excerpts);

        // Naive O(n*m) oracle scan, written independently of the filter.
        let mut expect_removed = Vec::new();
        for (i, (_, body)) in corpus.documents.iter().enumerate() {
            let mut hit = false;
            for needle in &excerpts {
                for start in 0..body.len().saturating_sub(needle.len() - 1) {
                    if (0..needle.len()).all(|j| body[start + j] == needle[j]) {
                        hit = true;
                    }
                }
            }
            if hit {
                expect_removed.push(i);
            }
        }
        assert_eq!(expect_removed, planted, "seed produced a 5-gram collision");
        assert_eq!(kept.documents.len(), corpus.documents.len() - planted.len());
        assert_eq!(report.removed_by_text, planted.len());

        // Survivors match neither criterion.
        for (_, body) in &kept.documents {
            for needle in &excerpts {
                assert!(!contains_subsequence(body, needle));
            }
        }
    }

    #[test]
    fn dataset_roundtrip_is_identity() {
        let out = synth_dataset(&tiny_config(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset_with_config(
            &out.dataset,
            Some(&out.hidden_refs),
            dir.path(),
            Some(&tiny_config()),
        )
        .unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(out.dataset, back);
    }

    #[test]
    fn feature_file_arithmetic_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.fmat");
        let m = Array2::from_shape_vec((1, 1), vec![0.5f32]).unwrap();
        write_features(&path, &m).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 13 + 4, "header plus one f32 payload");
        assert_eq!(read_features(&path).unwrap(), m);

        // Truncated payload -> dimension mismatch.
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(Error::DimensionMismatch { .. })
        ));

        // Bad magic -> corrupt header.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_features(&path),
            Err(Error::CorruptHeader { .. })
        ));
    }

    #[test]
    fn synth_text_is_deterministic_and_in_vocab() {
        let cfg = tiny_config();
        let a = synth_text(&cfg, 5, 10, (3, 6), 1).unwrap();
        let b = synth_text(&cfg, 5, 10, (3, 6), 1).unwrap();
        assert_eq!(a, b);
        let lang = build_language(&cfg, 5).unwrap();
        for (_, body) in &a.documents {
            for w in body {
                assert!(lang.vocab.words().contains(w));
            }
        }
    }
}
