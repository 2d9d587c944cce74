//! Byte-level corpus, tokenizer and deterministic batch streaming.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus too small: {have} bytes, need at least {need}")]
    TooSmall { have: usize, need: usize },
    #[error("token id {0} is not a byte")]
    NotAByte(usize),
    #[error("invalid batch plan: {0}")]
    Plan(String),
}

/// Identity mapping between bytes and token ids `0..256`.
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(bytes: &[u8]) -> Vec<usize> {
        bytes.iter().map(|&b| b as usize).collect()
    }

    pub fn decode(ids: &[usize]) -> Result<Vec<u8>, CorpusError> {
        ids.iter()
            .map(|&id| u8::try_from(id).map_err(|_| CorpusError::NotAByte(id)))
            .collect()
    }
}

/// Raw bytes shared read-only between runs.
#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Arc<[u8]>,
}

impl Corpus {
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>) -> Self {
        Self { bytes: bytes.into() }
    }

    pub fn from_file(path: &Path) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_bytes(bytes))
    }

    /// The default built-in corpus, generated once per process.
    pub fn builtin() -> Self {
        static BUILTIN: OnceLock<Arc<[u8]>> = OnceLock::new();
        let bytes = BUILTIN.get_or_init(|| synthetic_text(BUILTIN_SEED, BUILTIN_BYTES).into());
        Self {
            bytes: Arc::clone(bytes),
        }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

pub const BUILTIN_SEED: u64 = 0x5eed_7e47;
pub const BUILTIN_BYTES: usize = 5 << 20;

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "each", "no", "his", "her", "their", "our"];
const NOUNS: &[&str] = &[
    "man", "woman", "house", "river", "king", "ship", "road", "day", "night", "world", "city", "door", "child",
    "friend", "letter", "garden", "horse", "mountain", "village", "voice", "book", "hand", "window", "story",
    "morning", "sea", "field", "tree", "soldier", "captain", "doctor", "table", "fire", "question", "answer",
    "country", "church", "winter", "summer", "light", "stone", "bridge", "master", "servant", "mother", "father",
    "brother", "sister", "island", "forest", "army", "market", "wall", "boat", "lamp", "bird", "heart", "name",
    "year", "hour", "moment", "work", "money", "paper", "school", "power", "truth", "law", "war", "peace",
];
const VERBS: &[&str] = &[
    "saw", "found", "made", "took", "gave", "left", "kept", "heard", "knew", "held", "brought", "told", "followed",
    "opened", "closed", "watched", "loved", "feared", "carried", "called", "built", "crossed", "remembered",
    "wrote", "read", "answered", "asked", "met", "lost", "showed", "sent", "reached", "turned", "covered",
];
const INTRANSITIVE: &[&str] = &[
    "waited", "slept", "smiled", "returned", "fell", "laughed", "walked", "spoke", "listened", "rose", "ran",
    "stopped", "arrived", "wept", "sang", "stayed", "died", "failed", "began", "paused",
];
const ADJECTIVES: &[&str] = &[
    "old", "young", "great", "small", "dark", "bright", "long", "quiet", "strange", "good", "poor", "rich", "cold",
    "warm", "white", "black", "green", "high", "low", "little", "early", "late", "true", "free", "wild", "gentle",
    "broken", "silent", "distant", "heavy", "narrow", "open", "golden", "empty",
];
const ADVERBS: &[&str] = &[
    "slowly", "quickly", "never", "always", "again", "often", "once", "still", "soon", "almost", "silently",
    "suddenly", "carefully", "perhaps", "indeed",
];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "by", "with", "from", "to", "under", "over", "near", "across", "through", "before", "after",
    "behind", "beyond", "along", "into", "toward",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "so", "for", "yet", "while", "because", "when", "although"];
const NAMES: &[&str] = &[
    "John", "Mary", "Thomas", "Anne", "William", "Elizabeth", "James", "Margaret", "Henry", "Alice", "Edward",
    "Catherine", "Robert", "Jane", "Arthur", "Emma",
];

/// Deterministic English-like prose: Zipf-skewed word choice over a fixed
/// lexicon, a small sentence grammar, punctuation and paragraphs.
pub fn synthetic_text(seed: u64, target_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    fn pick(rng: &mut ChaCha8Rng, words: &[&'static str]) -> &'static str {
        let u: f64 = rng.random();
        words[((u * u) * words.len() as f64) as usize]
    }
    fn noun_phrase(rng: &mut ChaCha8Rng, s: &mut String) {
        if rng.random_bool(0.12) {
            s.push_str(pick(rng, NAMES));
            return;
        }
        s.push_str(pick(rng, DETERMINERS));
        if rng.random_bool(0.4) {
            s.push(' ');
            s.push_str(pick(rng, ADJECTIVES));
        }
        s.push(' ');
        s.push_str(pick(rng, NOUNS));
        if rng.random_bool(0.1) {
            s.push('s');
        }
    }
    fn clause(rng: &mut ChaCha8Rng, s: &mut String) {
        noun_phrase(rng, s);
        if rng.random_bool(0.15) {
            s.push(' ');
            s.push_str(pick(rng, ADVERBS));
        }
        s.push(' ');
        if rng.random_bool(0.65) {
            s.push_str(pick(rng, VERBS));
            s.push(' ');
            noun_phrase(rng, s);
        } else {
            s.push_str(pick(rng, INTRANSITIVE));
        }
        if rng.random_bool(0.45) {
            s.push(' ');
            s.push_str(pick(rng, PREPOSITIONS));
            s.push(' ');
            noun_phrase(rng, s);
        }
    }
    let mut sentences_in_paragraph = 0;
    while out.len() < target_bytes {
        let start = out.len();
        clause(&mut rng, &mut out);
        while rng.random_bool(0.3) {
            if rng.random_bool(0.5) {
                out.push(',');
            }
            out.push(' ');
            out.push_str(pick(&mut rng, CONJUNCTIONS));
            out.push(' ');
            clause(&mut rng, &mut out);
        }
        if let Some(first) = out[start..].chars().next() {
            let upper = first.to_ascii_uppercase();
            out.replace_range(start..start + 1, &upper.to_string());
        }
        out.push(match rng.random_range(0..20) {
            0 => '?',
            1 => '!',
            2 => ';',
            _ => '.',
        });
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= 3 && rng.random_bool(0.2) {
            out.push_str("\n\n");
            sentences_in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(target_bytes);
    out.into_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Leading fraction of the corpus used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.9 }
    }
}

/// Deterministic schedule of training blocks and a fixed validation set.
///
/// The training span is cut into non-overlapping blocks of `seq_len + 1`
/// tokens, visited in a seeded permutation that is redrawn every epoch.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    corpus: Corpus,
    seed: u64,
    micro_batch: usize,
    grad_accum: usize,
    seq_len: usize,
    split: usize,
    train_blocks: usize,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl BatchPlan {
    pub fn new(
        corpus: Corpus,
        seed: u64,
        micro_batch: usize,
        grad_accum: usize,
        seq_len: usize,
        split: SplitConfig,
    ) -> Result<Self, CorpusError> {
        if micro_batch == 0 || grad_accum == 0 || seq_len == 0 {
            return Err(CorpusError::Plan("micro_batch, grad_accum and seq_len must be positive".into()));
        }
        if !(split.train_fraction > 0.0 && split.train_fraction < 1.0) {
            return Err(CorpusError::Plan(format!(
                "train fraction must lie in (0, 1), got {}",
                split.train_fraction
            )));
        }
        let split_at = (corpus.len() as f64 * split.train_fraction) as usize;
        let train_blocks = split_at / (seq_len + 1);
        let need = (seq_len + 1) * micro_batch;
        if train_blocks < micro_batch || corpus.len() - split_at < seq_len + 1 {
            return Err(CorpusError::TooSmall {
                have: corpus.len(),
                need: (need as f64 / split.train_fraction).ceil() as usize,
            });
        }
        Ok(Self {
            corpus,
            seed,
            micro_batch,
            grad_accum,
            seq_len,
            split: split_at,
            train_blocks,
            epoch_cache: None,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn micro_batch(&self) -> usize {
        self.micro_batch
    }

    /// Byte range of the training span.
    pub fn train_span(&self) -> std::ops::Range<usize> {
        0..self.split
    }

    /// Byte range of the held-out span.
    pub fn val_span(&self) -> std::ops::Range<usize> {
        self.split..self.corpus.len()
    }

    pub fn train_blocks(&self) -> usize {
        self.train_blocks
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            if epoch > 0 {
                log::info!("training span exhausted; reshuffling for epoch {epoch}");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.train_blocks).collect();
            perm.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, perm));
        }
        &self.epoch_cache.as_ref().expect("filled above").1
    }

    /// Start offsets (in bytes) of the rows of micro-batch `index` at `step`.
    pub fn offsets(&mut self, step: usize, index: usize) -> Vec<usize> {
        let base = (step * self.grad_accum + index) * self.micro_batch;
        let n = self.train_blocks;
        let width = self.seq_len + 1;
        (base..base + self.micro_batch)
            .map(|c| {
                let epoch = (c / n) as u64;
                let pos = c % n;
                self.permutation(epoch)[pos] * width
            })
            .collect()
    }

    /// Token block `[micro_batch, seq_len + 1]`, row-major.
    pub fn next_microbatch(&mut self, step: usize, index: usize) -> Vec<usize> {
        let width = self.seq_len + 1;
        let offsets = self.offsets(step, index);
        let bytes = self.corpus.bytes();
        offsets
            .iter()
            .flat_map(|&o| bytes[o..o + width].iter().map(|&b| b as usize))
            .collect()
    }

    /// Fixed validation blocks of `seq_len + 1` tokens drawn from the start
    /// of the held-out span, covering up to `eval_tokens` predicted tokens.
    /// Independent of the seed.
    pub fn validation_blocks(&self, eval_tokens: usize) -> Vec<Vec<usize>> {
        let width = self.seq_len + 1;
        let span = &self.corpus.bytes()[self.val_span()];
        let available = span.len() / width;
        let wanted = eval_tokens.div_ceil(self.seq_len).max(1);
        if wanted > available {
            log::warn!("held-out span holds {available} blocks, fewer than the {wanted} requested");
        }
        span.chunks_exact(width)
            .take(wanted.min(available))
            .map(ByteTokenizer::encode)
            .collect()
    }
}
