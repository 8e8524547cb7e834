//! Byte-level corpus handling: loading, contiguous train/valid/test splits,
//! tokenization, and a deterministic synthetic corpus generator.
//!
//! Tokens are raw bytes: token id = byte value, vocabulary size 256. Splits
//! are contiguous, disjoint slices of the source text (no shuffling), so a
//! split boundary never interleaves document order. The provenance block
//! records where the bytes came from and how they were cut, which is enough
//! to regenerate the exact splits later.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level vocabulary size: every u8 value is a token.
pub const BYTE_VOCAB: usize = 256;

/// Seed used for the bundled synthetic corpus shipped with the CLI.
pub const BUNDLED_SEED: u64 = 0x5EED_C0DE;

/// Default bundled corpus size in bytes (~5 MB of generated text).
pub const BUNDLED_BYTES: usize = 5_000_000;

/// How a `CorpusSplits` was produced: source description, split fractions,
/// and the seed recorded for reproducibility.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitProvenance {
    /// Human-readable origin: a file path or a generator description.
    pub source: String,
    /// (train, valid, test) fractions; they sum to 1.
    pub fracs: (f64, f64, f64),
    /// Seed recorded alongside the splits. The contiguous split itself is
    /// deterministic, but synthetic sources depend on this value.
    pub seed: u64,
}

/// Contiguous, disjoint, non-empty byte splits of a corpus.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<u8>,
    pub valid: Vec<u8>,
    pub test: Vec<u8>,
    pub provenance: SplitProvenance,
}

impl CorpusSplits {
    /// Total number of bytes across all three splits.
    pub fn total_len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }
}

fn validate_fracs(fracs: (f64, f64, f64)) -> Result<()> {
    let (a, b, c) = fracs;
    for (name, f) in [("train", a), ("valid", b), ("test", c)] {
        if !f.is_finite() || f <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "{name} fraction must be positive and finite, got {f}"
            )));
        }
    }
    let sum = a + b + c;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// Cut `bytes` into contiguous train/valid/test splits.
///
/// Split sizes are `round(n * frac)` for train and valid; test takes the
/// remainder so the three always partition the input. Every split must end
/// up non-empty. The split is order-preserving and uses no randomness; the
/// seed is only recorded in the provenance.
pub fn split_corpus(
    bytes: Vec<u8>,
    source: &str,
    fracs: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplits> {
    validate_fracs(fracs)?;
    let n = bytes.len();
    if n == 0 {
        return Err(Error::EmptyInput(format!("corpus '{source}' has no bytes")));
    }
    let n_train = (n as f64 * fracs.0).round() as usize;
    let n_valid = (n as f64 * fracs.1).round() as usize;
    if n_train == 0 || n_valid == 0 || n_train + n_valid >= n {
        return Err(Error::InvalidConfig(format!(
            "fractions {fracs:?} leave an empty split for a {n}-byte corpus"
        )));
    }
    let mut train = bytes;
    let rest = train.split_off(n_train);
    let mut valid = rest;
    let test = valid.split_off(n_valid);
    Ok(CorpusSplits {
        train,
        valid,
        test,
        provenance: SplitProvenance {
            source: source.to_string(),
            fracs,
            seed,
        },
    })
}

/// Read a corpus file and split it contiguously.
pub fn load_corpus(
    path: &std::path::Path,
    fracs: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplits> {
    let bytes = std::fs::read(path)?;
    split_corpus(bytes, &path.display().to_string(), fracs, seed)
}

/// Map bytes to token ids (identity embedding of u8 into usize).
pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Map token ids back to bytes; ids ≥ 256 are rejected.
pub fn detokenize(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            if t < BYTE_VOCAB {
                Ok(t as u8)
            } else {
                Err(Error::TokenOutOfVocab {
                    token: t as u32,
                    vocab: BYTE_VOCAB,
                })
            }
        })
        .collect()
}

// Word lists for the synthetic corpus. Topic clusters give paragraphs a
// recurring vocabulary, and per-paragraph "names" recur within a paragraph,
// so the text has mid-range statistical structure beyond bigrams — enough
// for a language model's context capacity to matter.
const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "that", "it", "was", "for", "with", "as", "on", "at",
    "by", "from", "this", "but", "not", "they", "his", "her", "their", "its", "one", "all",
    "were", "when", "there", "which", "she", "he", "had", "has", "been", "more", "some", "into",
    "than", "then", "them", "these", "would", "could", "after", "before", "over", "under",
    "again", "still", "never", "often", "very",
];

const TOPIC_CLUSTERS: &[&[&str]] = &[
    &[
        "river", "stone", "bridge", "water", "current", "bank", "ferry", "crossing", "flood",
        "valley", "mist", "shore",
    ],
    &[
        "engine", "signal", "wire", "machine", "lever", "gauge", "boiler", "steam", "workshop",
        "piston", "frame", "tool",
    ],
    &[
        "letter", "paper", "ink", "desk", "library", "volume", "margin", "chapter", "scholar",
        "archive", "shelf", "page",
    ],
    &[
        "harvest", "field", "grain", "orchard", "furrow", "plough", "barn", "season", "frost",
        "meadow", "seed", "mill",
    ],
    &[
        "harbor", "vessel", "cargo", "tide", "mast", "anchor", "voyage", "sailor", "chart",
        "lantern", "storm", "quay",
    ],
    &[
        "market", "coin", "ledger", "merchant", "price", "contract", "trade", "stall", "debt",
        "weight", "measure", "scale",
    ],
];

const VERBS: &[&str] = &[
    "carried", "turned", "held", "found", "made", "kept", "brought", "left", "moved", "watched",
    "opened", "closed", "crossed", "followed", "reached", "returned", "remembered", "counted",
    "measured", "repaired", "gathered", "waited", "listened", "answered",
];

const NAMES: &[&str] = &[
    "Harren", "Maldis", "Ottavio", "Pell", "Sigrun", "Tamsin", "Uldren", "Vessa", "Wystan",
    "Yareth", "Corvin", "Delia", "Eamon", "Fenara", "Galt",
];

/// Generate `n_bytes` of deterministic English-like prose.
///
/// The generator builds paragraphs around one of six topic clusters with two
/// recurring character names, sentences of 4–12 words with ordinary
/// capitalization and punctuation. About a quarter of sentences repeat an
/// earlier sentence of the same paragraph verbatim, giving the text the
/// kind of short-range recall structure real prose has (refrains, quoted
/// phrases) that rewards a model for remembering recent context. Identical
/// `(n_bytes, seed)` always yields identical bytes.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_bytes + 128);
    let mut paragraph: Vec<String> = Vec::new();
    while out.len() < n_bytes {
        let topic = TOPIC_CLUSTERS[rng.gen_range(0..TOPIC_CLUSTERS.len())];
        let name_a = NAMES[rng.gen_range(0..NAMES.len())];
        let name_b = NAMES[rng.gen_range(0..NAMES.len())];
        let n_sentences = rng.gen_range(5..=10);
        paragraph.clear();
        for _ in 0..n_sentences {
            if !paragraph.is_empty() && rng.gen::<f64>() < 0.25 {
                // Verbatim refrain of an earlier sentence in the paragraph.
                let again = paragraph[rng.gen_range(0..paragraph.len())].clone();
                out.extend_from_slice(again.as_bytes());
                paragraph.push(again);
                continue;
            }
            let n_words = rng.gen_range(4..=12);
            let mut sentence = String::new();
            for w in 0..n_words {
                let word = match rng.gen_range(0..10) {
                    0..=3 => FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())],
                    4..=6 => topic[rng.gen_range(0..topic.len())],
                    7..=8 => VERBS[rng.gen_range(0..VERBS.len())],
                    _ => {
                        if rng.gen::<f64>() < 0.5 {
                            name_a
                        } else {
                            name_b
                        }
                    }
                };
                if w == 0 {
                    let mut chars = word.chars();
                    if let Some(first) = chars.next() {
                        sentence.extend(first.to_uppercase());
                        sentence.push_str(chars.as_str());
                    }
                } else {
                    sentence.push(' ');
                    // A mid-sentence comma now and then.
                    if n_words > 6 && w == n_words / 2 && rng.gen::<f64>() < 0.3 {
                        sentence.pop();
                        sentence.push_str(", ");
                    }
                    sentence.push_str(word);
                }
            }
            sentence.push(match rng.gen_range(0..10) {
                0 => '?',
                1 => '!',
                _ => '.',
            });
            sentence.push(' ');
            out.extend_from_slice(sentence.as_bytes());
            paragraph.push(sentence);
        }
        // Paragraph break.
        if out.last() == Some(&b' ') {
            out.pop();
        }
        out.extend_from_slice(b"\n\n");
    }
    out.truncate(n_bytes);
    out
}

/// The corpus bundled with the CLI: ~5 MB of deterministic synthetic prose.
pub fn bundled_corpus() -> Vec<u8> {
    synthetic_corpus(BUNDLED_BYTES, BUNDLED_SEED)
}

/// Bundled corpus pre-cut with the standard 0.8/0.1/0.1 fractions.
pub fn bundled_splits() -> Result<CorpusSplits> {
    split_corpus(
        bundled_corpus(),
        "bundled-synthetic-v1",
        (0.8, 0.1, 0.1),
        BUNDLED_SEED,
    )
}
