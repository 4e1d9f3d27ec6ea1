//! Character corpus: vocabulary, train/validation split, client shards and
//! batch sampling.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

/// A text mapped to character ids. The vocabulary is sorted by code point.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vec<char>,
    pub text_ids: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let vocab: Vec<char> = text.chars().collect::<BTreeSet<_>>().into_iter().collect();
        let text_ids = text
            .chars()
            .map(|c| vocab.binary_search(&c).expect("char is in vocab"))
            .collect();
        Ok(Corpus { vocab, text_ids })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.vocab[i]).collect()
    }

    /// Splits off the last `ceil(val_fraction * len)` ids as validation.
    pub fn split(self, val_fraction: f64) -> Result<SplitCorpus> {
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "corpus.val_fraction must lie in (0, 1), got {val_fraction}"
            )));
        }
        let len = self.text_ids.len();
        let n_val = (val_fraction * len as f64).ceil() as usize;
        if n_val == 0 {
            return Err(Error::EmptySplit {
                which: "validation",
                val_fraction,
                len,
            });
        }
        if n_val >= len {
            return Err(Error::EmptySplit {
                which: "train",
                val_fraction,
                len,
            });
        }
        let train = self.text_ids[..len - n_val].to_vec();
        let val = self.text_ids[len - n_val..].to_vec();
        Ok(SplitCorpus {
            corpus: self,
            train,
            val,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub corpus: Corpus,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn load_corpus(path: impl AsRef<Path>, val_fraction: f64) -> Result<SplitCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_text(&text)?.split(val_fraction)
}

/// One client's contiguous slice of the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub ids: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Contiguous equal-size shards; the last shard takes the remainder.
pub fn partition(
    train_ids: &[usize],
    n_clients: usize,
    context_window: usize,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 {
        return Err(Error::Config("n_clients must be at least 1".into()));
    }
    let min_len = context_window + 1;
    let per_client = train_ids.len() / n_clients;
    if per_client < min_len {
        return Err(Error::TooFewTokens {
            len: train_ids.len(),
            n_clients,
            min_len,
        });
    }
    Ok((0..n_clients)
        .map(|client_id| {
            let start = client_id * per_client;
            let end = if client_id + 1 == n_clients {
                train_ids.len()
            } else {
                start + per_client
            };
            ClientShard {
                client_id,
                ids: train_ids[start..end].to_vec(),
            }
        })
        .collect())
}

/// `batch_size` rows of `window` context ids (row-major) and one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub window: usize,
    pub contexts: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn new(window: usize, contexts: Vec<usize>, targets: Vec<usize>) -> Result<Self> {
        if window == 0 || contexts.len() != window * targets.len() {
            return Err(Error::Shape(format!(
                "{} context ids do not form {} rows of width {window}",
                contexts.len(),
                targets.len()
            )));
        }
        Ok(Batch {
            window,
            contexts,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn context(&self, row: usize) -> &[usize] {
        &self.contexts[row * self.window..(row + 1) * self.window]
    }
}

/// Draws `batch_size` window offsets uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    shard: &ClientShard,
    batch_size: usize,
    window: usize,
    rng: &mut R,
) -> Result<Batch> {
    if shard.len() < window + 1 {
        return Err(Error::ShortSequence {
            len: shard.len(),
            needed: window + 1,
        });
    }
    let last_offset = shard.len() - window - 1;
    let mut contexts = Vec::with_capacity(batch_size * window);
    let mut targets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let o = rng.gen_range(0..=last_offset);
        contexts.extend_from_slice(&shard.ids[o..o + window]);
        targets.push(shard.ids[o + window]);
    }
    Ok(Batch {
        window,
        contexts,
        targets,
    })
}

/// Characters of the Tiny Shakespeare alphabet, which the synthetic text
/// reproduces exactly so default budgets fit either corpus.
const PUNCTUATION: &[char] = &['!', '$', '&', '\'', ',', '-', '.', '3', ':', ';', '?'];

/// Seeded pseudo-word text of exactly `len` characters.
///
/// A lexicon with one word per letter (both cases) is emitted first so every
/// symbol of the 65-character alphabet occurs; after that words are drawn
/// with Zipf-like frequencies, giving stable within-word statistics.
pub fn synthetic_text(len: usize, seed: u64) -> String {
    let mut rng = seed::rng(seed, Purpose::Corpus, 0, 0);
    let lower: Vec<char> = ('a'..='z').collect();
    let mut lexicon: Vec<String> = Vec::new();
    for first in ('a'..='z').chain('A'..='Z') {
        let extra = rng.gen_range(1..6);
        let mut w = String::new();
        w.push(first);
        for _ in 0..extra {
            w.push(*lower.choose(&mut rng).unwrap());
        }
        lexicon.push(w);
    }
    for _ in 0..300 {
        let n = rng.gen_range(2..8);
        lexicon.push((0..n).map(|_| *lower.choose(&mut rng).unwrap()).collect());
    }
    let weights: Vec<f64> = (0..lexicon.len()).map(|r| 1.0 / (r as f64 + 2.0)).collect();
    let total: f64 = weights.iter().sum();

    let mut out = String::with_capacity(len + 16);
    let mut line = 0usize;
    let mut seeded_words = 0usize;
    // every symbol is ASCII, so byte length is character count
    while out.len() < len {
        let n_words = rng.gen_range(3..9);
        for i in 0..n_words {
            if i > 0 {
                out.push(' ');
            }
            let word = if seeded_words < 52 {
                seeded_words += 1;
                &lexicon[seeded_words - 1]
            } else {
                let mut x = rng.gen::<f64>() * total;
                let mut pick = lexicon.len() - 1;
                for (j, w) in weights.iter().enumerate() {
                    if x < *w {
                        pick = j;
                        break;
                    }
                    x -= w;
                }
                &lexicon[pick]
            };
            out.push_str(word);
        }
        out.push(PUNCTUATION[line % PUNCTUATION.len()]);
        out.push('\n');
        line += 1;
    }
    out.truncate(len);
    out
}
