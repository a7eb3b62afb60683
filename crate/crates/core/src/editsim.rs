//! Simulated post-edits: guesses from an initial system (or a noise
//! channel), markers on guess words missing from the reference, and marker
//! subsampling for partial feedback.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::{decode_batch, BanSet, DecodeItem, DecodeOptions};
use crate::model::{Example, Model, ModelError};
use crate::text::{words, AnnotatedGuess, TextError, Tokenizer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EditError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("guess has {words} words but {markers} markers")]
    MarkerLength { words: usize, markers: usize },
    #[error("bernoulli probability must be in [0, 1], got {0}")]
    Probability(f64),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Source, annotated guess and reference, all as whitespace words.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EditTriple {
    pub source: Vec<String>,
    pub guess: Vec<String>,
    pub markers: Vec<bool>,
    pub reference: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    source: String,
    guess: String,
    markers: Vec<u8>,
    reference: String,
}

fn split(text: &str) -> Vec<String> {
    words(text).into_iter().map(String::from).collect()
}

impl EditTriple {
    pub fn new(source: Vec<String>, guess: Vec<String>, markers: Vec<bool>, reference: Vec<String>) -> Result<Self, EditError> {
        if guess.len() != markers.len() {
            return Err(EditError::MarkerLength {
                words: guess.len(),
                markers: markers.len(),
            });
        }
        Ok(Self {
            source,
            guess,
            markers,
            reference,
        })
    }

    pub fn ban_set(&self) -> BanSet {
        BanSet::from_words(&self.guess, &self.markers)
    }

    pub fn marked_count(&self) -> usize {
        self.markers.iter().filter(|&&m| m).count()
    }

    /// Word-level decode request for `model`, banning the marked words.
    pub fn decode_item(&self, model: &Model) -> Result<DecodeItem, EditError> {
        let source = match (&model.source_vocab, model.mode().uses_source()) {
            (Some(v), true) => v.encode(&self.source),
            _ => Vec::new(),
        };
        let guess = if model.mode().uses_guess() {
            Some(AnnotatedGuess::from_words(
                model.target_vocab.encode(&self.guess),
                self.markers.clone(),
            )?)
        } else {
            None
        };
        Ok(DecodeItem {
            source,
            guess,
            ban: self.ban_set(),
        })
    }

    /// Model example; `source` is ignored when no source tokenizer is given.
    pub fn to_example(&self, source: Option<&Tokenizer>, target: &Tokenizer) -> Result<Example, EditError> {
        let enc = target.encode(&self.guess.join(" "));
        let guess = AnnotatedGuess::from_encoded(enc, &self.markers)?;
        Ok(Example {
            source: source.map(|t| t.encode(&self.source.join(" ")).ids).unwrap_or_default(),
            guess: Some(guess),
            target: target.encode(&self.reference.join(" ")).ids,
        })
    }

    pub fn to_json(&self) -> String {
        let r = Record {
            source: self.source.join(" "),
            guess: self.guess.join(" "),
            markers: self.markers.iter().map(|&m| u8::from(m)).collect(),
            reference: self.reference.join(" "),
        };
        serde_json::to_string(&r).expect("record serializes")
    }

    pub fn from_json(line: &str) -> Result<Self, String> {
        let r: Record = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let markers = r
            .markers
            .iter()
            .map(|&m| match m {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(format!("marker value {m} is not 0 or 1")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(split(&r.source), split(&r.guess), markers, split(&r.reference)).map_err(|e| e.to_string())
    }
}

/// Parses JSON-lines; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<EditTriple>, EditError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| EditTriple::from_json(l).map_err(|message| EditError::Parse { line: n + 1, message }))
        .collect()
}

pub fn to_jsonl(triples: &[EditTriple]) -> String {
    let mut s = String::new();
    for t in triples {
        s.push_str(&t.to_json());
        s.push('\n');
    }
    s
}

/// Marks every guess word whose type does not occur in the reference.
pub fn simulate_markers<S: AsRef<str>, R: AsRef<str>>(guess: &[S], reference: &[R]) -> Vec<bool> {
    let types: HashSet<&str> = reference.iter().map(AsRef::as_ref).collect();
    guess.iter().map(|w| !types.contains(w.as_ref())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarkingPolicy {
    Full,
    /// Keep each marker independently with probability p.
    Bernoulli(f64),
    /// Keep a uniform subset of min(k, #marked) markers.
    TopK(usize),
}

impl MarkingPolicy {
    pub fn validate(&self) -> Result<(), EditError> {
        match *self {
            MarkingPolicy::Bernoulli(p) if !(0.0..=1.0).contains(&p) => Err(EditError::Probability(p)),
            _ => Ok(()),
        }
    }
}

/// Per-sentence generator: stream `index` of the seed.
pub fn sentence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn subsample_markers<R: Rng>(full: &[bool], policy: MarkingPolicy, rng: &mut R) -> Vec<bool> {
    match policy {
        MarkingPolicy::Full => full.to_vec(),
        MarkingPolicy::Bernoulli(p) => full.iter().map(|&m| m && rng.gen_bool(p.clamp(0.0, 1.0))).collect(),
        MarkingPolicy::TopK(k) => {
            // a shuffled order makes the kept sets nested in k for a fixed rng
            let mut ones: Vec<usize> = (0..full.len()).filter(|&i| full[i]).collect();
            ones.shuffle(rng);
            let mut out = vec![false; full.len()];
            for &i in ones.iter().take(k) {
                out[i] = true;
            }
            out
        }
    }
}

/// Replaces each token, with probability `rate`, by a uniformly chosen
/// different entry of `vocabulary`.
pub fn synthetic_guess<S: AsRef<str>, R: Rng>(reference: &[S], vocabulary: &[String], rate: f64, rng: &mut R) -> Vec<String> {
    reference
        .iter()
        .map(|w| {
            let w = w.as_ref();
            if vocabulary.len() < 2 || !rng.gen_bool(rate.clamp(0.0, 1.0)) {
                return w.to_string();
            }
            loop {
                let c = &vocabulary[rng.gen_range(0..vocabulary.len())];
                if c != w {
                    return c.clone();
                }
            }
        })
        .collect()
}

/// Where guesses come from.
#[derive(Clone, Copy)]
pub enum Guesser<'a> {
    /// Beam decoding with an initial translation model.
    Model { model: &'a Model, beam: usize },
    /// Noise channel over the reference.
    Synthetic { vocabulary: &'a [String], rate: f64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuiltDataset {
    pub triples: Vec<EditTriple>,
    /// Indices of bitext pairs whose decode failed.
    pub skipped: Vec<usize>,
}

/// One triple per bitext pair, in input order. Markers are simulated
/// against the reference, then subsampled with stream `i` of `seed`.
pub fn build_dataset(
    bitext: &[(Vec<String>, Vec<String>)],
    guesser: Guesser<'_>,
    policy: MarkingPolicy,
    seed: u64,
) -> Result<BuiltDataset, EditError> {
    policy.validate()?;
    let guesses: Vec<Option<Vec<String>>> = match guesser {
        Guesser::Model { model, beam } => {
            let src_vocab = model.source_vocab.as_ref().ok_or(ModelError::MissingSource)?;
            let items: Vec<DecodeItem> = bitext
                .iter()
                .map(|(s, _)| DecodeItem {
                    source: src_vocab.encode(s),
                    guess: None,
                    ban: BanSet::new(),
                })
                .collect();
            let opts = DecodeOptions {
                beam,
                ..DecodeOptions::default()
            };
            decode_batch(model, &items, &opts)
                .into_iter()
                .map(|r| r.ok().map(|h| h.words))
                .collect()
        }
        Guesser::Synthetic { vocabulary, rate } => bitext
            .par_iter()
            .enumerate()
            .map(|(i, (_, r))| {
                Some(synthetic_guess(
                    r,
                    vocabulary,
                    rate,
                    &mut sentence_rng(seed ^ 0x9e37_79b9, i as u64),
                ))
            })
            .collect(),
    };
    let mut out = BuiltDataset::default();
    for (i, ((src, reference), guess)) in bitext.iter().zip(guesses).enumerate() {
        let Some(guess) = guess else {
            out.skipped.push(i);
            continue;
        };
        let full = simulate_markers(&guess, reference);
        let markers = subsample_markers(&full, policy, &mut sentence_rng(seed, i as u64));
        out.triples.push(EditTriple {
            source: src.clone(),
            guess,
            markers,
            reference: reference.clone(),
        });
    }
    Ok(out)
}

/// Applies `policy` to triples carrying full markers.
pub fn resample(triples: &[EditTriple], policy: MarkingPolicy, seed: u64) -> Vec<EditTriple> {
    triples
        .iter()
        .enumerate()
        .map(|(i, t)| EditTriple {
            markers: subsample_markers(&t.markers, policy, &mut sentence_rng(seed, i as u64)),
            ..t.clone()
        })
        .collect()
}
