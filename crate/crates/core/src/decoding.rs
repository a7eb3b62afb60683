//! Left-to-right beam search with hard negative constraints.
//!
//! A [`BanSet`] holds the word types marked in a guess; the decoder never
//! emits them. In word mode banned ids are masked before candidates are
//! ranked. In subword mode a hypothesis is pruned as soon as it completes a
//! banned word. Scores are summed log-probabilities without length
//! normalization; ties go to the lower token id, then the earlier beam.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{DecoderState, IncrementalDecoder, Model, ModelError, StepAttention};
use crate::text::{AnnotatedGuess, Vocabulary, BOS, CONTINUATION, EOS, PAD};

/// Word types the decoder may not produce.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanSet(BTreeSet<String>);

impl BanSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every word type with at least one marked occurrence.
    pub fn from_words<S: AsRef<str>>(words: &[S], markers: &[bool]) -> Self {
        Self(
            words
                .iter()
                .zip(markers)
                .filter(|(_, &m)| m)
                .map(|(w, _)| w.as_ref().to_string())
                .collect(),
        )
    }

    /// Ban set of a (possibly subword) annotated guess, rebuilding words from
    /// pieces via the word-boundary flags.
    pub fn from_guess(guess: &AnnotatedGuess, vocab: &Vocabulary) -> Self {
        let mut set = BTreeSet::new();
        let mut word = String::new();
        for ((&id, &marked), &end) in guess.tokens().iter().zip(guess.markers()).zip(guess.word_end()) {
            let piece = vocab.token(id).unwrap_or(crate::text::RESERVED[crate::text::UNK]);
            word.push_str(piece.strip_suffix(CONTINUATION).unwrap_or(piece));
            if end {
                if marked {
                    set.insert(std::mem::take(&mut word));
                }
                word.clear();
            }
        }
        Self(set)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn insert(&mut self, word: impl Into<String>) {
        self.0.insert(word.into());
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn to_vec(&self) -> Vec<String> {
        self.0.iter().cloned().collect()
    }

    /// Ids of banned words present in `vocab`.
    pub fn ids(&self, vocab: &Vocabulary) -> HashSet<usize> {
        self.0.iter().filter_map(|w| vocab.id(w)).collect()
    }
}

impl FromIterator<String> for BanSet {
    fn from_iter<I: IntoIterator<Item = String>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Next-token distribution source for beam search.
pub trait SequenceScorer {
    type State: Clone;
    type Error;

    fn vocab_size(&self) -> usize;
    /// State after consuming `<s>`.
    fn start(&self) -> Result<Self::State, Self::Error>;
    /// Log-probabilities over the vocabulary for the next token.
    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64];
    fn advance(&self, state: &Self::State, token: usize) -> Result<Self::State, Self::Error>;
}

impl<'m> SequenceScorer for IncrementalDecoder<'m, f32> {
    type State = DecoderState<f32>;
    type Error = ModelError;

    fn vocab_size(&self) -> usize {
        IncrementalDecoder::vocab_size(self)
    }

    fn start(&self) -> Result<Self::State, ModelError> {
        IncrementalDecoder::start(self)
    }

    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64] {
        &state.log_probs
    }

    fn advance(&self, state: &Self::State, token: usize) -> Result<Self::State, ModelError> {
        IncrementalDecoder::advance(self, state, token)
    }
}

/// How banned words are enforced.
#[derive(Clone, Debug)]
pub enum Constraint<'a> {
    None,
    /// Whole-word tokens: banned ids are masked before expansion.
    Word(HashSet<usize>),
    /// Subword tokens with `@@` continuations: completed banned words are pruned.
    Subword {
        banned: &'a BanSet,
        vocab: &'a Vocabulary,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Maximum number of emitted tokens including `</s>`; at the last step
    /// only `</s>` may be emitted.
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct BeamResult<S> {
    /// Emitted tokens without the final `</s>`.
    pub tokens: Vec<usize>,
    pub score: f64,
    /// True when every hypothesis was pruned and the empty fallback was returned.
    pub flagged: bool,
    pub state: S,
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    partial: String,
}

/// Outcome of appending a token under a subword constraint.
fn extend_partial(partial: &str, piece: &str, banned: &BanSet) -> Option<String> {
    match piece.strip_suffix(CONTINUATION) {
        Some(stem) => Some(format!("{partial}{stem}")),
        None => {
            let word = format!("{partial}{piece}");
            (!banned.contains(&word)).then(String::new)
        }
    }
}

pub fn beam_search<S: SequenceScorer>(scorer: &S, constraint: &Constraint<'_>, cfg: &BeamConfig) -> Result<BeamResult<S::State>, S::Error> {
    let beam = cfg.beam.max(1);
    let vocab = scorer.vocab_size();
    let start = scorer.start()?;
    let mut active = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: start.clone(),
        partial: String::new(),
    }];
    let mut finished: Vec<Hyp<S::State>> = Vec::new();

    for step in 0..cfg.max_len.max(1) {
        let last = step + 1 >= cfg.max_len;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, h) in active.iter().enumerate() {
            let lp = scorer.log_probs(&h.state);
            for (tok, &l) in lp.iter().enumerate().take(vocab) {
                if tok == PAD || tok == BOS || (last && tok != EOS) {
                    continue;
                }
                if let Constraint::Word(ids) = constraint {
                    if ids.contains(&tok) {
                        continue;
                    }
                }
                let s = h.score + l;
                if s.is_nan() || s == f64::NEG_INFINITY {
                    continue;
                }
                candidates.push((s, tok, hi));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut next: Vec<Hyp<S::State>> = Vec::with_capacity(beam);
        for (s, tok, hi) in candidates {
            if next.len() == beam {
                break;
            }
            let h = &active[hi];
            let partial = match constraint {
                Constraint::Subword { banned, vocab } => {
                    let piece = if tok == EOS { "" } else { vocab.token(tok).unwrap_or("") };
                    match (tok == EOS, h.partial.is_empty()) {
                        (true, true) => Some(String::new()),
                        _ => extend_partial(&h.partial, piece, banned),
                    }
                }
                _ => Some(String::new()),
            };
            let Some(partial) = partial else {
                continue;
            };
            if tok == EOS {
                finished.push(Hyp {
                    tokens: h.tokens.clone(),
                    score: s,
                    state: h.state.clone(),
                    partial,
                });
                continue;
            }
            let mut tokens = h.tokens.clone();
            tokens.push(tok);
            next.push(Hyp {
                tokens,
                score: s,
                state: scorer.advance(&h.state, tok)?,
                partial,
            });
        }
        let best_finished = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if next.is_empty() || (!finished.is_empty() && best_finished >= next[0].score) {
            break;
        }
        active = next;
    }

    let mut best: Option<Hyp<S::State>> = None;
    for h in finished {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    Ok(match best {
        Some(h) => BeamResult {
            tokens: h.tokens,
            score: h.score,
            flagged: false,
            state: h.state,
        },
        None => BeamResult {
            tokens: Vec::new(),
            score: scorer.log_probs(&start).get(EOS).copied().unwrap_or(f64::NEG_INFINITY),
            flagged: true,
            state: start,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    #[default]
    Word,
    Subword,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam: usize,
    /// Overrides the default length limit `min(max_positions, 2·input + 10)`.
    pub max_len: Option<usize>,
    pub mode: TokenMode,
    pub record_attention: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: None,
            mode: TokenMode::Word,
            record_attention: false,
        }
    }
}

/// One decode request in id space.
#[derive(Clone, Debug, Default)]
pub struct DecodeItem {
    pub source: Vec<usize>,
    pub guess: Option<AnnotatedGuess>,
    pub ban: BanSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    pub score: f64,
    pub flagged: bool,
    pub banned: Vec<String>,
    /// Per emitted token (including `</s>`), per decoder layer.
    pub attention: Option<Vec<StepAttention>>,
}

impl Hypothesis {
    pub fn output(&self) -> String {
        crate::text::detokenize(&self.words)
    }
}

/// Words of `tokens` after gluing subword continuations.
fn surface_words(tokens: &[usize], vocab: &Vocabulary) -> Vec<String> {
    let pieces = vocab.decode(tokens);
    crate::text::detokenize(&pieces).split_whitespace().map(String::from).collect()
}

/// Constrained beam decode of one item.
pub fn decode(model: &Model, item: &DecodeItem, opts: &DecodeOptions) -> Result<Hypothesis, ModelError> {
    let cfg = model.config();
    let source = cfg.mode.uses_source().then_some(item.source.as_slice());
    let guess = if cfg.mode.uses_guess() {
        Some(item.guess.as_ref().ok_or(ModelError::MissingGuess)?)
    } else {
        None
    };
    let input_len = source.map_or(0, <[usize]>::len).max(guess.map_or(0, AnnotatedGuess::len));
    let max_len = opts.max_len.unwrap_or(2 * input_len + 10).min(cfg.max_positions).max(1);
    let scorer = IncrementalDecoder::new(&model.network, &model.params.arrays, source, guess)?.with_attention(opts.record_attention);
    let constraint = match opts.mode {
        TokenMode::Word => Constraint::Word(item.ban.ids(&model.target_vocab)),
        TokenMode::Subword => Constraint::Subword {
            banned: &item.ban,
            vocab: &model.target_vocab,
        },
    };
    let result = beam_search(&scorer, &constraint, &BeamConfig { beam: opts.beam, max_len })?;
    let words = surface_words(&result.tokens, &model.target_vocab);
    Ok(Hypothesis {
        words,
        tokens: result.tokens,
        score: result.score,
        flagged: result.flagged,
        banned: item.ban.to_vec(),
        attention: opts.record_attention.then_some(result.state.attention),
    })
}

/// Decodes items in parallel; results keep input order and equal
/// one-by-one decoding. Errors are isolated per item.
pub fn decode_batch(model: &Model, items: &[DecodeItem], opts: &DecodeOptions) -> Vec<Result<Hypothesis, ModelError>> {
    items.par_iter().map(|item| decode(model, item, opts)).collect()
}

/// Decode output record (one JSON object per line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub output: String,
    pub score: f64,
    pub flagged: bool,
    pub banned: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<Vec<Vec<f32>>>>>,
}

impl From<&Hypothesis> for DecodeRecord {
    fn from(h: &Hypothesis) -> Self {
        // attention[step][layer][path] with path 0 = source, 1 = guess (empty when absent)
        let attention = h.attention.as_ref().map(|steps| {
            steps
                .iter()
                .map(|s| {
                    s.source
                        .iter()
                        .zip(&s.guess)
                        .map(|(src, g)| vec![src.clone().unwrap_or_default(), g.clone().unwrap_or_default()])
                        .collect()
                })
                .collect()
        });
        Self {
            output: h.output(),
            score: h.score,
            flagged: h.flagged,
            banned: h.banned.clone(),
            attention,
        }
    }
}

/// True when none of `words` is banned. Independent of the decoder's own
/// bookkeeping; used as a post-decode safety check.
pub fn respects_ban<S: AsRef<str>>(words: &[S], ban: &BanSet) -> bool {
    words.iter().all(|w| !ban.contains(w.as_ref()))
}
