//! Automatic paraphrasing with a monolingual editing model: words that were
//! often edited out in the training triples get marked, and the model
//! rewrites the sentence around them.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::decoding::{decode, BanSet, DecodeItem, DecodeOptions};
use crate::editsim::EditTriple;
use crate::model::{Model, ModelError, ModelMode};
use crate::text::AnnotatedGuess;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParaphraseError {
    #[error("no triples to fit the marker model on")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("threshold must be in [0, 1], got {0}")]
    Threshold(f64),
    #[error("paraphrasing needs a monolingual model, got {0:?}")]
    WrongMode(ModelMode),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Marked and total occurrence counts per guess word type.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MarkerModel {
    counts: BTreeMap<String, (u64, u64)>,
}

impl MarkerModel {
    pub fn fit(triples: &[EditTriple]) -> Result<Self, ParaphraseError> {
        if triples.is_empty() {
            return Err(ParaphraseError::Empty);
        }
        let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for t in triples {
            for (w, &m) in t.guess.iter().zip(&t.markers) {
                let c = counts.entry(w.clone()).or_default();
                c.0 += u64::from(m);
                c.1 += 1;
            }
        }
        Ok(Self { counts })
    }

    /// `(marked, total)`; `(0, 0)` for unseen words.
    pub fn counts(&self, word: &str) -> (u64, u64) {
        self.counts.get(word).copied().unwrap_or((0, 0))
    }

    /// Relative frequency of being marked; 0 for unseen words.
    pub fn probability(&self, word: &str) -> f64 {
        match self.counts(word) {
            (_, 0) => 0.0,
            (m, t) => m as f64 / t as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `marker_i = P(word_i) > tau`.
    pub fn auto_mark<S: AsRef<str>>(&self, sentence: &[S], tau: f64) -> Vec<bool> {
        sentence.iter().map(|w| self.probability(w.as_ref()) > tau).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (w, (m, t)) in &self.counts {
            let _ = writeln!(s, "{w}\t{m}\t{t}");
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self, ParaphraseError> {
        let mut counts = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| ParaphraseError::Parse {
                line: n + 1,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            let [word, marked, total] = fields[..] else {
                return Err(err("expected word<TAB>marked<TAB>total"));
            };
            if word.is_empty() || word.chars().any(char::is_whitespace) {
                return Err(err("invalid word"));
            }
            let marked: u64 = marked.parse().map_err(|_| err("marked count is not an integer"))?;
            let total: u64 = total.parse().map_err(|_| err("total count is not an integer"))?;
            if total == 0 || marked > total {
                return Err(err("counts must satisfy 0 <= marked <= total, total > 0"));
            }
            if counts.insert(word.to_string(), (marked, total)).is_some() {
                return Err(err("duplicate word"));
            }
        }
        Ok(Self { counts })
    }
}

/// Fraction of paraphrase tokens whose type is absent from the source; 0
/// for an empty paraphrase.
pub fn boldness<S: AsRef<str>, P: AsRef<str>>(source: &[S], paraphrase: &[P]) -> f64 {
    if paraphrase.is_empty() {
        return 0.0;
    }
    let types: HashSet<&str> = source.iter().map(AsRef::as_ref).collect();
    let new = paraphrase.iter().filter(|w| !types.contains(w.as_ref())).count();
    new as f64 / paraphrase.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paraphrase {
    pub markers: Vec<bool>,
    pub output: Vec<String>,
    pub boldness: f64,
    pub flagged: bool,
    pub score: f64,
}

pub fn paraphrase<S: AsRef<str>>(
    model: &Model,
    markers: &MarkerModel,
    sentence: &[S],
    tau: f64,
    opts: &DecodeOptions,
) -> Result<Paraphrase, ParaphraseError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ParaphraseError::Threshold(tau));
    }
    if model.mode() != ModelMode::Monolingual {
        return Err(ParaphraseError::WrongMode(model.mode()));
    }
    let marks = markers.auto_mark(sentence, tau);
    let ids = model.target_vocab.encode(sentence);
    let guess = AnnotatedGuess::from_words(ids, marks.clone()).map_err(|e| ModelError::Config(e.to_string()))?;
    let item = DecodeItem {
        source: Vec::new(),
        guess: Some(guess),
        ban: BanSet::from_words(sentence, &marks),
    };
    let hyp = decode(model, &item, opts)?;
    let source: Vec<&str> = sentence.iter().map(AsRef::as_ref).collect();
    Ok(Paraphrase {
        markers: marks,
        boldness: boldness(&source, &hyp.words),
        output: hyp.words,
        flagged: hyp.flagged,
        score: hyp.score,
    })
}
