//! Vocabularies, tokenization, optional BPE segmentation and word-level
//! change markers.
//!
//! Markers are always attached to whole words. When words are split into
//! subwords every piece of a word carries that word's marker.

pub mod bpe;
mod vocab;

pub use bpe::{train_bpe, BpeModel, Merge, CONTINUATION};
pub use vocab::{Vocabulary, BOS, EOS, PAD, RESERVED, UNK};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("line {line}: invalid token {token:?}")]
    InvalidToken { line: usize, token: String },
    #[error("line {line}: malformed merge entry")]
    MalformedMerge { line: usize },
    #[error("merge count must be positive")]
    InvalidMergeCount,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("segmentation has {segmented} words but {markers} markers were given")]
    WordCountMismatch { segmented: usize, markers: usize },
    #[error("{0}: {1}")]
    Io(String, String),
    #[error("invalid annotated guess: {0}")]
    InvalidGuess(String),
}

/// How text is cut into model tokens.
#[derive(Clone, Debug, Default)]
pub enum Segmenter {
    /// Whitespace-separated words.
    #[default]
    Word,
    /// Whitespace words further split by a BPE merge table.
    Bpe(BpeModel),
}

/// Token strings plus a flag per token telling whether it closes a word.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Segmentation {
    pub tokens: Vec<String>,
    pub word_end: Vec<bool>,
}

impl Segmentation {
    pub fn word_count(&self) -> usize {
        self.word_end.iter().filter(|&&e| e).count()
    }
}

impl Segmenter {
    pub fn segment(&self, text: &str) -> Segmentation {
        let mut seg = Segmentation::default();
        for word in text.split_whitespace() {
            match self {
                Segmenter::Word => {
                    seg.tokens.push(word.to_string());
                    seg.word_end.push(true);
                }
                Segmenter::Bpe(model) => {
                    let pieces = model.segment_word(word);
                    let n = pieces.len();
                    for (i, p) in pieces.into_iter().enumerate() {
                        seg.tokens.push(p);
                        seg.word_end.push(i + 1 == n);
                    }
                }
            }
        }
        seg
    }
}

/// Segmenter paired with the vocabulary its tokens index into.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub segmenter: Segmenter,
    pub vocab: Vocabulary,
}

/// Token ids with word-boundary flags.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub word_end: Vec<bool>,
}

impl Tokenizer {
    pub fn word_level(vocab: Vocabulary) -> Self {
        Self {
            segmenter: Segmenter::Word,
            vocab,
        }
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let seg = self.segmenter.segment(text);
        Encoded {
            ids: self.vocab.encode(&seg.tokens),
            word_end: seg.word_end,
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        detokenize(&self.vocab.decode(ids))
    }
}

/// Joins tokens with single spaces and glues `@@` continuations back onto
/// the following piece.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut glue = false;
    for t in tokens {
        let t = t.as_ref();
        if !out.is_empty() && !glue {
            out.push(' ');
        }
        match t.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                glue = true;
            }
            None => {
                out.push_str(t);
                glue = false;
            }
        }
    }
    out
}

/// Whitespace words of `text`, case-sensitive.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Copies each word's marker onto every subword of that word.
///
/// `word_end[i]` is true when subword `i` closes a word; the last subword must
/// close a word and the number of words must equal `word_markers.len()`.
pub fn propagate_markers(word_markers: &[bool], word_end: &[bool]) -> Result<Vec<bool>, TextError> {
    let segmented = word_end.iter().filter(|&&e| e).count();
    if segmented != word_markers.len() || word_end.last() == Some(&false) {
        return Err(TextError::WordCountMismatch {
            segmented,
            markers: word_markers.len(),
        });
    }
    let mut out = Vec::with_capacity(word_end.len());
    let mut word = 0;
    for &end in word_end {
        out.push(word_markers[word]);
        if end {
            word += 1;
        }
    }
    Ok(out)
}

/// A guess sentence annotated with binary change markers (1 = avoid this word).
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AnnotatedGuess {
    tokens: Vec<usize>,
    markers: Vec<bool>,
    word_end: Vec<bool>,
}

impl AnnotatedGuess {
    pub fn new(tokens: Vec<usize>, markers: Vec<bool>, word_end: Vec<bool>) -> Result<Self, TextError> {
        if tokens.len() != markers.len() || tokens.len() != word_end.len() {
            return Err(TextError::InvalidGuess(format!(
                "{} tokens, {} markers, {} boundary flags",
                tokens.len(),
                markers.len(),
                word_end.len()
            )));
        }
        if word_end.last() == Some(&false) {
            return Err(TextError::InvalidGuess("last token does not close a word".into()));
        }
        let mut start = 0;
        for (i, &end) in word_end.iter().enumerate() {
            if end {
                if markers[start..=i].iter().any(|&m| m != markers[start]) {
                    return Err(TextError::InvalidGuess(format!(
                        "subwords {start}..={i} of one word carry different markers"
                    )));
                }
                start = i + 1;
            }
        }
        Ok(Self { tokens, markers, word_end })
    }

    /// Word-level guess: every token is a whole word.
    pub fn from_words(tokens: Vec<usize>, markers: Vec<bool>) -> Result<Self, TextError> {
        let word_end = vec![true; tokens.len()];
        Self::new(tokens, markers, word_end)
    }

    /// Subword guess from an encoding and word-level markers.
    pub fn from_encoded(encoded: Encoded, word_markers: &[bool]) -> Result<Self, TextError> {
        let markers = propagate_markers(word_markers, &encoded.word_end)?;
        Self::new(encoded.ids, markers, encoded.word_end)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn markers(&self) -> &[bool] {
        &self.markers
    }

    pub fn word_end(&self) -> &[bool] {
        &self.word_end
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
