//! The editing network: convolutional source encoder, convolutional guess
//! encoder with marker-dependent positional embeddings, and a convolutional
//! decoder with dual multi-hop attention.

pub mod checkpoint;
mod config;
pub mod incremental;
mod network;
pub mod params;

use std::path::Path;

pub use config::{LayerSpec, ModelConfig, ModelMode};
pub use incremental::{DecoderState, IncrementalDecoder, StepAttention};
pub use network::{with_eos, AttentionTrace, EncoderOutput, Example, ForwardOutput, LayerAttention, Network, TraceLayer};
pub use params::{Layout, ModelParameters};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::text::{AnnotatedGuess, Tokenizer, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("this model mode has no {0}")]
    ModeForbids(&'static str),
    #[error("sequence of length {len} exceeds max positions {max}")]
    PositionOverflow { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("attention over an empty encoder output")]
    EmptyEncoderOutput,
    #[error("model reads a source sentence but none was given")]
    MissingSource,
    #[error("model reads an annotated guess but none was given")]
    MissingGuess,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A trained network with its vocabularies; the unit stored in a checkpoint.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub params: ModelParameters<f32>,
    pub source_vocab: Option<Vocabulary>,
    pub target_vocab: Vocabulary,
}

impl Model {
    /// Freshly initialized model; vocabulary sizes override the config's.
    pub fn new(mut config: ModelConfig, source_vocab: Option<Vocabulary>, target_vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.target_vocab = target_vocab.len();
        if let Some(v) = &source_vocab {
            config.source_vocab = v.len();
        }
        let network = Network::new(config)?;
        let params = ModelParameters::init(&network.layout, seed);
        Ok(Self {
            network,
            params,
            source_vocab,
            target_vocab,
        })
    }

    pub fn from_parts(
        config: ModelConfig,
        params: ModelParameters<f32>,
        source_vocab: Option<Vocabulary>,
        target_vocab: Vocabulary,
    ) -> Result<Self, ModelError> {
        let network = Network::new(config)?;
        params.check_layout(&network.layout)?;
        Ok(Self {
            network,
            params,
            source_vocab,
            target_vocab,
        })
    }

    pub fn mode(&self) -> ModelMode {
        self.network.mode()
    }

    pub fn config(&self) -> &ModelConfig {
        &self.network.config
    }

    pub fn target_tokenizer(&self) -> Tokenizer {
        Tokenizer::word_level(self.target_vocab.clone())
    }

    /// Word-level example from whitespace-tokenized strings.
    pub fn example<S: AsRef<str>>(&self, source: &[S], guess: Option<(&[S], &[bool])>, target: &[S]) -> Result<Example, ModelError> {
        let source = match &self.source_vocab {
            Some(v) => v.encode(source),
            None => Vec::new(),
        };
        let guess = guess
            .map(|(words, markers)| {
                AnnotatedGuess::from_words(self.target_vocab.encode(words), markers.to_vec()).map_err(|e| ModelError::Config(e.to_string()))
            })
            .transpose()?;
        Ok(Example {
            source,
            guess,
            target: self.target_vocab.encode(target),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        checkpoint::from_bytes(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
