use serde::{Deserialize, Serialize};

use super::ModelError;

const MAX_DIM: usize = 1 << 20;

/// Which inputs the network reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    /// Source encoder + annotated-guess encoder, dual attention.
    Bilingual,
    /// Annotated-guess encoder only.
    Monolingual,
    /// Source encoder only: a plain translation model (the initial system
    /// that produces guesses, and the constrained baseline).
    Translation,
}

impl ModelMode {
    pub fn uses_source(self) -> bool {
        matches!(self, ModelMode::Bilingual | ModelMode::Translation)
    }

    pub fn uses_guess(self) -> bool {
        matches!(self, ModelMode::Bilingual | ModelMode::Monolingual)
    }
}

impl std::str::FromStr for ModelMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilingual" => Ok(ModelMode::Bilingual),
            "monolingual" => Ok(ModelMode::Monolingual),
            "translation" => Ok(ModelMode::Translation),
            other => Err(ModelError::Config(format!("unknown model mode {other:?}"))),
        }
    }
}

/// One convolutional block: GLU output width and kernel width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub hidden: usize,
    pub kernel: usize,
}

impl LayerSpec {
    pub fn repeat(count: usize, hidden: usize, kernel: usize) -> Vec<LayerSpec> {
        vec![LayerSpec { hidden, kernel }; count]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModelMode,
    /// `None` when the mode has no source path.
    pub source_encoder: Option<Vec<LayerSpec>>,
    /// `None` when the mode has no guess path.
    pub guess_encoder: Option<Vec<LayerSpec>>,
    pub decoder: Vec<LayerSpec>,
    pub embed_dim: usize,
    pub out_embed_dim: usize,
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub max_positions: usize,
}

impl ModelConfig {
    /// 2-layer encoders and decoder, 32 hidden units, kernel 3, 32-dim embeddings.
    pub fn toy(mode: ModelMode, source_vocab: usize, target_vocab: usize) -> Self {
        Self::uniform(mode, source_vocab, target_vocab, 2, 2, 32, 3, 32, 32, 64)
    }

    /// 4-layer encoders, 3-layer decoder, 256 hidden units, kernel 3,
    /// 256-dim embeddings and output matrix.
    pub fn iwslt(mode: ModelMode, source_vocab: usize, target_vocab: usize) -> Self {
        Self::uniform(mode, source_vocab, target_vocab, 4, 3, 256, 3, 256, 256, 1024)
    }

    pub fn preset(name: &str, mode: ModelMode, source_vocab: usize, target_vocab: usize) -> Result<Self, ModelError> {
        match name {
            "toy" => Ok(Self::toy(mode, source_vocab, target_vocab)),
            "iwslt" => Ok(Self::iwslt(mode, source_vocab, target_vocab)),
            other => Err(ModelError::Config(format!("unknown preset {other:?}"))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        mode: ModelMode,
        source_vocab: usize,
        target_vocab: usize,
        encoder_layers: usize,
        decoder_layers: usize,
        hidden: usize,
        kernel: usize,
        embed_dim: usize,
        out_embed_dim: usize,
        max_positions: usize,
    ) -> Self {
        let enc = LayerSpec::repeat(encoder_layers, hidden, kernel);
        Self {
            mode,
            source_encoder: mode.uses_source().then(|| enc.clone()),
            guess_encoder: mode.uses_guess().then_some(enc),
            decoder: LayerSpec::repeat(decoder_layers, hidden, kernel),
            embed_dim,
            out_embed_dim,
            source_vocab,
            target_vocab,
            max_positions,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.source_encoder.is_some() != self.mode.uses_source() {
            return err("source encoder spec must be present iff the mode reads the source");
        }
        if self.guess_encoder.is_some() != self.mode.uses_guess() {
            return err("guess encoder spec must be present iff the mode reads the guess");
        }
        if self.decoder.is_empty() {
            return err("decoder needs at least one layer");
        }
        let all = self
            .source_encoder
            .iter()
            .chain(self.guess_encoder.iter())
            .flatten()
            .chain(self.decoder.iter());
        for l in all {
            if l.kernel == 0 || l.kernel % 2 == 0 {
                return err("kernel widths must be odd");
            }
            if l.hidden == 0 {
                return err("hidden sizes must be positive");
            }
        }
        if self.embed_dim == 0 || self.out_embed_dim == 0 || self.max_positions == 0 {
            return err("embedding sizes and max positions must be positive");
        }
        // keeps every tensor's element count far from usize overflow
        let dims = [
            self.embed_dim,
            self.out_embed_dim,
            self.max_positions,
            self.source_vocab,
            self.target_vocab,
        ];
        let layer_dims = self
            .source_encoder
            .iter()
            .chain(self.guess_encoder.iter())
            .flatten()
            .chain(&self.decoder);
        if dims
            .into_iter()
            .chain(layer_dims.flat_map(|l| [l.hidden, l.kernel]))
            .any(|d| d > MAX_DIM)
        {
            return err("a dimension exceeds 2^20");
        }
        if self.target_vocab <= crate::text::RESERVED.len() {
            return err("target vocabulary has no ordinary tokens");
        }
        if self.mode.uses_source() && self.source_vocab <= crate::text::RESERVED.len() {
            return err("source vocabulary has no ordinary tokens");
        }
        Ok(())
    }
}
