//! Differentiable forward pass of the editing network.
//!
//! Source and guess encoders are stacks of length-preserving convolutional
//! GLU blocks with residual connections. The decoder is a stack of causal
//! convolutional blocks; every decoder layer attends to each available
//! encoder with an unscaled dot-product softmax and, in bilingual mode,
//! averages the two attended summaries with weight ½ each.

use super::params::{ConvSlots, EncoderSlots, Layout, LinearSlots};
use super::{ModelConfig, ModelError, ModelMode};
use crate::autodiff::{Array, Scalar, Tape, Var};
use crate::text::{AnnotatedGuess, EOS};

pub(crate) const SQRT_HALF: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Keys and values of one encoder, both `[len, embed_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub keys: Var,
    pub values: Var,
}

/// Attention of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerAttention {
    /// Source weights `[target_len, source_len]`.
    pub source_weights: Option<Var>,
    /// Guess weights `[target_len, guess_len]`.
    pub guess_weights: Option<Var>,
    pub source_summary: Option<Var>,
    pub guess_summary: Option<Var>,
    /// Summary fed back into the decoder layer.
    pub summary: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[target_len, target_vocab]`.
    pub logits: Var,
    pub layers: Vec<LayerAttention>,
}

/// Attention weights read back from a tape, per decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace<T> {
    pub layers: Vec<TraceLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceLayer<T> {
    pub source: Option<Array<T>>,
    pub guess: Option<Array<T>>,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn read(tape: &Tape<'_, T>, out: &ForwardOutput) -> Self {
        Self {
            layers: out
                .layers
                .iter()
                .map(|l| TraceLayer {
                    source: l.source_weights.map(|v| tape.value(v).clone()),
                    guess: l.guess_weights.map(|v| tape.value(v).clone()),
                })
                .collect(),
        }
    }
}

/// One training/evaluation example in id space. Encoders see the given ids
/// followed by end-of-sentence; the decoder sees `<s>` followed by `target`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Example {
    pub source: Vec<usize>,
    pub guess: Option<AnnotatedGuess>,
    pub target: Vec<usize>,
}

impl Example {
    pub fn target_tokens(&self) -> usize {
        self.target.len() + 1
    }
}

/// Parameter layout bound to its configuration.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub layout: Layout,
}

fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, s: LinearSlots) -> Result<Var, ModelError> {
    let (w, b) = (tape.param(s.weight), tape.param(s.bias));
    Ok(tape.linear(x, w, Some(b))?)
}

fn check_positions(len: usize, max: usize) -> Result<(), ModelError> {
    if len > max {
        return Err(ModelError::PositionOverflow { len, max });
    }
    Ok(())
}

fn check_tokens(ids: &[usize], vocab: usize) -> Result<(), ModelError> {
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(ModelError::TokenOutOfRange { id, vocab });
    }
    Ok(())
}

impl Network {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        let layout = Layout::new(&config)?;
        Ok(Self { config, layout })
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    /// Guess embedding: `word_embed(t_i) + positional[c_i](i)`.
    pub fn embed_guess<T: Scalar>(&self, tape: &mut Tape<'_, T>, guess: &AnnotatedGuess) -> Result<Var, ModelError> {
        let slots = self.layout.guess.as_ref().ok_or(ModelError::ModeForbids("guess encoder"))?;
        check_positions(guess.len(), self.config.max_positions)?;
        check_tokens(guess.tokens(), self.config.target_vocab)?;
        let tok = tape.param(slots.token);
        let words = tape.embedding(tok, guess.tokens())?;
        let tables = [tape.param(slots.position[0]), tape.param(slots.position[1])];
        let lookups: Vec<(usize, usize)> = guess.markers().iter().enumerate().map(|(i, &m)| (usize::from(m), i)).collect();
        let pos = tape.embedding_select(&tables, &lookups)?;
        Ok(tape.add(words, pos)?)
    }

    fn embed_source<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var, ModelError> {
        let slots = self.layout.source.as_ref().ok_or(ModelError::ModeForbids("source encoder"))?;
        check_positions(ids.len(), self.config.max_positions)?;
        check_tokens(ids, self.config.source_vocab)?;
        let tok = tape.param(slots.token);
        let words = tape.embedding(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let table = tape.param(slots.position[0]);
        let pos = tape.embedding(table, &positions)?;
        Ok(tape.add(words, pos)?)
    }

    fn conv_block<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, slots: &ConvSlots, causal: bool) -> Result<(Var, Var), ModelError> {
        let residual = match slots.residual {
            Some(r) => {
                let w = tape.param(r);
                tape.linear(x, w, None)?
            }
            None => x,
        };
        let k = slots.spec.kernel;
        let (left, right) = if causal { (k - 1, 0) } else { (k / 2, k / 2) };
        let (w, b) = (tape.param(slots.weight), tape.param(slots.bias));
        let y = tape.conv1d(x, w, b, left, right)?;
        let y = tape.glu(y)?;
        Ok((y, residual))
    }

    fn encoder_stack<T: Scalar>(tape: &mut Tape<'_, T>, embedded: Var, slots: &EncoderSlots) -> Result<EncoderOutput, ModelError> {
        let (Some(proj_in), Some(proj_out)) = (slots.proj_in, slots.proj_out) else {
            return Ok(EncoderOutput {
                keys: embedded,
                values: embedded,
            });
        };
        let mut x = linear(tape, embedded, proj_in)?;
        for layer in &slots.layers {
            let (y, residual) = Self::conv_block(tape, x, layer, false)?;
            let sum = tape.add(y, residual)?;
            x = tape.scale(sum, SQRT_HALF);
        }
        let keys = linear(tape, x, proj_out)?;
        let sum = tape.add(keys, embedded)?;
        let values = tape.scale(sum, SQRT_HALF);
        Ok(EncoderOutput { keys, values })
    }

    /// Encodes exactly the given source ids (no end-of-sentence appended).
    pub fn encode_source<T: Scalar>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<EncoderOutput, ModelError> {
        let e = self.embed_source(tape, ids)?;
        Self::encoder_stack(tape, e, self.layout.source.as_ref().expect("checked by embed_source"))
    }

    /// Encodes exactly the given annotated guess (no end-of-sentence appended).
    pub fn encode_guess<T: Scalar>(&self, tape: &mut Tape<'_, T>, guess: &AnnotatedGuess) -> Result<EncoderOutput, ModelError> {
        let e = self.embed_guess(tape, guess)?;
        Self::encoder_stack(tape, e, self.layout.guess.as_ref().expect("checked by embed_guess"))
    }

    /// Softmax attention of `query` rows over one encoder; returns (weights, summary).
    pub fn attend<T: Scalar>(tape: &mut Tape<'_, T>, query: Var, enc: EncoderOutput) -> Result<(Var, Var), ModelError> {
        if tape.value(enc.keys).rows() == 0 {
            return Err(ModelError::EmptyEncoderOutput);
        }
        let scores = tape.matmul_nt(query, enc.keys)?;
        let weights = tape.softmax(scores)?;
        let summary = tape.matmul(weights, enc.values)?;
        Ok((weights, summary))
    }

    /// Attends both paths with the same query and averages the summaries
    /// with fixed ½ weights; a single available path is used as is.
    pub fn dual_attend<T: Scalar>(
        tape: &mut Tape<'_, T>,
        query: Var,
        source: Option<EncoderOutput>,
        guess: Option<EncoderOutput>,
    ) -> Result<LayerAttention, ModelError> {
        let src = source.map(|e| Self::attend(tape, query, e)).transpose()?;
        let gss = guess.map(|e| Self::attend(tape, query, e)).transpose()?;
        let summary = match (src, gss) {
            (Some((_, s)), Some((_, g))) => {
                let hs = tape.scale(s, 0.5);
                let hg = tape.scale(g, 0.5);
                tape.add(hs, hg)?
            }
            (Some((_, s)), None) => s,
            (None, Some((_, g))) => g,
            (None, None) => return Err(ModelError::EmptyEncoderOutput),
        };
        Ok(LayerAttention {
            source_weights: src.map(|p| p.0),
            guess_weights: gss.map(|p| p.0),
            source_summary: src.map(|p| p.1),
            guess_summary: gss.map(|p| p.1),
            summary,
        })
    }

    /// Decoder over `prefix` (starting with `<s>`) given encoder outputs.
    pub fn decode<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        prefix: &[usize],
        source: Option<EncoderOutput>,
        guess: Option<EncoderOutput>,
    ) -> Result<ForwardOutput, ModelError> {
        let slots = &self.layout.decoder;
        check_positions(prefix.len(), self.config.max_positions)?;
        check_tokens(prefix, self.config.target_vocab)?;
        let tok = tape.param(slots.token);
        let words = tape.embedding(tok, prefix)?;
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let table = tape.param(slots.position);
        let pos = tape.embedding(table, &positions)?;
        let target_embed = tape.add(words, pos)?;

        let mut x = linear(tape, target_embed, slots.proj_in)?;
        let mut layers = Vec::with_capacity(slots.layers.len());
        for layer in &slots.layers {
            let (y, residual) = Self::conv_block(tape, x, &layer.conv, true)?;
            let q = linear(tape, y, layer.attn_in)?;
            let q = tape.add(q, target_embed)?;
            let query = tape.scale(q, SQRT_HALF);
            let att = Self::dual_attend(tape, query, source, guess)?;
            let back = linear(tape, att.summary, layer.attn_out)?;
            let y = tape.add(y, back)?;
            let y = tape.scale(y, SQRT_HALF);
            let sum = tape.add(y, residual)?;
            x = tape.scale(sum, SQRT_HALF);
            layers.push(att);
        }
        let h = linear(tape, x, slots.proj_out)?;
        let logits = linear(tape, h, slots.output)?;
        Ok(ForwardOutput { logits, layers })
    }

    /// Full forward pass on one example: encoders see their ids followed by
    /// `</s>`; the decoder sees `<s> target`. Logits are
    /// `[target.len() + 1, target_vocab]`, predicting `target </s>`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, example: &Example) -> Result<ForwardOutput, ModelError> {
        let source = if self.mode().uses_source() {
            let mut ids = example.source.clone();
            ids.push(EOS);
            Some(self.encode_source(tape, &ids)?)
        } else {
            None
        };
        let guess = if self.mode().uses_guess() {
            let g = example.guess.as_ref().ok_or(ModelError::MissingGuess)?;
            Some(self.encode_guess(tape, &with_eos(g))?)
        } else {
            None
        };
        let mut prefix = Vec::with_capacity(example.target.len() + 1);
        prefix.push(crate::text::BOS);
        prefix.extend_from_slice(&example.target);
        self.decode(tape, &prefix, source, guess)
    }

    /// Summed negative log-likelihood of `target </s>`.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<'_, T>, example: &Example) -> Result<Var, ModelError> {
        let out = self.forward(tape, example)?;
        let mut targets = example.target.clone();
        targets.push(EOS);
        Ok(tape.cross_entropy(out.logits, &targets, Some(crate::text::PAD))?)
    }
}

/// The guess with an unmarked end-of-sentence token appended.
pub fn with_eos(guess: &AnnotatedGuess) -> AnnotatedGuess {
    let mut tokens = guess.tokens().to_vec();
    let mut markers = guess.markers().to_vec();
    let mut ends = guess.word_end().to_vec();
    tokens.push(EOS);
    markers.push(false);
    ends.push(true);
    AnnotatedGuess::new(tokens, markers, ends).expect("appending a whole unmarked word keeps the invariants")
}
