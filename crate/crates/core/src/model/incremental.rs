//! Tape-free, one-token-at-a-time decoder for beam search.
//!
//! Encoders run once on an inference tape; each decoder step then only
//! touches the new position, keeping the last `kernel − 1` inputs of every
//! layer as state. The arithmetic follows the tape forward pass operation
//! by operation, so step log-probabilities match the batched logits.

use super::network::{with_eos, Network, SQRT_HALF};
use super::params::LinearSlots;
use super::ModelError;
use crate::autodiff::kernels::{dot, glu_row, log_sum_exp, softmax_in_place, vec_mat};
use crate::autodiff::{Array, Scalar, Tape};
use crate::text::{AnnotatedGuess, BOS, EOS};

#[derive(Clone, Debug)]
struct EncodedPath<T> {
    keys: Array<T>,
    values: Array<T>,
}

/// Attention weights of one decoder step, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAttention {
    pub source: Vec<Option<Vec<f32>>>,
    pub guess: Vec<Option<Vec<f32>>>,
}

/// Decoder state after consuming a prefix.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    /// Number of consumed tokens (including `<s>`).
    pub step: usize,
    history: Vec<Vec<T>>,
    /// Log-probabilities of the next token.
    pub log_probs: Vec<f64>,
    pub attention: Vec<StepAttention>,
}

pub struct IncrementalDecoder<'m, T: Scalar> {
    net: &'m Network,
    params: &'m [Array<T>],
    source: Option<EncodedPath<T>>,
    guess: Option<EncodedPath<T>>,
    record_attention: bool,
}

fn affine<T: Scalar>(params: &[Array<T>], s: LinearSlots, x: &[T]) -> Vec<T> {
    let mut out = params[s.bias].data().to_vec();
    vec_mat(x, params[s.weight].data(), &mut out);
    out
}

fn attend_one<T: Scalar>(path: &EncodedPath<T>, query: &[T]) -> (Vec<T>, Vec<T>) {
    let len = path.keys.rows();
    let mut weights: Vec<T> = (0..len).map(|i| dot(query, path.keys.row(i))).collect();
    softmax_in_place(&mut weights);
    let mut summary = vec![T::zero(); path.values.cols()];
    for (i, &w) in weights.iter().enumerate() {
        if w == T::zero() {
            continue;
        }
        for (s, &v) in summary.iter_mut().zip(path.values.row(i)) {
            *s += w * v;
        }
    }
    (weights, summary)
}

impl<'m, T: Scalar> IncrementalDecoder<'m, T> {
    /// Encodes the inputs the network's mode reads. `source` and `guess`
    /// exclude the end-of-sentence token, which is appended here.
    pub fn new(
        net: &'m Network,
        params: &'m [Array<T>],
        source: Option<&[usize]>,
        guess: Option<&AnnotatedGuess>,
    ) -> Result<Self, ModelError> {
        let mut tape = Tape::inference(params);
        let source = if net.mode().uses_source() {
            let mut ids = source.ok_or(ModelError::MissingSource)?.to_vec();
            ids.push(EOS);
            let enc = net.encode_source(&mut tape, &ids)?;
            Some(EncodedPath {
                keys: tape.value(enc.keys).clone(),
                values: tape.value(enc.values).clone(),
            })
        } else {
            None
        };
        let guess = if net.mode().uses_guess() {
            let g = guess.ok_or(ModelError::MissingGuess)?;
            let enc = net.encode_guess(&mut tape, &with_eos(g))?;
            Some(EncodedPath {
                keys: tape.value(enc.keys).clone(),
                values: tape.value(enc.values).clone(),
            })
        } else {
            None
        };
        Ok(Self {
            net,
            params,
            source,
            guess,
            record_attention: false,
        })
    }

    pub fn with_attention(mut self, record: bool) -> Self {
        self.record_attention = record;
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.net.config.target_vocab
    }

    /// State after consuming `<s>`.
    pub fn start(&self) -> Result<DecoderState<T>, ModelError> {
        let history = self
            .net
            .layout
            .decoder
            .layers
            .iter()
            .map(|l| {
                let width = self.params[l.conv.weight].shape()[1];
                vec![T::zero(); (l.conv.spec.kernel - 1) * width]
            })
            .collect();
        let empty = DecoderState {
            step: 0,
            history,
            log_probs: Vec::new(),
            attention: Vec::new(),
        };
        self.advance(&empty, BOS)
    }

    /// Consumes `token` and computes the next-token distribution.
    pub fn advance(&self, state: &DecoderState<T>, token: usize) -> Result<DecoderState<T>, ModelError> {
        let cfg = &self.net.config;
        let slots = &self.net.layout.decoder;
        let p = self.params;
        let t = state.step;
        if t >= cfg.max_positions {
            return Err(ModelError::PositionOverflow {
                len: t + 1,
                max: cfg.max_positions,
            });
        }
        if token >= cfg.target_vocab {
            return Err(ModelError::TokenOutOfRange {
                id: token,
                vocab: cfg.target_vocab,
            });
        }
        let half = T::of(0.5);
        let sqrt_half = T::of(SQRT_HALF);

        let g: Vec<T> = p[slots.token]
            .row(token)
            .iter()
            .zip(p[slots.position].row(t))
            .map(|(&a, &b)| a + b)
            .collect();
        let mut x = affine(p, slots.proj_in, &g);
        let mut history = Vec::with_capacity(slots.layers.len());
        let mut step_att = StepAttention {
            source: Vec::new(),
            guess: Vec::new(),
        };

        for (l, layer) in slots.layers.iter().enumerate() {
            let conv = &layer.conv;
            let k = conv.spec.kernel;
            let width = x.len();
            let residual = match conv.residual {
                Some(r) => {
                    let mut out = vec![T::zero(); conv.spec.hidden];
                    vec_mat(&x, p[r].data(), &mut out);
                    out
                }
                None => x.clone(),
            };
            let w = p[conv.weight].data();
            let tap_size = width * 2 * conv.spec.hidden;
            let mut pre = p[conv.bias].data().to_vec();
            let hist = &state.history[l];
            for tap in 0..k {
                let row = if tap + 1 < k {
                    &hist[tap * width..(tap + 1) * width]
                } else {
                    &x[..]
                };
                vec_mat(row, &w[tap * tap_size..(tap + 1) * tap_size], &mut pre);
            }
            let mut new_hist = Vec::with_capacity(hist.len());
            if k > 1 {
                new_hist.extend_from_slice(&hist[width..]);
                new_hist.extend_from_slice(&x);
            }
            history.push(new_hist);

            let mut y = vec![T::zero(); conv.spec.hidden];
            glu_row(&pre, &mut y);

            let mut q = affine(p, layer.attn_in, &y);
            for (qv, &gv) in q.iter_mut().zip(&g) {
                *qv = (*qv + gv) * sqrt_half;
            }
            let src = self.source.as_ref().map(|e| attend_one(e, &q));
            let gss = self.guess.as_ref().map(|e| attend_one(e, &q));
            let summary: Vec<T> = match (&src, &gss) {
                (Some((_, s)), Some((_, gs))) => s.iter().zip(gs).map(|(&a, &b)| a * half + b * half).collect(),
                (Some((_, s)), None) => s.clone(),
                (None, Some((_, gs))) => gs.clone(),
                (None, None) => return Err(ModelError::EmptyEncoderOutput),
            };
            if self.record_attention {
                let to_f32 = |w: &Vec<T>| w.iter().map(|v| v.as_f64() as f32).collect::<Vec<f32>>();
                step_att.source.push(src.as_ref().map(|(w, _)| to_f32(w)));
                step_att.guess.push(gss.as_ref().map(|(w, _)| to_f32(w)));
            }
            let back = affine(p, layer.attn_out, &summary);
            x = y
                .iter()
                .zip(&back)
                .zip(&residual)
                .map(|((&yv, &bv), &rv)| ((yv + bv) * sqrt_half + rv) * sqrt_half)
                .collect();
        }
        let h = affine(p, slots.proj_out, &x);
        let logits = affine(p, slots.output, &h);
        let logits64: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
        let lse = log_sum_exp(&logits64);
        let log_probs = logits64.iter().map(|&z| z - lse).collect();

        let mut attention = state.attention.clone();
        if self.record_attention {
            attention.push(step_att);
        }
        Ok(DecoderState {
            step: t + 1,
            history,
            log_probs,
            attention,
        })
    }
}
