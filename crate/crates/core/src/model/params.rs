use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerSpec, ModelConfig};
use super::ModelError;
use crate::autodiff::{Array, Scalar};

/// Slot indices of a weight matrix and its bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearSlots {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSlots {
    pub weight: usize,
    pub bias: usize,
    /// Bias-free projection of the residual when the width changes.
    pub residual: Option<usize>,
    pub spec: LayerSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderSlots {
    pub token: usize,
    /// One table for the source; two for the guess (marker 0, marker 1).
    pub position: Vec<usize>,
    /// `None` for a zero-layer (identity) encoder.
    pub proj_in: Option<LinearSlots>,
    pub layers: Vec<ConvSlots>,
    pub proj_out: Option<LinearSlots>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderLayerSlots {
    pub conv: ConvSlots,
    /// Hidden state → query in embedding space.
    pub attn_in: LinearSlots,
    /// Attended summary → hidden state.
    pub attn_out: LinearSlots,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderSlots {
    pub token: usize,
    pub position: usize,
    pub proj_in: LinearSlots,
    pub layers: Vec<DecoderLayerSlots>,
    pub proj_out: LinearSlots,
    pub output: LinearSlots,
}

/// Named parameter slots in a fixed order derived from a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub source: Option<EncoderSlots>,
    pub guess: Option<EncoderSlots>,
    pub decoder: DecoderSlots,
    pub entries: Vec<(String, Vec<usize>, Init)>,
}

/// Initialization rule for one slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Embedding,
    /// Uniform in `±sqrt(3 / fan_in)`.
    FanIn(usize),
    Zero,
}

struct Builder {
    entries: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn slot(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape, init));
        self.entries.len() - 1
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize) -> LinearSlots {
        LinearSlots {
            weight: self.slot(format!("{prefix}.weight"), vec![input, output], Init::FanIn(input)),
            bias: self.slot(format!("{prefix}.bias"), vec![output], Init::Zero),
        }
    }

    fn conv(&mut self, prefix: &str, input: usize, spec: LayerSpec) -> ConvSlots {
        let weight = self.slot(
            format!("{prefix}.conv.weight"),
            vec![spec.kernel, input, 2 * spec.hidden],
            Init::FanIn(spec.kernel * input),
        );
        let bias = self.slot(format!("{prefix}.conv.bias"), vec![2 * spec.hidden], Init::Zero);
        let residual =
            (input != spec.hidden).then(|| self.slot(format!("{prefix}.residual.weight"), vec![input, spec.hidden], Init::FanIn(input)));
        ConvSlots {
            weight,
            bias,
            residual,
            spec,
        }
    }

    fn encoder(&mut self, prefix: &str, cfg: &ModelConfig, vocab: usize, specs: &[LayerSpec], tables: usize) -> EncoderSlots {
        let d = cfg.embed_dim;
        let token = self.slot(format!("{prefix}.embed_tokens"), vec![vocab, d], Init::Embedding);
        let position = (0..tables)
            .map(|m| {
                let name = if tables == 1 {
                    format!("{prefix}.embed_positions")
                } else {
                    format!("{prefix}.embed_positions.marker{m}")
                };
                self.slot(name, vec![cfg.max_positions, d], Init::Embedding)
            })
            .collect();
        if specs.is_empty() {
            return EncoderSlots {
                token,
                position,
                proj_in: None,
                layers: Vec::new(),
                proj_out: None,
            };
        }
        let proj_in = Some(self.linear(&format!("{prefix}.fc1"), d, specs[0].hidden));
        let mut width = specs[0].hidden;
        let mut layers = Vec::new();
        for (i, &spec) in specs.iter().enumerate() {
            layers.push(self.conv(&format!("{prefix}.layers.{i}"), width, spec));
            width = spec.hidden;
        }
        let proj_out = Some(self.linear(&format!("{prefix}.fc2"), width, d));
        EncoderSlots {
            token,
            position,
            proj_in,
            layers,
            proj_out,
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = Builder { entries: Vec::new() };
        let source = cfg
            .source_encoder
            .as_ref()
            .map(|specs| b.encoder("source_encoder", cfg, cfg.source_vocab, specs, 1));
        let guess = cfg
            .guess_encoder
            .as_ref()
            .map(|specs| b.encoder("guess_encoder", cfg, cfg.target_vocab, specs, 2));

        let d = cfg.embed_dim;
        let token = b.slot("decoder.embed_tokens".into(), vec![cfg.target_vocab, d], Init::Embedding);
        let position = b.slot("decoder.embed_positions".into(), vec![cfg.max_positions, d], Init::Embedding);
        let proj_in = b.linear("decoder.fc1", d, cfg.decoder[0].hidden);
        let mut width = cfg.decoder[0].hidden;
        let mut layers = Vec::new();
        for (i, &spec) in cfg.decoder.iter().enumerate() {
            let prefix = format!("decoder.layers.{i}");
            let conv = b.conv(&prefix, width, spec);
            let attn_in = b.linear(&format!("{prefix}.attention.in_proj"), spec.hidden, d);
            let attn_out = b.linear(&format!("{prefix}.attention.out_proj"), d, spec.hidden);
            layers.push(DecoderLayerSlots { conv, attn_in, attn_out });
            width = spec.hidden;
        }
        let proj_out = b.linear("decoder.fc2", width, cfg.out_embed_dim);
        let output = b.linear("decoder.fc3", cfg.out_embed_dim, cfg.target_vocab);
        Ok(Self {
            source,
            guess,
            decoder: DecoderSlots {
                token,
                position,
                proj_in,
                layers,
                proj_out,
                output,
            },
            entries: b.entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Learned weights: one array per layout slot, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T> {
    pub names: Vec<String>,
    pub arrays: Vec<Array<T>>,
}

impl<T: Scalar> ModelParameters<T> {
    /// Seeded initialization: embeddings uniform in ±0.1·√3 (std 0.1),
    /// weights uniform per fan-in, biases zero.
    pub fn init(layout: &Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(layout.len());
        let mut arrays = Vec::with_capacity(layout.len());
        for (name, shape, init) in &layout.entries {
            let mut a = Array::zeros(shape);
            let bound = match *init {
                Init::Embedding => 0.1 * 3f64.sqrt(),
                Init::FanIn(fan_in) => (3.0 / fan_in as f64).sqrt(),
                Init::Zero => 0.0,
            };
            if bound > 0.0 {
                for v in a.data_mut() {
                    *v = T::of(rng.gen_range(-bound..bound));
                }
            }
            names.push(name.clone());
            arrays.push(a);
        }
        Self { names, arrays }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        ModelParameters {
            names: self.names.clone(),
            arrays: self.arrays.iter().map(Array::cast).collect(),
        }
    }

    /// Checks names and shapes slot by slot against `layout`.
    pub fn check_layout(&self, layout: &Layout) -> Result<(), ModelError> {
        if self.arrays.len() != layout.len() || self.names.len() != layout.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter blobs, found {}",
                layout.len(),
                self.arrays.len()
            )));
        }
        for ((name, shape, _), (n, a)) in layout.entries.iter().zip(self.names.iter().zip(&self.arrays)) {
            if name != n {
                return Err(ModelError::Checkpoint(format!("expected parameter {name}, found {n}")));
            }
            if shape.as_slice() != a.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: expected shape {shape:?}, found {:?}",
                    a.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.iter().all(Array::all_finite)
    }

    pub fn count(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }
}
