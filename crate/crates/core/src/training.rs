//! Nesterov-momentum SGD on the summed negative log-likelihood.
//!
//! Each sentence is differentiated on its own tape; per-sentence gradients
//! are summed in index order and scaled by the batch's token count, so
//! results do not depend on how many threads run the tapes.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::kernels::log_sum_exp;
use crate::autodiff::{Array, Gradients, Scalar, Tape};
use crate::model::{Example, Model, ModelError, ModelParameters, Network};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("validation loss {valid:.4} exceeds {factor}x the initial {initial:.4}; training diverged")]
    Diverged { valid: f64, initial: f64, factor: f64 },
    #[error("reference length {reference} does not match {rows} logit rows")]
    LengthMismatch { reference: usize, rows: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Target tokens per batch.
    pub batch_tokens: usize,
    pub max_epochs: usize,
    pub max_updates: Option<usize>,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Validate every this many updates; `None` validates once per epoch.
    pub valid_interval: Option<usize>,
    /// Training stops once annealing pushes the rate below this.
    pub min_lr: f64,
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.25,
            momentum: 0.99,
            batch_tokens: 400,
            max_epochs: 10,
            max_updates: None,
            clip_norm: 0.1,
            seed: 1,
            valid_interval: None,
            min_lr: 1e-4,
            divergence_factor: 10.0,
        }
    }
}

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_tokens == 0 {
            return Err(TrainError::Config("batch_tokens must be positive".into()));
        }
        if self.clip_norm < 0.0 {
            return Err(TrainError::Config("clip_norm must be non-negative".into()));
        }
        if self.valid_interval == Some(0) {
            return Err(TrainError::Config("valid_interval must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn apply(mut self, text: &str) -> Result<Self, TrainError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "lr" => self.lr = parse_field(key, value)?,
                "momentum" => self.momentum = parse_field(key, value)?,
                "batch_tokens" => self.batch_tokens = parse_field(key, value)?,
                "max_epochs" => self.max_epochs = parse_field(key, value)?,
                "max_updates" => self.max_updates = Some(parse_field(key, value)?),
                "clip_norm" => self.clip_norm = parse_field(key, value)?,
                "seed" => self.seed = parse_field(key, value)?,
                "valid_interval" => self.valid_interval = Some(parse_field(key, value)?),
                "min_lr" => self.min_lr = parse_field(key, value)?,
                "divergence_factor" => self.divergence_factor = parse_field(key, value)?,
                _ => return Err(TrainError::Config(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        Self::default().apply(text)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "batch_tokens = {}", self.batch_tokens);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        if let Some(u) = self.max_updates {
            let _ = writeln!(s, "max_updates = {u}");
        }
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(v) = self.valid_interval {
            let _ = writeln!(s, "valid_interval = {v}");
        }
        let _ = writeln!(s, "min_lr = {}", self.min_lr);
        let _ = writeln!(s, "divergence_factor = {}", self.divergence_factor);
        s
    }
}

/// Summed NLL of `reference` under row-wise softmax of `logits`; rows whose
/// reference is `pad` contribute zero.
pub fn nll_loss<T: Scalar>(logits: &Array<T>, reference: &[usize], pad: Option<usize>) -> Result<f64, TrainError> {
    if logits.shape().len() != 2 || logits.rows() != reference.len() {
        return Err(TrainError::LengthMismatch {
            reference: reference.len(),
            rows: logits.shape().first().copied().unwrap_or(0),
        });
    }
    let mut total = 0.0;
    for (t, &y) in reference.iter().enumerate() {
        if Some(y) == pad {
            continue;
        }
        let row: Vec<f64> = logits.row(t).iter().map(|v| v.as_f64()).collect();
        let y_logit = *row.get(y).ok_or(TrainError::LengthMismatch {
            reference: y,
            rows: row.len(),
        })?;
        total += log_sum_exp(&row) - y_logit;
    }
    Ok(total)
}

/// Parameters, momentum buffers and bookkeeping of a run.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub params: ModelParameters<T>,
    pub velocity: Vec<Array<T>>,
    pub updates: usize,
    pub best_valid: f64,
    pub lr: f64,
    pub skipped_steps: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParameters<T>, lr: f64) -> Self {
        let velocity = params.arrays.iter().map(|a| Array::zeros(a.shape())).collect();
        Self {
            params,
            velocity,
            updates: 0,
            best_valid: f64::INFINITY,
            lr,
            skipped_steps: 0,
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// One Nesterov step in the stored-parameter form
/// `v ← μv − εg;  θ ← θ + μv − εg`. Non-finite gradients leave the state
/// untouched and return false.
pub fn nesterov_step<T: Scalar>(state: &mut TrainState<T>, grads: &Gradients<T>, momentum: f64) -> bool {
    if !grads.all_finite() {
        state.skipped_steps += 1;
        tracing::warn!(update = state.updates, "skipping step with non-finite gradient");
        return false;
    }
    let (mu, eps) = (T::of(momentum), T::of(state.lr));
    for ((theta, v), g) in state.params.arrays.iter_mut().zip(&mut state.velocity).zip(grads.as_slice()) {
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let step = eps * g;
            *v = mu * *v - step;
            *t += mu * *v - step;
        }
    }
    state.updates += 1;
    true
}

/// Summed loss and gradient of a batch, plus its target token count.
pub fn batch_gradients<T: Scalar>(
    net: &Network,
    params: &[Array<T>],
    batch: &[&Example],
) -> Result<(f64, Gradients<T>, usize), ModelError> {
    let per: Vec<Result<(f64, Gradients<T>), ModelError>> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(params);
            let loss = net.loss(&mut tape, ex)?;
            let value = tape.value(loss).item().as_f64();
            Ok((value, tape.backward(loss)?))
        })
        .collect();
    let mut total = 0.0;
    let mut sum = Gradients::zeros_like(params);
    for r in per {
        let (l, g) = r?;
        total += l;
        sum.accumulate(&g);
    }
    let tokens = batch.iter().map(|e| e.target_tokens()).sum();
    Ok((total, sum, tokens))
}

/// Per-token NLL over `examples` without recording gradients.
pub fn mean_nll<T: Scalar>(net: &Network, params: &[Array<T>], examples: &[Example]) -> Result<f64, ModelError> {
    let losses: Vec<Result<f64, ModelError>> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::inference(params);
            let loss = net.loss(&mut tape, ex)?;
            Ok(tape.value(loss).item().as_f64())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let tokens: usize = examples.iter().map(Example::target_tokens).sum();
    Ok(total / tokens.max(1) as f64)
}

/// Token-budget batches over length-sorted examples. The order of examples
/// and of batches is shuffled from `(seed, epoch)`.
pub fn make_batches(examples: &[Example], batch_tokens: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let len_of = |i: usize| {
        let e = &examples[i];
        e.target.len().max(e.source.len()).max(e.guess.as_ref().map_or(0, |g| g.len()))
    };
    order.sort_by_key(|&i| len_of(i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        let t = examples[i].target_tokens();
        if !current.is_empty() && tokens + t > batch_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        current.push(i);
        tokens += t;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    batches
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub update: usize,
    pub train_nll: f64,
    pub valid_nll: f64,
    pub lr: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("update,train_nll,valid_nll,lr\n");
    for p in points {
        let _ = writeln!(s, "{},{:.6},{:.6},{}", p.update, p.train_nll, p.valid_nll, p.lr);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model with the parameters of the best validation loss.
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub best_valid: f64,
    pub updates: usize,
    pub skipped_steps: usize,
}

/// Trains `model` in place of its current parameters and returns the
/// parameters with the lowest validation NLL seen (including update 0).
pub fn train(model: Model, train_set: &[Example], valid_set: &[Example], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let net = model.network.clone();
    let valid = if valid_set.is_empty() { train_set } else { valid_set };
    let mut state = TrainState::new(model.params.clone(), cfg.lr);
    let initial = mean_nll(&net, &state.params.arrays, valid)?;
    state.best_valid = initial;
    let mut best = state.params.clone();
    let mut curve = vec![CurvePoint {
        update: 0,
        train_nll: f64::NAN,
        valid_nll: initial,
        lr: cfg.lr,
    }];
    tracing::info!(valid_nll = initial, "initial validation");

    let mut window = (0.0f64, 0usize);
    let budget_left = |s: &TrainState<f32>| cfg.max_updates.is_none_or(|m| s.updates < m);
    'epochs: for epoch in 0..cfg.max_epochs {
        let batches = make_batches(train_set, cfg.batch_tokens, cfg.seed, epoch as u64);
        let n_batches = batches.len();
        for (bi, batch) in batches.into_iter().enumerate() {
            if !budget_left(&state) {
                break 'epochs;
            }
            let refs: Vec<&Example> = batch.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads, tokens) = batch_gradients(&net, &state.params.arrays, &refs)?;
            grads.scale(1.0 / tokens as f32);
            clip_gradients(&mut grads, cfg.clip_norm);
            if nesterov_step(&mut state, &grads, cfg.momentum) {
                window.0 += loss;
                window.1 += tokens;
            }

            let end_of_epoch = bi + 1 == n_batches;
            let due = match cfg.valid_interval {
                Some(k) => state.updates.is_multiple_of(k),
                None => end_of_epoch,
            };
            if due || !budget_left(&state) {
                let v = mean_nll(&net, &state.params.arrays, valid)?;
                if !v.is_finite() || v > cfg.divergence_factor * initial {
                    return Err(TrainError::Diverged {
                        valid: v,
                        initial,
                        factor: cfg.divergence_factor,
                    });
                }
                let train_nll = if window.1 > 0 { window.0 / window.1 as f64 } else { f64::NAN };
                window = (0.0, 0);
                if v < state.best_valid {
                    state.best_valid = v;
                    best = state.params.clone();
                } else {
                    state.lr *= 0.5;
                }
                curve.push(CurvePoint {
                    update: state.updates,
                    train_nll,
                    valid_nll: v,
                    lr: state.lr,
                });
                tracing::info!(update = state.updates, train_nll, valid_nll = v, lr = state.lr, "validation");
                if state.lr < cfg.min_lr {
                    break 'epochs;
                }
            }
        }
    }
    let model = Model::from_parts(net.config, best, model.source_vocab, model.target_vocab)?;
    Ok(TrainOutcome {
        model,
        curve,
        best_valid: state.best_valid,
        updates: state.updates,
        skipped_steps: state.skipped_steps,
    })
}
