//! The end-to-end synthetic experiment: task, initial system, simulated
//! post-edits, editing models, protocol table and feedback curve.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoding::DecodeOptions;
use crate::editsim::{build_dataset, resample, EditError, EditTriple, Guesser, MarkingPolicy};
use crate::evaluation::{
    feedback_curve, make_synthetic_task, run_protocol, CurveSeries, EvalError, ProtocolModels, ProtocolReport, SyntheticTask,
    SyntheticTaskSpec,
};
use crate::model::{Example, Model, ModelConfig, ModelError, ModelMode};
use crate::text::{Tokenizer, Vocabulary};
use crate::training::{train, CurvePoint as TrainPoint, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub preset: String,
    /// Deliberately short budget so the initial system makes mistakes.
    pub initial: TrainConfig,
    pub editor: TrainConfig,
    pub beam: usize,
    pub k_max: usize,
    pub curve: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            preset: "toy".into(),
            initial: TrainConfig {
                max_updates: Some(300),
                valid_interval: Some(100),
                ..TrainConfig::default()
            },
            editor: TrainConfig {
                max_epochs: 8,
                ..TrainConfig::default()
            },
            beam: 5,
            k_max: 8,
            curve: true,
        }
    }
}

/// Vocabularies built from the training split.
pub fn vocabularies(task: &SyntheticTask) -> (Vocabulary, Vocabulary) {
    let src: Vec<String> = task.train.iter().map(|(s, _)| s.join(" ")).collect();
    let tgt: Vec<String> = task.train.iter().map(|(_, t)| t.join(" ")).collect();
    (
        Vocabulary::from_corpus(src.iter().map(String::as_str), None),
        Vocabulary::from_corpus(tgt.iter().map(String::as_str), None),
    )
}

fn translation_examples(model: &Model, bitext: &[(Vec<String>, Vec<String>)]) -> Vec<Example> {
    let src = model.source_vocab.as_ref().expect("translation model has a source vocabulary");
    bitext
        .iter()
        .map(|(s, t)| Example {
            source: src.encode(s),
            guess: None,
            target: model.target_vocab.encode(t),
        })
        .collect()
}

pub fn editor_examples(model: &Model, triples: &[EditTriple]) -> Result<Vec<Example>, EditError> {
    let target = Tokenizer::word_level(model.target_vocab.clone());
    let source = match (&model.source_vocab, model.mode().uses_source()) {
        (Some(v), true) => Some(Tokenizer::word_level(v.clone())),
        _ => None,
    };
    triples.iter().map(|t| t.to_example(source.as_ref(), &target)).collect()
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub curve: Vec<TrainPoint>,
}

pub fn train_initial(task: &SyntheticTask, preset: &str, cfg: &TrainConfig, seed: u64) -> Result<Trained, ExperimentError> {
    let (sv, tv) = vocabularies(task);
    let config = ModelConfig::preset(preset, ModelMode::Translation, sv.len(), tv.len())?;
    let model = Model::new(config, Some(sv), tv, seed)?;
    let train_set = translation_examples(&model, &task.train);
    let valid_set = translation_examples(&model, &task.valid);
    let out = train(model, &train_set, &valid_set, cfg)?;
    Ok(Trained {
        model: out.model,
        curve: out.curve,
    })
}

/// Editing model trained from scratch on simulated post-edits.
pub fn train_editor(
    mode: ModelMode,
    vocabs: (Vocabulary, Vocabulary),
    preset: &str,
    train_triples: &[EditTriple],
    valid_triples: &[EditTriple],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained, ExperimentError> {
    let (sv, tv) = vocabs;
    let config = ModelConfig::preset(preset, mode, sv.len(), tv.len())?;
    let model = Model::new(config, Some(sv), tv, seed)?;
    let train_set = editor_examples(&model, train_triples)?;
    let valid_set = editor_examples(&model, valid_triples)?;
    let out = train(model, &train_set, &valid_set, cfg)?;
    Ok(Trained {
        model: out.model,
        curve: out.curve,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EditSplits {
    pub train: Vec<EditTriple>,
    pub valid: Vec<EditTriple>,
    pub test: Vec<EditTriple>,
}

/// Guesses from beam decoding with `initial`, fully marked.
pub fn simulate_post_edits(task: &SyntheticTask, initial: &Model, beam: usize, seed: u64) -> Result<EditSplits, ExperimentError> {
    let guesser = Guesser::Model { model: initial, beam };
    let run = |b: &[(Vec<String>, Vec<String>)]| build_dataset(b, guesser, MarkingPolicy::Full, seed).map(|d| d.triples);
    Ok(EditSplits {
        train: run(&task.train)?,
        valid: run(&task.valid)?,
        test: run(&task.test)?,
    })
}

/// Fraction of guess tokens matching the reference token at the same position.
pub fn guess_accuracy(triples: &[EditTriple]) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for t in triples {
        total += t.reference.len().max(t.guess.len());
        hit += t.guess.iter().zip(&t.reference).filter(|(a, b)| a == b).count();
    }
    hit as f64 / total.max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub protocol: ProtocolReport,
    pub curve: Vec<CurveSeries>,
    pub marked_fraction: f64,
    pub guess_accuracy: f64,
}

pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub initial: Trained,
    pub quickedit: Trained,
    pub monolingual: Trained,
    pub splits: EditSplits,
}

/// Runs every stage for one seed. All randomness derives from `seed`.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentRun, ExperimentError> {
    let task = make_synthetic_task(&SyntheticTaskSpec { seed, ..cfg.task.clone() })?;
    let with_seed = |c: &TrainConfig, k: u64| TrainConfig {
        seed: seed * 100 + k,
        ..c.clone()
    };
    let initial = train_initial(&task, &cfg.preset, &with_seed(&cfg.initial, 1), seed * 100 + 1)?;
    tracing::info!(seed, "initial system trained");
    let splits = simulate_post_edits(&task, &initial.model, cfg.beam, seed)?;
    let vocabs = || {
        (
            initial
                .model
                .source_vocab
                .clone()
                .expect("translation model has a source vocabulary"),
            initial.model.target_vocab.clone(),
        )
    };
    let editor = |mode, triples: &[EditTriple], valid: &[EditTriple], k| {
        train_editor(
            mode,
            vocabs(),
            &cfg.preset,
            triples,
            valid,
            &with_seed(&cfg.editor, k),
            seed * 100 + k,
        )
    };
    let quickedit = editor(ModelMode::Bilingual, &splits.train, &splits.valid, 2)?;
    tracing::info!(seed, "bilingual editor trained");
    let monolingual = editor(ModelMode::Monolingual, &splits.train, &splits.valid, 3)?;
    tracing::info!(seed, "monolingual editor trained");

    let opts = DecodeOptions {
        beam: cfg.beam,
        ..DecodeOptions::default()
    };
    let protocol = run_protocol(
        ProtocolModels {
            initial: Some(&initial.model),
            quickedit: Some(&quickedit.model),
            monolingual: Some(&monolingual.model),
        },
        &splits.test,
        &opts,
    )?;

    let curve = if cfg.curve {
        let qe25_train = resample(&splits.train, MarkingPolicy::Bernoulli(0.25), seed * 100 + 25);
        let qe25_valid = resample(&splits.valid, MarkingPolicy::Bernoulli(0.25), seed * 100 + 26);
        let qe25 = editor(ModelMode::Bilingual, &qe25_train, &qe25_valid, 4)?;
        let qe50_train = resample(&splits.train, MarkingPolicy::Bernoulli(0.5), seed * 100 + 50);
        let qe50_valid = resample(&splits.valid, MarkingPolicy::Bernoulli(0.5), seed * 100 + 51);
        let qe50 = editor(ModelMode::Bilingual, &qe50_train, &qe50_valid, 5)?;
        tracing::info!(seed, "partial-feedback editors trained");
        feedback_curve(
            &[
                ("baseline", &initial.model),
                ("QE25", &qe25.model),
                ("QE50", &qe50.model),
                ("QE100", &quickedit.model),
            ],
            &splits.valid,
            cfg.k_max,
            seed,
            &opts,
        )?
    } else {
        Vec::new()
    };

    let marked: usize = splits.test.iter().map(EditTriple::marked_count).sum();
    let tokens: usize = splits.test.iter().map(|t| t.guess.len()).sum();
    let report = ExperimentReport {
        seed,
        protocol,
        curve,
        marked_fraction: marked as f64 / tokens.max(1) as f64,
        guess_accuracy: guess_accuracy(&splits.test),
    };
    Ok(ExperimentRun {
        report,
        initial,
        quickedit,
        monolingual,
        splits,
    })
}
