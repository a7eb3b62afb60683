use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use quickedit::decoding::{decode_batch, DecodeOptions, DecodeRecord};
use quickedit::editsim::{build_dataset, parse_jsonl, to_jsonl, EditTriple, Guesser, MarkingPolicy};
use quickedit::evaluation::{
    curve_csv, curve_svg, feedback_curve, make_synthetic_task, run_protocol, ProtocolModels, Summary, SyntheticTaskSpec,
};
use quickedit::experiment::editor_examples;
use quickedit::model::{Model, ModelConfig, ModelMode};
use quickedit::paraphrase::{paraphrase, MarkerModel};
use quickedit::text::Vocabulary;
use quickedit::training::{self, train, TrainConfig};
use quickedit_cli::files::{corpus_text, read_bitext, read_corpus, read_text, Outputs};
use quickedit_cli::service::{router, AppState, Registry};

const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Parser)]
#[command(name = "quickedit", version, about = "Rewrite sentences around crossed-out words")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic translation task as parallel text files
    MakeTask(MakeTask),
    /// Train the translation model that produces the first guesses
    TrainInitial(TrainInitial),
    /// Decode guesses and mark the words a post-editor would change
    BuildEditsim(BuildEditsim),
    /// Train an editing model on marked guesses
    TrainQuickedit(TrainQuickedit),
    /// Constrained decoding of marked guesses (JSON lines in and out)
    Decode(Decode),
    /// BLEU of the initial system, the constrained baseline and both editors
    Protocol(Protocol),
    /// BLEU against the number of marked words, as CSV and SVG
    Curve(Curve),
    /// Count how often each guess word was marked
    FitMarkers(FitMarkers),
    /// Paraphrase sentences with a monolingual editor and a marker model
    Paraphrase(ParaphraseCmd),
    /// Serve the HTTP JSON interface
    Serve(Serve),
}

#[derive(Args)]
struct MakeTask {
    /// Task settings as `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving {train,valid,test}.{src,tgt} and task.cfg
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOpts {
    /// Training settings as `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Architecture preset
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Training curve CSV to write
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct TrainInitial {
    /// Directory written by make-task
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct BuildEditsim {
    /// Directory written by make-task
    #[arg(long)]
    data: PathBuf,
    /// Initial translation model; without it guesses come from random corruption
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Replacement rate of the corruption guesser
    #[arg(long, default_value_t = 0.3)]
    corruption: f64,
    /// full, bernoulli:P or top:K
    #[arg(long, default_value = "full")]
    marking: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory receiving {train,valid,test}.jsonl
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainQuickedit {
    /// Directory written by build-editsim
    #[arg(long)]
    data: PathBuf,
    /// bilingual or monolingual
    #[arg(long, default_value = "bilingual")]
    mode: String,
    /// Reuse this model's vocabularies instead of building them from the triples
    #[arg(long)]
    vocab_from: Option<PathBuf>,
    #[command(flatten)]
    train: TrainOpts,
}

#[derive(Args)]
struct Decode {
    #[arg(long)]
    model: PathBuf,
    /// Triples as JSON lines; the reference may be empty
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Include attention weights in every record
    #[arg(long)]
    attention: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Protocol {
    #[arg(long)]
    initial: Option<PathBuf>,
    #[arg(long)]
    quickedit: Option<PathBuf>,
    #[arg(long)]
    monolingual: Option<PathBuf>,
    /// Test triples as JSON lines
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Config file whose digest is recorded in the summary
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds recorded in the summary
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Curve {
    /// NAME=CHECKPOINT, repeated per series
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// Triples with full markers as JSON lines
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    k_max: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    svg: PathBuf,
}

#[derive(Args)]
struct FitMarkers {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ParaphraseCmd {
    /// Monolingual editing model
    #[arg(long)]
    model: PathBuf,
    /// Marker model written by fit-markers
    #[arg(long)]
    markers: PathBuf,
    #[arg(long)]
    tau: f64,
    /// One sentence per line
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Serve {
    /// Checkpoint to serve, as PATH or ID=PATH; repeatable
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    #[arg(long)]
    markers: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Beam size when a request does not give one
    #[arg(long, default_value_t = 5)]
    beam: usize,
}

fn train_config(opts: &TrainOpts) -> Result<TrainConfig> {
    let mut cfg = match &opts.config {
        Some(p) => TrainConfig::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_triples(path: &Path) -> Result<Vec<EditTriple>> {
    parse_jsonl(&read_text(path)?).with_context(|| format!("in {}", path.display()))
}

fn split_file(dir: &Path, split: &str, ext: &str) -> PathBuf {
    dir.join(format!("{split}.{ext}"))
}

fn vocab_from_lines<'a>(lines: impl Iterator<Item = &'a Vec<String>>) -> Vocabulary {
    let joined: Vec<String> = lines.map(|l| l.join(" ")).collect();
    Vocabulary::from_corpus(joined.iter().map(String::as_str), None)
}

fn write_trained(out: &mut Outputs, opts: &TrainOpts, outcome: &training::TrainOutcome) -> Result<()> {
    out.write(&opts.out, outcome.model.to_bytes())?;
    if let Some(c) = &opts.curve {
        out.write(c, training::curve_csv(&outcome.curve))?;
    }
    tracing::info!(
        updates = outcome.updates,
        best_valid = outcome.best_valid,
        "wrote {}",
        opts.out.display()
    );
    Ok(())
}

fn make_task(args: &MakeTask, out: &mut Outputs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => SyntheticTaskSpec::parse(&read_text(p)?).with_context(|| format!("in {}", p.display()))?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let task = make_synthetic_task(&spec)?;
    out.create_dir(&args.out)?;
    for (name, bitext) in SPLITS.iter().zip([&task.train, &task.valid, &task.test]) {
        let (src, tgt): (Vec<_>, Vec<_>) = bitext.iter().cloned().unzip();
        out.write(&split_file(&args.out, name, "src"), corpus_text(&src))?;
        out.write(&split_file(&args.out, name, "tgt"), corpus_text(&tgt))?;
    }
    out.write(&args.out.join("task.cfg"), spec.to_file_string())
}

fn train_initial(args: &TrainInitial, out: &mut Outputs) -> Result<()> {
    let cfg = train_config(&args.train)?;
    let [train_set, valid_set] =
        ["train", "valid"].map(|s| read_bitext(&split_file(&args.data, s, "src"), &split_file(&args.data, s, "tgt")));
    let (train_set, valid_set) = (train_set?, valid_set?);
    let sv = vocab_from_lines(train_set.iter().map(|(s, _)| s));
    let tv = vocab_from_lines(train_set.iter().map(|(_, t)| t));
    let config = ModelConfig::preset(&args.train.preset, ModelMode::Translation, sv.len(), tv.len())?;
    let model = Model::new(config, Some(sv), tv, cfg.seed)?;
    let examples = |b: &[(Vec<String>, Vec<String>)]| -> Result<Vec<_>> { b.iter().map(|(s, t)| Ok(model.example(s, None, t)?)).collect() };
    let (tr, va) = (examples(&train_set)?, examples(&valid_set)?);
    let outcome = train(model.clone(), &tr, &va, &cfg)?;
    write_trained(out, &args.train, &outcome)
}

fn parse_marking(s: &str) -> Result<MarkingPolicy> {
    let policy = match s.split_once(':') {
        None if s == "full" => MarkingPolicy::Full,
        Some(("bernoulli", p)) => MarkingPolicy::Bernoulli(p.parse().context("bernoulli probability")?),
        Some(("top", k)) => MarkingPolicy::TopK(k.parse().context("top-k count")?),
        _ => bail!("marking must be full, bernoulli:P or top:K, got {s:?}"),
    };
    policy.validate()?;
    Ok(policy)
}

fn build_editsim(args: &BuildEditsim, out: &mut Outputs) -> Result<()> {
    let policy = parse_marking(&args.marking)?;
    let model = args.model.as_deref().map(load_model).transpose()?;
    let splits = SPLITS
        .iter()
        .map(|s| read_bitext(&split_file(&args.data, s, "src"), &split_file(&args.data, s, "tgt")))
        .collect::<Result<Vec<_>>>()?;
    let vocabulary: Vec<String> = vocab_from_lines(splits[0].iter().map(|(_, t)| t)).ordinary().to_vec();
    let guesser = match &model {
        Some(m) => Guesser::Model { model: m, beam: args.beam },
        None => Guesser::Synthetic {
            vocabulary: &vocabulary,
            rate: args.corruption,
        },
    };
    out.create_dir(&args.out)?;
    for (name, bitext) in SPLITS.iter().zip(&splits) {
        let built = build_dataset(bitext, guesser, policy, args.seed)?;
        if !built.skipped.is_empty() {
            tracing::warn!(split = name, skipped = built.skipped.len(), "sentences without a guess");
        }
        out.write(&split_file(&args.out, name, "jsonl"), to_jsonl(&built.triples))?;
    }
    Ok(())
}

fn train_quickedit(args: &TrainQuickedit, out: &mut Outputs) -> Result<()> {
    let mode: ModelMode = args.mode.parse()?;
    if mode == ModelMode::Translation {
        bail!("editing models are bilingual or monolingual");
    }
    let cfg = train_config(&args.train)?;
    let train_set = load_triples(&split_file(&args.data, "train", "jsonl"))?;
    let valid_set = load_triples(&split_file(&args.data, "valid", "jsonl"))?;
    let (sv, tv) = match &args.vocab_from {
        Some(p) => {
            let m = load_model(p)?;
            let sv = m.source_vocab.context("vocabulary model has no source vocabulary")?;
            (sv, m.target_vocab)
        }
        None => (
            vocab_from_lines(train_set.iter().map(|t| &t.source)),
            vocab_from_lines(train_set.iter().flat_map(|t| [&t.guess, &t.reference])),
        ),
    };
    let config = ModelConfig::preset(&args.train.preset, mode, sv.len(), tv.len())?;
    let model = Model::new(config, Some(sv), tv, cfg.seed)?;
    let tr = editor_examples(&model, &train_set)?;
    let va = editor_examples(&model, &valid_set)?;
    let outcome = train(model, &tr, &va, &cfg)?;
    write_trained(out, &args.train, &outcome)
}

fn decode_cmd(args: &Decode, out: &mut Outputs) -> Result<()> {
    let model = load_model(&args.model)?;
    let triples = load_triples(&args.input)?;
    let items = triples.iter().map(|t| t.decode_item(&model)).collect::<Result<Vec<_>, _>>()?;
    let opts = DecodeOptions {
        beam: args.beam,
        record_attention: args.attention,
        ..DecodeOptions::default()
    };
    let mut text = String::new();
    for (i, r) in decode_batch(&model, &items, &opts).into_iter().enumerate() {
        let h = r.with_context(|| format!("decoding line {}", i + 1))?;
        text.push_str(&serde_json::to_string(&DecodeRecord::from(&h))?);
        text.push('\n');
    }
    out.write(&args.out, text)
}

fn protocol(args: &Protocol, out: &mut Outputs) -> Result<()> {
    let load = |p: &Option<PathBuf>| p.as_deref().map(load_model).transpose();
    let (initial, quickedit, monolingual) = (load(&args.initial)?, load(&args.quickedit)?, load(&args.monolingual)?);
    let test = load_triples(&args.data)?;
    let opts = DecodeOptions {
        beam: args.beam,
        ..DecodeOptions::default()
    };
    let report = run_protocol(
        ProtocolModels {
            initial: initial.as_ref(),
            quickedit: quickedit.as_ref(),
            monolingual: monolingual.as_ref(),
        },
        &test,
        &opts,
    )?;
    let config = args.config.as_deref().map(read_text).transpose()?.unwrap_or_default();
    let summary = Summary::new(&report, &config, args.seed.clone());
    for m in &summary.missing {
        tracing::warn!(system = %m, "no model given; row omitted");
    }
    out.write(&args.out, serde_json::to_string_pretty(&summary)? + "\n")
}

fn curve(args: &Curve, out: &mut Outputs) -> Result<()> {
    let mut named = Vec::new();
    for spec in &args.models {
        let (name, path) = spec
            .split_once('=')
            .with_context(|| format!("expected NAME=CHECKPOINT, got {spec:?}"))?;
        named.push((name.to_string(), load_model(Path::new(path))?));
    }
    let triples = load_triples(&args.data)?;
    let refs: Vec<(&str, &Model)> = named.iter().map(|(n, m)| (n.as_str(), m)).collect();
    let opts = DecodeOptions {
        beam: args.beam,
        ..DecodeOptions::default()
    };
    let series = feedback_curve(&refs, &triples, args.k_max, args.seed, &opts)?;
    out.write(&args.csv, curve_csv(&series))?;
    out.write(&args.svg, curve_svg(&series))
}

fn fit_markers(args: &FitMarkers, out: &mut Outputs) -> Result<()> {
    let model = MarkerModel::fit(&load_triples(&args.data)?)?;
    out.write(&args.out, model.to_tsv())
}

#[derive(Serialize)]
struct ParaphraseRecord {
    sentence: String,
    markers: Vec<u8>,
    output: String,
    boldness: f64,
    flagged: bool,
    score: f64,
}

fn paraphrase_cmd(args: &ParaphraseCmd, out: &mut Outputs) -> Result<()> {
    let model = load_model(&args.model)?;
    let markers = MarkerModel::parse_tsv(&read_text(&args.markers)?).with_context(|| format!("in {}", args.markers.display()))?;
    let opts = DecodeOptions {
        beam: args.beam,
        ..DecodeOptions::default()
    };
    let mut text = String::new();
    for (i, sentence) in read_corpus(&args.input)?.iter().enumerate() {
        let p = paraphrase(&model, &markers, sentence, args.tau, &opts).with_context(|| format!("line {}", i + 1))?;
        let rec = ParaphraseRecord {
            sentence: sentence.join(" "),
            markers: p.markers.iter().map(|&m| u8::from(m)).collect(),
            output: p.output.join(" "),
            boldness: p.boldness,
            flagged: p.flagged,
            score: p.score,
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    out.write(&args.out, text)
}

fn load_registry(models: &[String], markers: Option<&Path>) -> Result<Registry> {
    let mut registry = Registry::new();
    for spec in models {
        let (id, path) = match spec.split_once('=') {
            Some((id, p)) => (id.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string();
                (id, p)
            }
        };
        registry = registry.with_model(id, load_model(&path)?);
    }
    if let Some(p) = markers {
        registry = registry.with_markers(MarkerModel::parse_tsv(&read_text(p)?).with_context(|| format!("in {}", p.display()))?);
    }
    Ok(registry)
}

fn serve(args: &Serve) -> Result<()> {
    let registry = load_registry(&args.models, args.markers.as_deref())?;
    let state = AppState::new(registry, args.beam);
    let addr = SocketAddr::new(args.host, args.port);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        tracing::info!("listening on {}", listener.local_addr()?);
        #[cfg(unix)]
        {
            // SIGHUP reloads every checkpoint; a failed reload keeps the old set
            let state = state.clone();
            let (models, markers) = (args.models.clone(), args.markers.clone());
            let mut hup = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::hangup())?;
            tokio::spawn(async move {
                while hup.recv().await.is_some() {
                    match load_registry(&models, markers.as_deref()) {
                        Ok(r) => {
                            state.replace(r);
                            tracing::info!("models reloaded");
                        }
                        Err(e) => tracing::error!("reload failed: {e:#}"),
                    }
                }
            });
        }
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut out = Outputs::new();
    match &cli.command {
        Command::MakeTask(a) => make_task(a, &mut out)?,
        Command::TrainInitial(a) => train_initial(a, &mut out)?,
        Command::BuildEditsim(a) => build_editsim(a, &mut out)?,
        Command::TrainQuickedit(a) => train_quickedit(a, &mut out)?,
        Command::Decode(a) => decode_cmd(a, &mut out)?,
        Command::Protocol(a) => protocol(a, &mut out)?,
        Command::Curve(a) => curve(a, &mut out)?,
        Command::FitMarkers(a) => fit_markers(a, &mut out)?,
        Command::Paraphrase(a) => paraphrase_cmd(a, &mut out)?,
        Command::Serve(a) => serve(a)?,
    }
    out.commit();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
