//! Corpus BLEU, the synthetic desk-scale task, the simulated post-edit
//! protocol and the marks-versus-BLEU feedback curve.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::decoding::{decode_batch, DecodeItem, DecodeOptions};
use crate::editsim::{sentence_rng, subsample_markers, EditError, EditTriple, MarkingPolicy};
use crate::model::{Model, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("{hypotheses} hypotheses for {references} references")]
    CountMismatch { hypotheses: usize, references: usize },
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-4 with clipped n-gram counts and no smoothing.
pub fn bleu4<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<R>]) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::CountMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        if totals[n] > 0 {
            precisions[n] = matches[n] as f64 / totals[n] as f64;
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if precisions.contains(&0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

pub type Bitext = Vec<(Vec<String>, Vec<String>)>;

/// Desk-scale stand-in for a translation corpus. Source sentences come from
/// a seeded sparse bigram chain over `w0..w{vocab-1}`; targets map every
/// token through a seeded bijection and then swap adjacent pairs. With
/// `synonym_rate > 0` each target occurrence of concept `j` is written
/// `v{j}` instead of `w{j}` with that probability, so the reference is not
/// a function of the source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Identity bijection when false.
    pub permute: bool,
    /// Adjacent-pair swaps when true.
    pub swap_pairs: bool,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Likely successors per token in the source chain.
    pub branching: usize,
    /// Probability of leaving the successor list for a uniform token.
    pub jump: f64,
    pub corruption: f64,
    pub synonym_rate: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            min_len: 5,
            max_len: 15,
            seed: 1,
            permute: true,
            swap_pairs: true,
            train: 8000,
            valid: 500,
            test: 500,
            branching: 4,
            jump: 0.1,
            corruption: 0.3,
            synonym_rate: 0.3,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Spec(m.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 0 < min_len <= max_len");
        }
        if self.branching == 0 || self.branching > self.vocab_size {
            return bad("branching must be in 1..=vocab_size");
        }
        if [self.jump, self.corruption, self.synonym_rate]
            .iter()
            .any(|p| !(0.0..=1.0).contains(p))
        {
            return bad("jump, corruption and synonym_rate must be in [0, 1]");
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`, in the same format as
    /// the training config.
    pub fn apply(mut self, text: &str) -> Result<Self, EvalError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, EvalError> {
            value.parse().map_err(|_| EvalError::Spec(format!("{key}: cannot parse {value:?}")))
        }
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| EvalError::Spec(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "vocab_size" => self.vocab_size = num(key, value)?,
                "min_len" => self.min_len = num(key, value)?,
                "max_len" => self.max_len = num(key, value)?,
                "seed" => self.seed = num(key, value)?,
                "permute" => self.permute = num(key, value)?,
                "swap_pairs" => self.swap_pairs = num(key, value)?,
                "train" => self.train = num(key, value)?,
                "valid" => self.valid = num(key, value)?,
                "test" => self.test = num(key, value)?,
                "branching" => self.branching = num(key, value)?,
                "jump" => self.jump = num(key, value)?,
                "corruption" => self.corruption = num(key, value)?,
                "synonym_rate" => self.synonym_rate = num(key, value)?,
                _ => return Err(EvalError::Spec(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        Self::default().apply(text)
    }

    pub fn to_file_string(&self) -> String {
        format!(
            "vocab_size = {}\nmin_len = {}\nmax_len = {}\nseed = {}\npermute = {}\nswap_pairs = {}\ntrain = {}\nvalid = {}\ntest = {}\nbranching = {}\njump = {}\ncorruption = {}\nsynonym_rate = {}\n",
            self.vocab_size,
            self.min_len,
            self.max_len,
            self.seed,
            self.permute,
            self.swap_pairs,
            self.train,
            self.valid,
            self.test,
            self.branching,
            self.jump,
            self.corruption,
            self.synonym_rate
        )
    }

    pub fn token(i: usize) -> String {
        format!("w{i}")
    }

    pub fn synonym(j: usize) -> String {
        format!("v{j}")
    }

    pub fn vocabulary(&self) -> Vec<String> {
        (0..self.vocab_size).map(Self::token).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    /// `bijection[i]` is the target index of source token `i`.
    pub bijection: Vec<usize>,
    pub train: Bitext,
    pub valid: Bitext,
    pub test: Bitext,
}

fn swap_pairs<T: Clone>(xs: &[T]) -> Vec<T> {
    let mut out = xs.to_vec();
    for pair in out.chunks_mut(2) {
        pair.reverse();
    }
    out
}

impl SyntheticTask {
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        let mapped: Vec<usize> = source.iter().map(|&s| self.bijection[s]).collect();
        if self.spec.swap_pairs {
            swap_pairs(&mapped)
        } else {
            mapped
        }
    }

    /// Inverse of [`SyntheticTask::translate`].
    pub fn invert(&self, target: &[usize]) -> Vec<usize> {
        let mut inverse = vec![0; self.bijection.len()];
        for (s, &t) in self.bijection.iter().enumerate() {
            inverse[t] = s;
        }
        let unswapped = if self.spec.swap_pairs {
            swap_pairs(target)
        } else {
            target.to_vec()
        };
        unswapped.iter().map(|&t| inverse[t]).collect()
    }
}

fn parse_token(w: &str) -> Option<usize> {
    w.strip_prefix('w').or_else(|| w.strip_prefix('v'))?.parse().ok()
}

/// Token indices of `w{i}` and `v{i}` words; `None` on anything else.
pub fn token_indices<S: AsRef<str>>(words: &[S]) -> Option<Vec<usize>> {
    words.iter().map(|w| parse_token(w.as_ref())).collect()
}

pub fn make_synthetic_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask, EvalError> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bijection: Vec<usize> = (0..v).collect();
    if spec.permute {
        bijection.shuffle(&mut rng);
    }
    let successors: Vec<Vec<usize>> = (0..v)
        .map(|_| rand::seq::index::sample(&mut rng, v, spec.branching).into_vec())
        .collect();
    let mut task = SyntheticTask {
        spec: spec.clone(),
        bijection,
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    let total = spec.train + spec.valid + spec.test;
    let mut seen = HashSet::with_capacity(total);
    let mut sentences = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > 100 * total.max(1) {
            return Err(EvalError::Spec("cannot draw enough distinct sentences".into()));
        }
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut s = Vec::with_capacity(len);
        s.push(rng.gen_range(0..v));
        while s.len() < len {
            let prev = *s.last().expect("non-empty");
            let next = if rng.gen_bool(spec.jump) {
                rng.gen_range(0..v)
            } else {
                successors[prev][rng.gen_range(0..spec.branching)]
            };
            s.push(next);
        }
        if seen.insert(s.clone()) {
            sentences.push(s);
        }
    }
    let to_words = |ids: &[usize]| ids.iter().map(|&i| SyntheticTaskSpec::token(i)).collect::<Vec<_>>();
    let pairs: Bitext = sentences
        .iter()
        .map(|s| {
            let target = task
                .translate(s)
                .into_iter()
                .map(|j| {
                    if spec.synonym_rate > 0.0 && rng.gen_bool(spec.synonym_rate) {
                        SyntheticTaskSpec::synonym(j)
                    } else {
                        SyntheticTaskSpec::token(j)
                    }
                })
                .collect();
            (to_words(s), target)
        })
        .collect();
    let mut it = pairs.into_iter();
    task.train = it.by_ref().take(spec.train).collect();
    task.valid = it.by_ref().take(spec.valid).collect();
    task.test = it.collect();
    Ok(task)
}

/// Decodes every triple with `model` under its ban set; failed decodes
/// become empty outputs.
pub fn decode_triples(model: &Model, triples: &[EditTriple], opts: &DecodeOptions) -> Result<Vec<Vec<String>>, EvalError> {
    let items = triples
        .iter()
        .map(|t| t.decode_item(model))
        .collect::<Result<Vec<DecodeItem>, _>>()?;
    Ok(decode_batch(model, &items, opts)
        .into_iter()
        .map(|r| r.map(|h| h.words).unwrap_or_default())
        .collect())
}

#[derive(Clone, Copy, Default)]
pub struct ProtocolModels<'a> {
    /// Translation-only system that produced the guesses.
    pub initial: Option<&'a Model>,
    pub quickedit: Option<&'a Model>,
    pub monolingual: Option<&'a Model>,
}

pub const SYSTEMS: [&str; 4] = ["initial", "baseline", "quickedit", "monolingual"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    /// BLEU per system, in [`SYSTEMS`] order; missing systems are absent.
    pub bleu: BTreeMap<String, f64>,
    pub missing: Vec<String>,
}

impl ProtocolReport {
    pub fn get(&self, system: &str) -> Option<f64> {
        self.bleu.get(system).copied()
    }
}

/// BLEU of the guesses (initial), of the initial model re-decoded under the
/// ban sets (baseline), and of both editing models under the ban sets.
pub fn run_protocol(models: ProtocolModels<'_>, test: &[EditTriple], opts: &DecodeOptions) -> Result<ProtocolReport, EvalError> {
    let references: Vec<Vec<String>> = test.iter().map(|t| t.reference.clone()).collect();
    let guesses: Vec<Vec<String>> = test.iter().map(|t| t.guess.clone()).collect();
    let mut report = ProtocolReport {
        bleu: BTreeMap::new(),
        missing: Vec::new(),
    };
    report.bleu.insert("initial".into(), bleu4(&guesses, &references)?.bleu);
    for (name, model) in [
        ("baseline", models.initial),
        ("quickedit", models.quickedit),
        ("monolingual", models.monolingual),
    ] {
        match model {
            Some(m) => {
                let out = decode_triples(m, test, opts)?;
                report.bleu.insert(name.into(), bleu4(&out, &references)?.bleu);
            }
            None => {
                tracing::warn!(system = name, "model missing; row omitted");
                report.missing.push(name.into());
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_marks: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub name: String,
    pub points: Vec<CurvePoint>,
}

/// For k = 1..=k_max, keeps a seeded uniform subset of at most k of each
/// triple's markers and scores every model's constrained decode. Subsets
/// are nested in k because every k reuses the sentence's generator.
pub fn feedback_curve(
    models: &[(&str, &Model)],
    triples: &[EditTriple],
    k_max: usize,
    seed: u64,
    opts: &DecodeOptions,
) -> Result<Vec<CurveSeries>, EvalError> {
    let references: Vec<Vec<String>> = triples.iter().map(|t| t.reference.clone()).collect();
    let mut series: Vec<CurveSeries> = models
        .iter()
        .map(|(n, _)| CurveSeries {
            name: n.to_string(),
            points: Vec::new(),
        })
        .collect();
    for k in 1..=k_max {
        let subset: Vec<EditTriple> = triples
            .iter()
            .enumerate()
            .map(|(i, t)| EditTriple {
                markers: subsample_markers(&t.markers, MarkingPolicy::TopK(k), &mut sentence_rng(seed, i as u64)),
                ..t.clone()
            })
            .collect();
        let mean_marks = subset.iter().map(EditTriple::marked_count).sum::<usize>() as f64 / subset.len().max(1) as f64;
        for (s, (_, model)) in series.iter_mut().zip(models) {
            let out = decode_triples(model, &subset, opts)?;
            s.points.push(CurvePoint {
                k,
                mean_marks,
                bleu: bleu4(&out, &references)?.bleu,
            });
        }
    }
    Ok(series)
}

pub fn curve_csv(series: &[CurveSeries]) -> String {
    let mut s = String::from("model,k,mean_marks,bleu\n");
    for c in series {
        for p in &c.points {
            let _ = writeln!(s, "{},{},{:.4},{:.4}", c.name, p.k, p.mean_marks, p.bleu);
        }
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of BLEU against mean applied marks, one line per series.
pub fn curve_svg(series: &[CurveSeries]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|s| &s.points);
    let (mut x_max, mut y_min, mut y_max) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x_max = x_max.max(p.mean_marks);
        y_min = y_min.min(p.bleu);
        y_max = y_max.max(p.bleu);
    }
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.1).max(0.5);
    let (y_lo, y_hi, x_hi) = ((y_min - pad).max(0.0), y_max + pad, x_max.max(1.0));
    let sx = |x: f64| m + x / x_hi * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y_lo) / (y_hi - y_lo) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for i in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#, m - 6.0, sy(y) + 4.0);
        let x = x_hi * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.2}</text>"#,
            sx(x),
            h - m + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">average marked words per sentence</text>"#,
        w / 2.0,
        h - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">BLEU</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, c) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.mean_marks), sy(p.bleu)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for p in &c.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(p.mean_marks),
                sy(p.bleu)
            );
        }
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            w - m - 80.0,
            escape(&c.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Hex SHA-256 prefix identifying a config in reports.
pub fn digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub systems: BTreeMap<String, f64>,
    pub missing: Vec<String>,
    pub config_digest: String,
    pub seeds: Vec<u64>,
}

impl Summary {
    pub fn new(report: &ProtocolReport, config_text: &str, seeds: Vec<u64>) -> Self {
        Self {
            systems: report.bleu.clone(),
            missing: report.missing.clone(),
            config_digest: digest(config_text),
            seeds,
        }
    }
}
