//! Checks shared by the property tests and the acceptance target. Each
//! returns a short summary on success and the first violation otherwise.

use std::collections::HashSet;

use quickedit::autodiff::{Array, Tape};
use quickedit::decoding::{beam_search, decode, BanSet, BeamConfig, Constraint, DecodeItem, DecodeOptions, SequenceScorer, TokenMode};
use quickedit::model::{with_eos, Model, ModelMode};
use quickedit::text::{AnnotatedGuess, Vocabulary, BOS, EOS, RESERVED, UNK};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{random_example, random_model, rng};

pub type Outcome = Result<String, String>;

fn row_check(name: &str, w: &Array<f64>) -> Result<(), String> {
    for r in 0..w.rows() {
        let row = w.row(r);
        if let Some(x) = row.iter().find(|&&x| x < 0.0 || !x.is_finite()) {
            return Err(format!("{name} row {r} has weight {x}"));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(format!("{name} row {r} sums to {s}"));
        }
    }
    Ok(())
}

fn naive_summary(w: &Array<f64>, v: &Array<f64>) -> Vec<f64> {
    let mut out = vec![0.0; w.rows() * v.cols()];
    for t in 0..w.rows() {
        for i in 0..v.rows() {
            for d in 0..v.cols() {
                out[t * v.cols() + d] += w.row(t)[i] * v.row(i)[d];
            }
        }
    }
    out
}

/// `cases` random forwards in bilingual and monolingual mode: weight rows
/// are distributions, each per-path summary equals Σ a_i v_i computed
/// directly, and the bilingual summary is the mean of the two paths.
pub fn attention_invariants(cases: usize) -> Outcome {
    let mut rows = 0usize;
    let mut worst_mean = 0.0f64;
    for case in 0..cases {
        let mode = if case % 4 == 3 {
            ModelMode::Monolingual
        } else {
            ModelMode::Bilingual
        };
        let model = random_model(mode, 9, 8, 1000 + case as u64);
        let mut r = rng(2000 + case as u64);
        let ex = random_example(&mut r, &model, 9);
        let params: Vec<Array<f64>> = model.params.cast::<f64>().arrays;
        let net = &model.network;
        let mut tape = Tape::inference(&params);
        let source = if mode.uses_source() {
            let mut ids = ex.source.clone();
            ids.push(EOS);
            Some(net.encode_source(&mut tape, &ids).map_err(|e| e.to_string())?)
        } else {
            None
        };
        let guess = net
            .encode_guess(&mut tape, &with_eos(ex.guess.as_ref().unwrap()))
            .map_err(|e| e.to_string())?;
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&ex.target);
        let out = net.decode(&mut tape, &prefix, source, Some(guess)).map_err(|e| e.to_string())?;
        for (l, layer) in out.layers.iter().enumerate() {
            let gw = tape.value(layer.guess_weights.ok_or("guess path missing")?);
            row_check(&format!("case {case} layer {l} guess"), gw)?;
            rows += gw.rows();
            let gsum = naive_summary(gw, tape.value(guess.values));
            let mut expect = gsum.clone();
            if let Some(src) = source {
                let sw = tape.value(layer.source_weights.ok_or("source path missing")?);
                row_check(&format!("case {case} layer {l} source"), sw)?;
                rows += sw.rows();
                let ssum = naive_summary(sw, tape.value(src.values));
                expect = ssum.iter().zip(&gsum).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
            } else if layer.source_weights.is_some() {
                return Err(format!("case {case}: monolingual forward produced source weights"));
            }
            let got = tape.value(layer.summary).data();
            for (a, b) in got.iter().zip(&expect) {
                worst_mean = worst_mean.max((a - b).abs());
            }
        }
    }
    if worst_mean > 1e-6 {
        return Err(format!("summary deviates from the per-path mean by {worst_mean:e}"));
    }
    Ok(format!(
        "{cases} forwards, {rows} weight rows, max summary deviation {worst_mean:.1e}"
    ))
}

/// Random type-level marking pairs checked against a set-membership pass.
pub fn marking_oracle(pairs: usize) -> Outcome {
    use quickedit::editsim::simulate_markers;
    let mut r = rng(77);
    let mut marked = 0;
    for p in 0..pairs {
        let word = |r: &mut rand_chacha::ChaCha8Rng| format!("w{}", r.gen_range(0..8));
        let guess: Vec<String> = (0..r.gen_range(0..12)).map(|_| word(&mut r)).collect();
        let reference: Vec<String> = (0..r.gen_range(0..12)).map(|_| word(&mut r)).collect();
        let mut expect = Vec::with_capacity(guess.len());
        for g in &guess {
            let mut found = false;
            for w in &reference {
                if w == g {
                    found = true;
                }
            }
            expect.push(!found);
        }
        let got = simulate_markers(&guess, &reference);
        if got != expect {
            return Err(format!("pair {p}: guess {guess:?} reference {reference:?} gave {got:?}"));
        }
        marked += expect.iter().filter(|&&m| m).count();
    }
    Ok(format!("{pairs} pairs identical, {marked} marks"))
}

/// Toy scorer whose next-token distribution is a seeded function of the
/// whole prefix.
pub struct PrefixScorer {
    pub vocab: usize,
    pub seed: u64,
    /// Token forced to be the most likely continuation everywhere.
    pub favourite: Option<usize>,
}

impl PrefixScorer {
    pub fn log_probs_of(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        for &t in prefix {
            h = (h ^ t as u64).wrapping_mul(0x0100_0000_01b3).rotate_left(17);
        }
        let mut r = rng(h);
        let mut raw: Vec<f64> = (0..self.vocab).map(|_| r.gen_range(-3.0..3.0)).collect();
        if let Some(f) = self.favourite {
            raw[f] = 10.0;
        }
        let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + raw.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        raw.iter().map(|x| x - lse).collect()
    }
}

impl SequenceScorer for PrefixScorer {
    type State = (Vec<usize>, Vec<f64>);
    type Error = ();

    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn start(&self) -> Result<Self::State, ()> {
        Ok((vec![], self.log_probs_of(&[])))
    }
    fn log_probs<'s>(&self, state: &'s Self::State) -> &'s [f64] {
        &state.1
    }
    fn advance(&self, state: &Self::State, token: usize) -> Result<Self::State, ()> {
        let mut p = state.0.clone();
        p.push(token);
        let lp = self.log_probs_of(&p);
        Ok((p, lp))
    }
}

/// Words formed by gluing `@@` pieces; a dangling piece counts as a word.
pub fn glue(pieces: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    let mut partial = String::new();
    for p in pieces {
        match p.strip_suffix("@@") {
            Some(stem) => partial.push_str(stem),
            None => {
                partial.push_str(p);
                out.push(std::mem::take(&mut partial));
            }
        }
    }
    if !partial.is_empty() {
        out.push(partial);
    }
    out
}

/// Best sequence by full enumeration: every sequence of ordinary tokens of
/// length < max_len followed by `</s>`, filtered by `allowed`.
pub fn enumerate_best(scorer: &PrefixScorer, max_len: usize, allowed: &dyn Fn(&[usize]) -> bool) -> Option<(Vec<usize>, f64)> {
    let words: Vec<usize> = (UNK..scorer.vocab).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(vec![], 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = scorer.log_probs_of(&prefix);
        let end = score + lp[EOS];
        if allowed(&prefix) && best.as_ref().is_none_or(|b| end > b.1) {
            best = Some((prefix.clone(), end));
        }
        if prefix.len() + 1 < max_len {
            for &w in &words {
                let mut p = prefix.clone();
                p.push(w);
                stack.push((p, score + lp[w]));
            }
        }
    }
    best
}

/// Beam search with a beam wide enough to hold every hypothesis agrees
/// with full enumeration on toy scorers (vocab 6, length ≤ 4), in word
/// mode under every ban subset and in subword mode under random bans.
pub fn exhaustive_oracle(scorers: u64) -> Outcome {
    // ids 3 <unk>, 4 a@@, 5 a; everything from <unk> up may be emitted
    let vocab = Vocabulary::from_tokens(["a@@", "a"]).unwrap();
    let words = ["a", "aa", "aaa", "<unk>", "a<unk>", "aa<unk>"];
    let mut cases = 0;
    for seed in 0..scorers {
        for favourite in [None, Some(4)] {
            let scorer = PrefixScorer { vocab: 6, seed, favourite };
            for max_len in 1..=4 {
                let cfg = BeamConfig { beam: 64, max_len };
                for mask in 0u32..8 {
                    let ids: HashSet<usize> = (0..3).filter(|b| mask & (1 << b) != 0).map(|b| b + 3).collect();
                    let got = beam_search(&scorer, &Constraint::Word(ids.clone()), &cfg).unwrap();
                    let expect = enumerate_best(&scorer, max_len, &|p| p.iter().all(|t| !ids.contains(t)));
                    let (tokens, score) = expect.ok_or("word-mode enumeration found nothing")?;
                    if got.tokens != tokens || (got.score - score).abs() > 1e-9 || got.flagged {
                        return Err(format!(
                            "seed {seed} len {max_len} ban {ids:?}: beam {:?} ({}) vs enumeration {tokens:?} ({score})",
                            got.tokens, got.score
                        ));
                    }
                    cases += 1;
                }
                let mut r = rng(seed * 31 + max_len as u64);
                for _ in 0..4 {
                    let ban: BanSet = words.iter().filter(|_| r.gen_bool(0.4)).map(|w| w.to_string()).collect();
                    let got = beam_search(
                        &scorer,
                        &Constraint::Subword {
                            banned: &ban,
                            vocab: &vocab,
                        },
                        &cfg,
                    )
                    .unwrap();
                    let allowed = |p: &[usize]| {
                        let pieces: Vec<&str> = p.iter().map(|&t| vocab.token(t).unwrap()).collect();
                        glue(&pieces).iter().all(|w| !ban.contains(w))
                    };
                    match enumerate_best(&scorer, max_len, &allowed) {
                        Some((tokens, score)) => {
                            if got.tokens != tokens || (got.score - score).abs() > 1e-9 || got.flagged {
                                return Err(format!(
                                    "seed {seed} len {max_len} subword ban {:?}: beam {:?} vs enumeration {tokens:?}",
                                    ban.to_vec(),
                                    got.tokens
                                ));
                            }
                        }
                        None => {
                            if !got.flagged || !got.tokens.is_empty() {
                                return Err(format!("seed {seed}: expected flagged fallback"));
                            }
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("{cases} toy cases agree with enumeration"))
}

/// Random subword vocabulary: stems `p0..` as continuation pieces and
/// whole-word pieces `q0..`.
pub fn subword_vocab(n: usize) -> Vocabulary {
    let mut tokens: Vec<String> = (0..n).map(|i| format!("p{i}@@")).collect();
    tokens.extend((0..n).map(|i| format!("q{i}")));
    Vocabulary::from_tokens(tokens).unwrap()
}

/// Random guess of whole words, each one or more pieces, with word-level markers.
pub fn random_subword_guess(r: &mut ChaCha8Rng, vocab: &Vocabulary, words: usize) -> AnnotatedGuess {
    let n = (vocab.len() - RESERVED.len()) / 2;
    let (mut tokens, mut markers, mut ends) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..words {
        let m = r.gen_bool(0.4);
        for _ in 0..r.gen_range(0..3) {
            tokens.push(vocab.id(&format!("p{}@@", r.gen_range(0..n))).unwrap());
            markers.push(m);
            ends.push(false);
        }
        tokens.push(vocab.id(&format!("q{}", r.gen_range(0..n))).unwrap());
        markers.push(m);
        ends.push(true);
    }
    AnnotatedGuess::new(tokens, markers, ends).unwrap()
}

/// Randomized constrained decodes with random models, guesses and markers;
/// no output may contain a banned word type.
pub fn constraint_safety(decodes: usize) -> Outcome {
    let mut banned_total = 0;
    let mut flagged = 0;
    for case in 0..decodes {
        let seed = 5000 + case as u64;
        let mut r = rng(seed);
        let mode = [ModelMode::Bilingual, ModelMode::Monolingual, ModelMode::Translation][case % 3];
        let subword = case % 2 == 1;
        let model = if subword {
            let cfg = super::small_config(mode, 10, 0);
            let tv = subword_vocab(3);
            Model::new(cfg, Some(super::vocab("s", 6)), tv, seed).unwrap()
        } else {
            random_model(mode, 6, r.gen_range(2..8), seed)
        };
        let tv = &model.target_vocab;
        let guess = if subword {
            let words = r.gen_range(1..8);
            random_subword_guess(&mut r, tv, words)
        } else {
            let len = r.gen_range(1..10);
            let ids = super::random_ids(&mut r, tv.len(), len);
            let markers = (0..len).map(|_| r.gen_bool(0.5)).collect();
            AnnotatedGuess::from_words(ids, markers).unwrap()
        };
        let ban = BanSet::from_guess(&guess, tv);
        let src_len = r.gen_range(1..8);
        let item = DecodeItem {
            source: super::random_ids(&mut r, model.config().source_vocab.max(5), src_len),
            guess: Some(guess),
            ban: ban.clone(),
        };
        let opts = DecodeOptions {
            beam: r.gen_range(1..6),
            mode: if subword { TokenMode::Subword } else { TokenMode::Word },
            ..DecodeOptions::default()
        };
        let h = decode(&model, &item, &opts).map_err(|e| format!("case {case}: {e}"))?;
        let pieces: Vec<&str> = h.tokens.iter().map(|&t| tv.token(t).unwrap()).collect();
        for w in glue(&pieces) {
            for b in ban.iter() {
                if w == b {
                    return Err(format!("case {case}: output {:?} contains banned {b:?}", h.words));
                }
            }
        }
        banned_total += ban.len();
        flagged += usize::from(h.flagged);
    }
    Ok(format!(
        "{decodes} decodes, {banned_total} banned types, 0 violations, {flagged} flagged"
    ))
}

/// Clipped-precision BLEU written from the definition: n-grams are
/// compared as joined strings, matches are clipped by scanning the
/// reference for each distinct hypothesis n-gram.
pub fn reference_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let grams = |ws: &[String], n: usize| -> Vec<String> {
        if ws.len() < n {
            return vec![];
        }
        (0..=ws.len() - n).map(|i| ws[i..i + n].join("\u{1}")).collect()
    };
    let mut log_p = 0.0;
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
    }
    for n in 1..=4 {
        let (mut num, mut den) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let rg = grams(rf, n);
            den += hg.len();
            let mut distinct = hg.clone();
            distinct.sort();
            distinct.dedup();
            for g in distinct {
                let in_h = hg.iter().filter(|x| **x == g).count();
                let in_r = rg.iter().filter(|x| **x == g).count();
                num += in_h.min(in_r);
            }
        }
        if num == 0 {
            return 0.0;
        }
        log_p += (num as f64 / den as f64).ln() / 4.0;
    }
    let bp = if c == 0 { 0.0 } else { (1.0 - r as f64 / c as f64).min(0.0).exp() };
    100.0 * bp * log_p.exp()
}

pub fn random_corpus(r: &mut ChaCha8Rng, sentences: usize, words: usize) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let sent = |r: &mut ChaCha8Rng| -> Vec<String> {
        let len = r.gen_range(0..14);
        (0..len).map(|_| format!("w{}", r.gen_range(0..words))).collect()
    };
    let refs: Vec<Vec<String>> = (0..sentences).map(|_| sent(r)).collect();
    let hyps = refs
        .iter()
        .map(|rf| {
            // mostly copies with edits, so that 4-gram matches exist
            let mut h: Vec<String> = rf.iter().filter(|_| r.gen_bool(0.9)).cloned().collect();
            for w in h.iter_mut() {
                if r.gen_bool(0.15) {
                    *w = format!("w{}", r.gen_range(0..words));
                }
            }
            if r.gen_bool(0.3) {
                h.push(format!("w{}", r.gen_range(0..words)));
            }
            h
        })
        .collect();
    (hyps, refs)
}

pub fn bleu_oracle(corpora: u64) -> Outcome {
    use quickedit::evaluation::bleu4;
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for k in 0..corpora {
        let mut r = rng(900 + k);
        let n = r.gen_range(1..30);
        let (hyps, refs) = random_corpus(&mut r, n, 4 + k as usize % 6);
        let got = bleu4(&hyps, &refs).map_err(|e| e.to_string())?.bleu;
        let expect = reference_bleu(&hyps, &refs);
        worst = worst.max((got - expect).abs());
        nonzero += usize::from(expect > 0.0);
    }
    if worst > 1e-6 {
        return Err(format!("max deviation {worst:e}"));
    }
    let mut r = rng(1);
    let (_, refs) = random_corpus(&mut r, 10, 8);
    let refs: Vec<Vec<String>> = refs.into_iter().filter(|s| s.len() >= 4).collect();
    let same = bleu4(&refs, &refs).map_err(|e| e.to_string())?.bleu;
    if same != 100.0 {
        return Err(format!("identical corpora scored {same}"));
    }
    Ok(format!(
        "{corpora} corpora ({nonzero} non-zero), max deviation {worst:.1e}; identical corpus 100.0"
    ))
}

pub fn random_triples(r: &mut ChaCha8Rng, n: usize, words: usize) -> Vec<quickedit::editsim::EditTriple> {
    use quickedit::editsim::{simulate_markers, EditTriple};
    (0..n)
        .map(|_| {
            let sent = |r: &mut ChaCha8Rng| -> Vec<String> {
                let len = r.gen_range(1..10);
                (0..len).map(|_| format!("w{}", r.gen_range(0..words))).collect()
            };
            let (source, guess, reference) = (sent(r), sent(r), sent(r));
            let markers = simulate_markers(&guess, &reference);
            EditTriple::new(source, guess, markers, reference).unwrap()
        })
        .collect()
}

/// Marker probabilities equal a two-pass count as integer ratios, auto_mark
/// is monotone in τ, and a sentence paraphrased as itself has boldness 0.
pub fn marker_model_exactness(sentences: usize) -> Outcome {
    use quickedit::paraphrase::{boldness, MarkerModel};
    let mut r = rng(31);
    let triples = random_triples(&mut r, 300, 25);
    let model = MarkerModel::fit(&triples).map_err(|e| e.to_string())?;
    // pass 1: the word types; pass 2: per-type counts
    let mut types: Vec<&String> = triples.iter().flat_map(|t| t.guess.iter()).collect();
    types.sort();
    types.dedup();
    for w in &types {
        let (mut marked, mut total) = (0u64, 0u64);
        for t in &triples {
            for (g, &m) in t.guess.iter().zip(&t.markers) {
                if g == *w {
                    total += 1;
                    marked += u64::from(m);
                }
            }
        }
        let (m, n) = model.counts(w);
        if (m, n) != (marked, total) {
            return Err(format!("{w}: fitted {m}/{n}, counted {marked}/{total}"));
        }
        let p = model.probability(w);
        if p != marked as f64 / total as f64 {
            return Err(format!("{w}: probability {p} is not {marked}/{total}"));
        }
    }
    if model.probability("unseen") != 0.0 {
        return Err("unseen word has non-zero probability".into());
    }
    let taus: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    for s in 0..sentences {
        let len = r.gen_range(1..15);
        let sentence: Vec<String> = (0..len).map(|_| format!("w{}", r.gen_range(0..30))).collect();
        let marks: Vec<Vec<bool>> = taus.iter().map(|&t| model.auto_mark(&sentence, t)).collect();
        for k in 1..marks.len() {
            if marks[k].iter().zip(&marks[k - 1]).any(|(&hi, &lo)| hi && !lo) {
                return Err(format!("sentence {s}: markers at τ={} not within τ={}", taus[k], taus[k - 1]));
            }
        }
        if marks.last().unwrap().iter().any(|&m| m) {
            return Err(format!("sentence {s}: τ = 1 marked a word"));
        }
        let b = boldness(&sentence, &sentence);
        if b != 0.0 {
            return Err(format!("sentence {s}: boldness(source, source) = {b}"));
        }
    }
    Ok(format!(
        "{} word types exact, {sentences} sentences monotone over 21 τ values, boldness(x, x) = 0",
        types.len()
    ))
}
