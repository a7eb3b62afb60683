#![allow(dead_code)]

use quickedit::autodiff::{Array, Tape, Var};
use quickedit::model::{Example, Model, ModelConfig, ModelMode};
use quickedit::text::{AnnotatedGuess, Vocabulary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod criteria;

pub const EPS: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array<f64> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Worst relative disagreement between analytic gradients and central
/// differences of `f` at `params`. `relative = |a − n| / max(|a|, |n|, floor)`.
/// With `sample = Some(k)` only k random coordinates per tensor, plus the
/// largest-gradient coordinate, are checked.
pub fn fd_check<F>(params: &[Array<f64>], f: F, sample: Option<usize>, seed: u64) -> (f64, String)
where
    F: Fn(&mut Tape<'_, f64>) -> Var,
{
    let floor = 1e-3;
    let grads = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape);
        tape.backward(loss).expect("backward")
    };
    let eval = |p: &[Array<f64>]| {
        let mut tape = Tape::inference(p);
        let loss = f(&mut tape);
        tape.value(loss).item()
    };
    let mut r = rng(seed);
    let mut work = params.to_vec();
    let mut worst = (0.0f64, String::new());
    for (i, g) in grads.as_slice().iter().enumerate() {
        let n = g.len();
        let coords: Vec<usize> = match sample {
            Some(k) if k < n => {
                let mut c: Vec<usize> = (0..n).collect();
                c.shuffle(&mut r);
                c.truncate(k);
                let argmax = (0..n).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
                c.push(argmax);
                c
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + EPS;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - EPS;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = g.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("param {i} coord {j}: analytic {analytic:e}, numeric {numeric:e}"));
            }
        }
    }
    worst
}

/// Vocabulary of `n` ordinary words `t0..t{n-1}`.
pub fn vocab(prefix: &str, n: usize) -> Vocabulary {
    Vocabulary::from_tokens((0..n).map(|i| format!("{prefix}{i}"))).unwrap()
}

pub fn small_config(mode: ModelMode, source_vocab: usize, target_vocab: usize) -> ModelConfig {
    ModelConfig::uniform(mode, source_vocab, target_vocab, 2, 2, 8, 3, 8, 6, 32)
}

/// Randomly initialized model over `src_words`/`tgt_words` ordinary words.
pub fn random_model(mode: ModelMode, src_words: usize, tgt_words: usize, seed: u64) -> Model {
    let sv = vocab("s", src_words);
    let tv = vocab("t", tgt_words);
    let cfg = small_config(mode, sv.len(), tv.len());
    Model::new(cfg, Some(sv), tv, seed).unwrap()
}

pub fn random_ids(rng: &mut ChaCha8Rng, vocab_len: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(4..vocab_len)).collect()
}

pub fn random_example(rng: &mut ChaCha8Rng, model: &Model, max_len: usize) -> Example {
    let cfg = model.config();
    let src_len = rng.gen_range(1..=max_len);
    let guess_len = rng.gen_range(1..=max_len);
    let tgt_len = rng.gen_range(1..=max_len);
    let guess_ids = random_ids(rng, cfg.target_vocab, guess_len);
    let markers = (0..guess_len).map(|_| rng.gen_bool(0.4)).collect();
    Example {
        source: random_ids(rng, cfg.source_vocab.max(5), src_len),
        guess: Some(AnnotatedGuess::from_words(guess_ids, markers).unwrap()),
        target: random_ids(rng, cfg.target_vocab, tgt_len),
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element gets a
/// distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape<'_, f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let r = random_array(&mut rng(seed), &shape, 1.0);
    let c = tape.constant(r);
    let m = tape.mul(out, c).unwrap();
    tape.sum(m)
}

/// Finite-difference errors of every tape operation on small random inputs.
pub fn op_gradient_errors() -> Vec<(&'static str, f64, String)> {
    let mut r = rng(11);
    let mut out = Vec::new();
    let mut check = |name: &'static str, params: Vec<Array<f64>>, f: &dyn Fn(&mut Tape<'_, f64>) -> Var| {
        let (err, at) = fd_check(&params, f, None, 0);
        out.push((name, err, at));
    };

    let p = vec![random_array(&mut r, &[5, 3], 1.0), random_array(&mut r, &[5, 3], 1.0)];
    check("embedding", p.clone(), &|t| {
        let tab = t.param(0);
        let e = t.embedding(tab, &[0, 3, 3, 1]).unwrap();
        weighted_sum(t, e, 1)
    });
    check("embedding_select", p, &|t| {
        let a = t.param(0);
        let b = t.param(1);
        let e = t.embedding_select(&[a, b], &[(0, 2), (1, 2), (1, 4), (0, 0)]).unwrap();
        weighted_sum(t, e, 2)
    });
    let p = vec![random_array(&mut r, &[3, 4], 1.0), random_array(&mut r, &[3, 4], 1.0)];
    check("add", p.clone(), &|t| {
        let (a, b) = (t.param(0), t.param(1));
        let s = t.add(a, b).unwrap();
        weighted_sum(t, s, 3)
    });
    check("mul", p.clone(), &|t| {
        let (a, b) = (t.param(0), t.param(1));
        let s = t.mul(a, b).unwrap();
        weighted_sum(t, s, 4)
    });
    check("mul (shared input)", p.clone(), &|t| {
        let a = t.param(0);
        let s = t.mul(a, a).unwrap();
        weighted_sum(t, s, 5)
    });
    check("scale", p, &|t| {
        let a = t.param(0);
        let s = t.scale(a, -0.7);
        weighted_sum(t, s, 6)
    });
    let p = vec![
        random_array(&mut r, &[4, 3], 1.0),
        random_array(&mut r, &[3, 5], 1.0),
        random_array(&mut r, &[5], 1.0),
    ];
    check("linear", p.clone(), &|t| {
        let (x, w, b) = (t.param(0), t.param(1), t.param(2));
        let y = t.linear(x, w, Some(b)).unwrap();
        weighted_sum(t, y, 7)
    });
    check("linear (no bias)", p, &|t| {
        let (x, w) = (t.param(0), t.param(1));
        let y = t.linear(x, w, None).unwrap();
        weighted_sum(t, y, 8)
    });
    let p = vec![
        random_array(&mut r, &[6, 3], 1.0),
        random_array(&mut r, &[3, 3, 4], 1.0),
        random_array(&mut r, &[4], 1.0),
    ];
    check("conv1d (same padding)", p.clone(), &|t| {
        let (x, w, b) = (t.param(0), t.param(1), t.param(2));
        let y = t.conv1d(x, w, b, 1, 1).unwrap();
        weighted_sum(t, y, 9)
    });
    check("conv1d (causal padding)", p.clone(), &|t| {
        let (x, w, b) = (t.param(0), t.param(1), t.param(2));
        let y = t.conv1d(x, w, b, 2, 0).unwrap();
        weighted_sum(t, y, 10)
    });
    check("conv1d (valid)", p, &|t| {
        let (x, w, b) = (t.param(0), t.param(1), t.param(2));
        let y = t.conv1d(x, w, b, 0, 0).unwrap();
        weighted_sum(t, y, 11)
    });
    let p = vec![random_array(&mut r, &[4, 6], 2.0)];
    check("glu", p, &|t| {
        let x = t.param(0);
        let y = t.glu(x).unwrap();
        weighted_sum(t, y, 12)
    });
    let p = vec![
        random_array(&mut r, &[3, 4], 1.0),
        random_array(&mut r, &[4, 2], 1.0),
        random_array(&mut r, &[5, 4], 1.0),
    ];
    check("matmul", p.clone(), &|t| {
        let (a, b) = (t.param(0), t.param(1));
        let y = t.matmul(a, b).unwrap();
        weighted_sum(t, y, 13)
    });
    check("matmul_nt", p, &|t| {
        let (a, b) = (t.param(0), t.param(2));
        let y = t.matmul_nt(a, b).unwrap();
        weighted_sum(t, y, 14)
    });
    let p = vec![random_array(&mut r, &[3, 5], 2.0)];
    check("softmax", p.clone(), &|t| {
        let x = t.param(0);
        let y = t.softmax(x).unwrap();
        weighted_sum(t, y, 15)
    });
    check("cross_entropy", p.clone(), &|t| {
        let x = t.param(0);
        t.cross_entropy(x, &[4, 0, 2], None).unwrap()
    });
    check("cross_entropy (ignored row)", p.clone(), &|t| {
        let x = t.param(0);
        t.cross_entropy(x, &[4, 0, 2], Some(0)).unwrap()
    });
    check("sum", p, &|t| {
        let x = t.param(0);
        let s = t.scale(x, 1.5);
        t.sum(s)
    });
    out
}

/// Finite-difference error of the full forward pass and loss of a small
/// network in `mode`, checked on every parameter coordinate.
pub fn model_gradient_error(mode: ModelMode, seed: u64) -> (f64, String) {
    let model = random_model(mode, 7, 6, seed);
    let mut r = rng(seed + 1);
    let example = random_example(&mut r, &model, 5);
    let params: Vec<Array<f64>> = model.params.cast::<f64>().arrays;
    let net = model.network.clone();
    fd_check(&params, |t| net.loss(t, &example).unwrap(), None, seed)
}
