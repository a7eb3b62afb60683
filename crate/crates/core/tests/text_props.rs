mod common;

use std::collections::BTreeMap;

use common::rng;
use proptest::prelude::*;
use quickedit::text::{detokenize, propagate_markers, train_bpe, AnnotatedGuess, BpeModel, Segmenter, Tokenizer, Vocabulary, EOS, UNK};
use rand::Rng;

/// Applies merges in order to a character sequence, leftmost first.
fn apply(word: &str, merges: &[(String, String)]) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    for (l, r) in merges {
        let mut out = Vec::with_capacity(s.len());
        let mut i = 0;
        while i < s.len() {
            if i + 1 < s.len() && &s[i] == l && &s[i + 1] == r {
                out.push(format!("{l}{r}"));
                i += 2;
            } else {
                out.push(s[i].clone());
                i += 1;
            }
        }
        s = out;
    }
    s
}

fn random_corpus(seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let alphabet = ['a', 'b', 'c', 'd'];
    (0..40)
        .map(|_| {
            (0..r.gen_range(1..6))
                .map(|_| (0..r.gen_range(1..6)).map(|_| alphabet[r.gen_range(0..4)]).collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[test]
fn merge_counts_equal_an_independent_pair_count() {
    for seed in 0..10 {
        let corpus = random_corpus(seed);
        let model = train_bpe(corpus.iter().map(String::as_str), 30).unwrap();
        let words: Vec<&str> = corpus.iter().flat_map(|l| l.split_whitespace()).collect();
        let mut done: Vec<(String, String)> = Vec::new();
        for m in model.merges() {
            let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
            for w in &words {
                let s = apply(w, &done);
                for p in s.windows(2) {
                    *pairs.entry((p[0].clone(), p[1].clone())).or_default() += 1;
                }
            }
            let top = *pairs.values().max().unwrap();
            // BTreeMap iterates in lexicographic order, so the first maximum wins ties
            let (best, _) = pairs.iter().find(|(_, &c)| c == top).unwrap();
            assert_eq!((&m.left, &m.right), (&best.0, &best.1), "seed {seed}");
            assert_eq!(m.count, top);
            done.push((m.left.clone(), m.right.clone()));
        }
        for w in &words {
            assert_eq!(model.split_word(w), apply(w, &done));
        }
    }
}

#[test]
fn bpe_basics() {
    let m = train_bpe(["aa aa aa"], 1).unwrap();
    assert_eq!((m.merges()[0].left.as_str(), m.merges()[0].right.as_str()), ("a", "a"));
    assert!(train_bpe(["aa"], 0).is_err());
    assert!(train_bpe(Vec::<&str>::new(), 3).is_err());
    // a frequent word becomes a single piece
    let m = train_bpe(["lower lower lower lower newest"], 10).unwrap();
    assert_eq!(m.segment_word("lower"), vec!["lower"]);
    // no pair left: training stops early
    let m = train_bpe(["a b c"], 5).unwrap();
    assert!(m.merges().is_empty());
    let pieces = train_bpe(["abab abab"], 1).unwrap().segment_word("ababa");
    assert_eq!(pieces, vec!["ab@@", "ab@@", "a"]);
}

#[test]
fn merge_table_round_trips() {
    let corpus = random_corpus(3);
    let m = train_bpe(corpus.iter().map(String::as_str), 20).unwrap();
    let back = BpeModel::parse(&m.to_file_string()).unwrap();
    assert_eq!(back.merges(), m.merges());
    // the count column is optional
    assert_eq!(BpeModel::parse("a b\n").unwrap().merges()[0].count, 0);
    for bad in ["a b x\n", "a\n", "a b 1 2\n", "a b 1\na b 2\n", " b 1\n"] {
        assert!(BpeModel::parse(bad).is_err(), "{bad:?}");
    }
}

#[test]
fn word_mode_tokenization() {
    let vocab = Vocabulary::from_tokens(["a", "b"]).unwrap();
    let tok = Tokenizer::word_level(vocab.clone());
    let e = tok.encode("a  b\tzz");
    assert_eq!(e.ids, vec![4, 5, UNK]);
    assert_eq!(e.word_end, vec![true; 3]);
    assert_eq!(tok.decode(&[4, 5]), "a b");
    assert_eq!(vocab.id("</s>"), Some(EOS));
}

#[test]
fn vocabulary_file_round_trips() {
    let v = Vocabulary::from_corpus(["b a c a", "c c d"], None);
    let back = Vocabulary::parse(&v.to_file_string()).unwrap();
    assert_eq!(back.ordinary(), v.ordinary());
    assert!(Vocabulary::parse("a\na\n").is_err());
    assert!(Vocabulary::from_tokens(["<s>"]).is_err());
}

#[test]
fn topmodel_pieces_share_the_word_marker() {
    let m = propagate_markers(&[true, false], &[false, true, true]).unwrap();
    assert_eq!(m, vec![true, true, false]);
    assert!(propagate_markers(&[true], &[false, true, true]).is_err());
    assert!(propagate_markers(&[true, false], &[true, false]).is_err());
}

proptest! {
    #[test]
    fn propagation_equals_brute_force_expansion(words in prop::collection::vec((any::<bool>(), 1usize..4), 0..12)) {
        let markers: Vec<bool> = words.iter().map(|w| w.0).collect();
        let mut ends = Vec::new();
        let mut expect = Vec::new();
        for &(m, pieces) in &words {
            for p in 0..pieces {
                ends.push(p + 1 == pieces);
                expect.push(m);
            }
        }
        prop_assert_eq!(propagate_markers(&markers, &ends).unwrap(), expect.clone());
        // already at subword level with one piece per token: unchanged
        let trivial = vec![true; expect.len()];
        prop_assert_eq!(propagate_markers(&expect, &trivial).unwrap(), expect);
    }

    #[test]
    fn word_mode_round_trips(ws in prop::collection::vec("[a-z]{1,5}", 0..10), sep in prop::collection::vec(" {1,3}|\t", 10)) {
        let mut text = String::new();
        for (i, w) in ws.iter().enumerate() {
            text.push_str(&sep[i % sep.len()]);
            text.push_str(w);
        }
        let vocab = Vocabulary::from_corpus([text.as_str()], None);
        let tok = Tokenizer::word_level(vocab);
        let e = tok.encode(&text);
        prop_assert_eq!(tok.decode(&e.ids), ws.join(" "));
    }

    #[test]
    fn bpe_segmentation_detokenizes_and_partitions(seed in 0u64..1000, text in "[abcd]{1,6}( [abcd]{1,6}){0,6}") {
        let corpus = random_corpus(seed);
        let model = train_bpe(corpus.iter().map(String::as_str), 15).unwrap();
        let seg = Segmenter::Bpe(model).segment(&text);
        prop_assert_eq!(seg.word_count(), text.split_whitespace().count());
        prop_assert_eq!(detokenize(&seg.tokens), text.clone());
        let g = AnnotatedGuess::new(vec![4; seg.tokens.len()], vec![false; seg.tokens.len()], seg.word_end.clone());
        prop_assert!(g.is_ok());
    }
}

#[test]
fn annotated_guess_invariants() {
    assert!(AnnotatedGuess::new(vec![4, 5], vec![true], vec![true, true]).is_err());
    // pieces of one word must share the marker
    assert!(AnnotatedGuess::new(vec![4, 5], vec![true, false], vec![false, true]).is_err());
    // the last piece must close a word
    assert!(AnnotatedGuess::new(vec![4, 5], vec![true, true], vec![false, false]).is_err());
    let g = AnnotatedGuess::from_words(vec![4, 5, 6], vec![false, true, false]).unwrap();
    assert_eq!(g.word_end(), &[true, true, true]);
}
