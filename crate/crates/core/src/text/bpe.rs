//! Byte-pair encoding over characters of whitespace words.
//!
//! Non-final pieces of a segmented word carry the `@@` continuation suffix,
//! so a word ends at the first piece without it.

use std::collections::{BTreeMap, HashMap};

use super::TextError;

pub const CONTINUATION: &str = "@@";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Merge {
    pub left: String,
    pub right: String,
    /// Weighted pair frequency at the time the merge was selected.
    pub count: u64,
}

/// Ordered merge table; earlier merges bind first.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct BpeModel {
    merges: Vec<Merge>,
    ranks: HashMap<(String, String), usize>,
}

fn word_counts<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    counts
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `merges` merges. The most frequent adjacent pair is merged
/// first; ties go to the lexicographically smallest pair. Training stops
/// early when no pair occurs any more.
pub fn train_bpe<'a, I>(corpus: I, merges: usize) -> Result<BpeModel, TextError>
where
    I: IntoIterator<Item = &'a str>,
{
    if merges == 0 {
        return Err(TextError::InvalidMergeCount);
    }
    let counts = word_counts(corpus);
    if counts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();

    let mut model = BpeModel::default();
    for _ in 0..merges {
        let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, c) in &words {
            for pair in symbols.windows(2) {
                *pairs.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|&(_, c)| c > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
        let Some(((l, r), count)) = best else {
            break;
        };
        let (left, right) = (l.to_string(), r.to_string());
        for (symbols, _) in &mut words {
            *symbols = merge_pair(symbols, &left, &right);
        }
        model.push(Merge { left, right, count });
    }
    Ok(model)
}

impl BpeModel {
    fn push(&mut self, merge: Merge) {
        self.ranks.insert((merge.left.clone(), merge.right.clone()), self.merges.len());
        self.merges.push(merge);
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Segments one word into pieces without continuation markers.
    pub fn split_word(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .min();
            let Some(rank) = best else {
                break;
            };
            let m = &self.merges[rank];
            symbols = merge_pair(&symbols, &m.left, &m.right);
        }
        symbols
    }

    /// Segments one word into pieces, marking all but the last with `@@`.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut pieces = self.split_word(word);
        let n = pieces.len();
        for p in pieces.iter_mut().take(n.saturating_sub(1)) {
            p.push_str(CONTINUATION);
        }
        pieces
    }

    /// Merge table file: one `left right count` line per merge.
    pub fn to_file_string(&self) -> String {
        self.merges
            .iter()
            .map(|m| format!("{} {} {}\n", m.left, m.right, m.count))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let mut model = Self::default();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            let (left, right, count) = match fields.as_slice() {
                [l, r] => (*l, *r, 0),
                [l, r, c] => (*l, *r, c.parse().map_err(|_| TextError::MalformedMerge { line: i + 1 })?),
                _ => return Err(TextError::MalformedMerge { line: i + 1 }),
            };
            if left.is_empty() || right.is_empty() {
                return Err(TextError::MalformedMerge { line: i + 1 });
            }
            if model.ranks.contains_key(&(left.to_string(), right.to_string())) {
                return Err(TextError::MalformedMerge { line: i + 1 });
            }
            model.push(Merge {
                left: left.to_string(),
                right: right.to_string(),
                count,
            });
        }
        Ok(model)
    }
}
