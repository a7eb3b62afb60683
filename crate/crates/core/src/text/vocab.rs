use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::TextError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional token ↔ id map. Ids `0..4` are reserved (see [`RESERVED`]);
/// ordinary tokens start at id 4 in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Builds a vocabulary from ordinary tokens; duplicates, reserved names,
    /// empty strings and tokens containing whitespace are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for (line, token) in tokens.into_iter().enumerate() {
            vocab.insert(token.into(), line + 1)?;
        }
        Ok(vocab)
    }

    /// Collects every whitespace token of `lines`, most frequent first, ties in
    /// lexicographic order. `max_size` bounds the number of ordinary entries.
    pub fn from_corpus<'a, I>(lines: I, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                if !RESERVED.contains(&w) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(&str, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(max) = max_size {
            entries.truncate(max);
        }
        Self::from_tokens(entries.into_iter().map(|(w, _)| w)).expect("corpus tokens are valid")
    }

    fn insert(&mut self, token: String, line: usize) -> Result<(), TextError> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(TextError::InvalidToken { line, token });
        }
        if self.index.contains_key(&token) {
            return Err(TextError::DuplicateToken { line, token });
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ordinary (non-reserved) tokens in id order.
    pub fn ordinary(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    /// Maps ids back to strings, dropping pad/bos and stopping at eos.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .take_while(|&id| id != EOS)
            .filter(|&id| id != PAD && id != BOS)
            .map(|id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// Parses the one-token-per-line file format. Line `n` (0-based) gets id
    /// `n + 4`; a trailing newline is allowed.
    pub fn parse(text: &str) -> Result<Self, TextError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Ok(Self::new());
        }
        Self::from_tokens(body.split('\n'))
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for t in self.ordinary() {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|e| TextError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        fs::write(path, self.to_file_string()).map_err(|e| TextError::Io(path.display().to_string(), e.to_string()))
    }
}
