use std::collections::BTreeMap;
use std::ops::Range;

use super::{DetectorError, Result};

pub const SEPARATOR: &str = ".";

/// Word-level vocabulary over class-name words plus the separator.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn new(words: &[String]) -> Self {
        let mut v = Self {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        v.push(SEPARATOR);
        for w in words {
            v.push(w);
        }
        v
    }

    /// Vocabulary covering every whitespace-separated word of `names`.
    pub fn from_class_names<S: AsRef<str>>(names: &[S]) -> Self {
        let mut words: Vec<String> = names
            .iter()
            .flat_map(|n| n.as_ref().split_whitespace().map(str::to_string))
            .collect();
        words.sort();
        words.dedup();
        Self::new(&words)
    }

    fn push(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len());
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| DetectorError::Vocab(word.to_string()))
    }
}

/// Class names joined by `". "`, with the token span of each class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSentence {
    pub names: Vec<String>,
    pub text: String,
    pub token_ids: Vec<usize>,
    pub spans: Vec<Range<usize>>,
}

impl ClassSentence {
    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub fn build_class_sentence<S: AsRef<str>>(names: &[S], vocab: &Vocab) -> Result<ClassSentence> {
    if names.is_empty() {
        return Err(DetectorError::Input("class sentence needs at least one name".into()));
    }
    let names: Vec<String> = names.iter().map(|n| n.as_ref().to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        if n.split_whitespace().next().is_none() {
            return Err(DetectorError::Input("empty class name".into()));
        }
        if names[..i].contains(n) {
            return Err(DetectorError::Input(format!("duplicate class name `{n}`")));
        }
    }
    let sep = vocab.id(SEPARATOR)?;
    let mut token_ids = Vec::new();
    let mut spans = Vec::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if i > 0 {
            token_ids.push(sep);
        }
        let start = token_ids.len();
        for w in n.split_whitespace() {
            token_ids.push(vocab.id(w)?);
        }
        spans.push(start..token_ids.len());
    }
    Ok(ClassSentence {
        text: names.join(". "),
        names,
        token_ids,
        spans,
    })
}
