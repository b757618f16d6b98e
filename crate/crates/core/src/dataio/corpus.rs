use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training sentences must be shorter than this.
pub const MAX_TRAIN_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub video_id: String,
    pub tokens: Vec<String>,
    pub split: String,
}

/// Unicode punctuation outside ASCII, approximated by the blocks and
/// code points that carry P* general categories in common text.
const PUNCT_RANGES: &[(char, char)] = &[
    ('\u{00A1}', '\u{00A1}'),
    ('\u{00A7}', '\u{00A7}'),
    ('\u{00AB}', '\u{00AB}'),
    ('\u{00B6}', '\u{00B7}'),
    ('\u{00BB}', '\u{00BB}'),
    ('\u{00BF}', '\u{00BF}'),
    ('\u{037E}', '\u{037E}'),
    ('\u{0387}', '\u{0387}'),
    ('\u{055A}', '\u{055F}'),
    ('\u{0589}', '\u{058A}'),
    ('\u{05BE}', '\u{05BE}'),
    ('\u{060C}', '\u{060D}'),
    ('\u{061B}', '\u{061F}'),
    ('\u{066A}', '\u{066D}'),
    ('\u{06D4}', '\u{06D4}'),
    ('\u{0964}', '\u{0965}'),
    ('\u{2010}', '\u{2027}'),
    ('\u{2030}', '\u{205E}'),
    ('\u{207D}', '\u{207E}'),
    ('\u{208D}', '\u{208E}'),
    ('\u{2308}', '\u{230B}'),
    ('\u{2329}', '\u{232A}'),
    ('\u{2768}', '\u{2775}'),
    ('\u{27C5}', '\u{27C6}'),
    ('\u{27E6}', '\u{27EF}'),
    ('\u{2983}', '\u{2998}'),
    ('\u{29D8}', '\u{29DB}'),
    ('\u{29FC}', '\u{29FD}'),
    ('\u{2CF9}', '\u{2CFC}'),
    ('\u{2CFE}', '\u{2CFF}'),
    ('\u{2E00}', '\u{2E4F}'),
    ('\u{3001}', '\u{3003}'),
    ('\u{3008}', '\u{3011}'),
    ('\u{3014}', '\u{301F}'),
    ('\u{3030}', '\u{3030}'),
    ('\u{303D}', '\u{303D}'),
    ('\u{30A0}', '\u{30A0}'),
    ('\u{30FB}', '\u{30FB}'),
    ('\u{FE10}', '\u{FE19}'),
    ('\u{FE30}', '\u{FE52}'),
    ('\u{FE54}', '\u{FE61}'),
    ('\u{FE63}', '\u{FE63}'),
    ('\u{FE68}', '\u{FE68}'),
    ('\u{FE6A}', '\u{FE6B}'),
    ('\u{FF01}', '\u{FF03}'),
    ('\u{FF05}', '\u{FF0A}'),
    ('\u{FF0C}', '\u{FF0F}'),
    ('\u{FF1A}', '\u{FF1B}'),
    ('\u{FF1F}', '\u{FF20}'),
    ('\u{FF3B}', '\u{FF3D}'),
    ('\u{FF3F}', '\u{FF3F}'),
    ('\u{FF5B}', '\u{FF5B}'),
    ('\u{FF5D}', '\u{FF5D}'),
    ('\u{FF5F}', '\u{FF65}'),
];

/// Treebank escapes for brackets and quotes.
pub const DEFAULT_PUNCT_TOKENS: &[&str] = &[
    "-LRB-", "-RRB-", "-LSB-", "-RSB-", "-LCB-", "-RCB-", "``", "''", "--", "...",
];

/// Decides which tokens are dropped before training and scoring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Punctuation {
    pub tokens: Vec<String>,
}

impl Default for Punctuation {
    fn default() -> Self {
        Punctuation {
            tokens: DEFAULT_PUNCT_TOKENS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn is_punct_char(c: char) -> bool {
    c.is_ascii_punctuation() || PUNCT_RANGES.iter().any(|&(a, b)| a <= c && c <= b)
}

impl Punctuation {
    /// True for listed tokens and tokens made only of punctuation characters.
    pub fn is_punct(&self, token: &str) -> bool {
        if token.is_empty() {
            return false;
        }
        let upper = token.to_uppercase();
        self.tokens.iter().any(|t| t.to_uppercase() == upper) || token.chars().all(is_punct_char)
    }

    /// Lowercases and removes punctuation tokens.
    pub fn normalize(&self, tokens: &[String]) -> Vec<String> {
        tokens
            .iter()
            .filter(|t| !self.is_punct(t))
            .map(|t| t.to_lowercase())
            .collect()
    }
}

/// Whitespace tokenization of raw text.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Reads a JSON-lines corpus, normalizing tokens.
pub fn read_corpus(path: &Path, punct: &Punctuation) -> Result<Vec<CorpusEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: CorpusEntry = serde_json::from_str(&line).map_err(|e| Error::Syntax {
            path: path.display().to_string(),
            line: ln + 1,
            msg: e.to_string(),
        })?;
        entry.tokens = punct.normalize(&entry.tokens);
        if entry.tokens.is_empty() {
            return Err(Error::Syntax {
                path: path.display().to_string(),
                line: ln + 1,
                msg: format!("sentence {} has no tokens after punctuation removal", entry.id),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e)?;
        writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
    }
    Ok(())
}

pub const UNK: &str = "<unk>";

/// Word ids with `<unk>` at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut all = vec![UNK.to_string()];
        all.extend(words.into_iter().filter(|w| w != UNK));
        Self::from_ids(all)
    }

    fn from_ids(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::input("vocabulary must start with <unk>"));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate vocabulary word {w}")));
            }
        }
        Ok(Vocab { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.words)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = serde_json::from_str(&s)?;
        Self::from_ids(words).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// The `size` most frequent words of the training split, ties broken by
/// lexicographic order, plus `<unk>`.
pub fn build_vocab(entries: &[CorpusEntry], size: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.split == "train") {
        for t in &e.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::input("no training tokens to build a vocabulary from"));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Vocab::from_words(ranked.into_iter().take(size).map(|(w, _)| w.to_string()).collect())
}
