//! Vocabulary, WordPiece-style tokenization, report cleaning and sequence framing.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SOS: &str = "[SOS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
/// Sentence-stop token; also an ordinary punctuation token in text.
pub const STOP: &str = ".";
pub const CONTINUATION: &str = "##";

/// Stems whose presence marks a sentence as referring to an earlier study.
pub const PRIOR_STEMS: [&str; 2] = ["prior", "compar"];

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("duplicate vocabulary token {token:?} on line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("vocabulary is missing special token {0}")]
    MissingSpecial(&'static str),
    #[error("token id {id} outside vocabulary of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("report has no findings or impression text")]
    EmptyReport,
    #[error("context length {0} cannot hold [SOS], one token and [SEP]")]
    ContextTooShort(usize),
    #[error("reading vocabulary {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Ordered token list with dense indices and the five special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    sos: usize,
    sep: usize,
    pad: usize,
    unk: usize,
    stop: usize,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TextError::DuplicateToken {
                    token: t.clone(),
                    line: i + 1,
                });
            }
        }
        let find = |s: &'static str| index.get(s).copied().ok_or(TextError::MissingSpecial(s));
        Ok(Vocabulary {
            sos: find(SOS)?,
            sep: find(SEP)?,
            pad: find(PAD)?,
            unk: find(UNK)?,
            stop: find(STOP)?,
            tokens,
            index,
        })
    }

    /// One token per line, UTF-8; indices follow file order.
    pub fn load(path: &Path) -> Result<Self, TextError> {
        let text = fs::read_to_string(path).map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str, TextError> {
        self.tokens.get(id).map(String::as_str).ok_or(TextError::IdOutOfRange {
            id,
            size: self.tokens.len(),
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn sep(&self) -> usize {
        self.sep
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn stop(&self) -> usize {
        self.stop
    }

    /// True for the framing markers `[SOS]`, `[SEP]`, `[PAD]`.
    pub fn is_framing(&self, id: usize) -> bool {
        id == self.sos || id == self.sep || id == self.pad
    }
}

/// Token ids plus the number of leading ids that are real (non-padding) tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub valid_len: usize,
}

impl TokenSequence {
    pub fn unpadded(ids: Vec<usize>) -> Self {
        let valid_len = ids.len();
        TokenSequence { ids, valid_len }
    }

    pub fn valid(&self) -> &[usize] {
        &self.ids[..self.valid_len]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub findings: String,
    pub impression: String,
}

impl Report {
    pub fn new(findings: impl Into<String>, impression: impl Into<String>) -> Self {
        Report {
            findings: findings.into(),
            impression: impression.into(),
        }
    }

    /// Sections joined by a single space, empty sections skipped.
    pub fn text(&self) -> String {
        [self.findings.trim(), self.impression.trim()]
            .iter()
            .filter(|s| !s.is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_empty(&self) -> bool {
        self.findings.trim().is_empty() && self.impression.trim().is_empty()
    }
}

/// Lowercases and splits on whitespace, isolating each ASCII punctuation mark.
pub fn words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            words.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Greedy longest-match split of one word; `None` when some span matches nothing.
fn word_pieces(word: &str, vocab: &Vocabulary) -> Option<Vec<usize>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece.insert_str(0, CONTINUATION);
            }
            if let Some(id) = vocab.id(&piece) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

/// Text to vocabulary ids; words that cannot be covered by pieces become `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = Vec::new();
    for w in words(text) {
        match word_pieces(&w, vocab) {
            Some(p) => ids.extend(p),
            None => ids.push(vocab.unk()),
        }
    }
    ids
}

fn is_punct(token: &str) -> bool {
    let mut it = token.chars();
    matches!((it.next(), it.next()), (Some(c), None) if c.is_ascii_punctuation())
}

/// Joins pieces back into text: framing markers dropped, `##` pieces merged,
/// punctuation attached to the preceding word.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> Result<String, TextError> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id)?;
        if vocab.is_framing(id) {
            continue;
        }
        if let Some(rest) = tok.strip_prefix(CONTINUATION).filter(|r| !r.is_empty()) {
            out.push_str(rest);
        } else if is_punct(tok) || out.is_empty() {
            out.push_str(tok);
        } else {
            out.push(' ');
            out.push_str(tok);
        }
    }
    Ok(out)
}

/// Sentences delimited by the stop character, trimmed, empties dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn mentions_prior(sentence: &str) -> bool {
    let lower = sentence.to_lowercase();
    PRIOR_STEMS.iter().any(|stem| lower.contains(stem))
}

fn strip_prior_sentences(section: &str) -> String {
    let sentences = split_sentences(section);
    if !sentences.iter().any(|s| mentions_prior(s)) {
        return section.to_string();
    }
    sentences
        .iter()
        .filter(|s| !mentions_prior(s))
        .map(|s| format!("{s}."))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deletes every sentence mentioning a prior study from both sections.
pub fn remove_prior_references(report: &Report) -> Report {
    Report {
        findings: strip_prior_sentences(&report.findings),
        impression: strip_prior_sentences(&report.impression),
    }
}

pub fn detect_prior_reference(text: &str) -> bool {
    split_sentences(text).iter().any(|s| mentions_prior(s))
}

/// `[SOS] tokens [SEP]` truncated to `context` ids (keeping `[SEP]` last) and padded.
pub fn prepare_training_sequence(report: &Report, vocab: &Vocabulary, context: usize) -> Result<TokenSequence, TextError> {
    if context < 3 {
        return Err(TextError::ContextTooShort(context));
    }
    if report.is_empty() {
        return Err(TextError::EmptyReport);
    }
    let body = tokenize(&report.text(), vocab);
    let keep = body.len().min(context - 2);
    let mut ids = Vec::with_capacity(context);
    ids.push(vocab.sos());
    ids.extend_from_slice(&body[..keep]);
    ids.push(vocab.sep());
    let valid_len = ids.len();
    ids.resize(context, vocab.pad());
    Ok(TokenSequence { ids, valid_len })
}
