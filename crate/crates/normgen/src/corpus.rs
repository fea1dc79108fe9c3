//! Labeled sentence corpora: loading, vocabulary building, word-level
//! tokenization, deterministic splits, and a synthetic corpus generator.
//!
//! Label 0 marks the undesirable class, label 1 the acceptable one.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

const PUNCT_CHARS: [char; 6] = ['.', '!', '?', ',', ';', ':'];
/// Sentence-terminating punctuation for continuation truncation.
pub const SENTENCE_END: [&str; 3] = [".", "!", "?"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub label: u8,
}

impl LabeledSentence {
    pub fn new(text: impl Into<String>, label: u8) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("empty sentence text".into()));
        }
        if label > 1 {
            return Err(Error::InvalidInput(format!("label {label} not in {{0,1}}")));
        }
        Ok(LabeledSentence { text, label })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(pub Vec<usize>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub max_size: usize,
}

impl Vocabulary {
    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("token id {} >= |V| = {}", id, self.size())))
    }

    /// Canonical JSON used both on disk and for hashing.
    pub fn to_json(&self) -> String {
        serde_json::json!({"max_size": self.max_size, "tokens": self.tokens}).to_string()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            max_size: usize,
            tokens: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(s)
            .map_err(|e| Error::Parse { line: 1, msg: format!("vocabulary json: {e}") })?;
        let mut v = Vocabulary {
            tokens: raw.tokens,
            index: HashMap::new(),
            max_size: raw.max_size,
        };
        v.rebuild_index();
        Ok(v)
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        hex_encode(&digest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&s)
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load a labeled corpus from JSONL ({"text", "label"}) or TSV (`text<TAB>label`).
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<LabeledSentence>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_corpus(&content, format)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

pub fn parse_corpus(content: &str, format: CorpusFormat) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (text, label) = match format {
            CorpusFormat::Jsonl => {
                #[derive(Deserialize)]
                struct Rec {
                    text: String,
                    label: i64,
                }
                let rec: Rec = serde_json::from_str(line)
                    .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
                (rec.text, rec.label)
            }
            CorpusFormat::Tsv => {
                let mut parts = line.splitn(2, '\t');
                let text = parts.next().unwrap_or("").to_string();
                let label_str = parts.next().ok_or_else(|| Error::Parse {
                    line: lineno,
                    msg: "missing tab-separated label".into(),
                })?;
                let label: i64 = label_str.trim().parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("label '{label_str}' is not an integer"),
                })?;
                (text, label)
            }
        };
        if !(0..=1).contains(&label) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("label {label} not in {{0,1}}"),
            });
        }
        out.push(LabeledSentence::new(text, label as u8).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn save_corpus_jsonl(sentences: &[LabeledSentence], path: &Path) -> Result<()> {
    let mut buf = String::new();
    for s in sentences {
        buf.push_str(&serde_json::json!({"text": s.text, "label": s.label}).to_string());
        buf.push('\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Lowercase, whitespace-split, and split the punctuation characters
/// `. ! ? , ; :` into their own tokens.
pub fn word_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for chunk in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if PUNCT_CHARS.contains(&ch) {
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
    }
    words
}

/// Rank tokens by frequency (lexicographic tie-break) and keep the top
/// `max_size - 4` after the reserved entries.
pub fn build_vocab(sentences: &[LabeledSentence], max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() + 1 {
        return Err(Error::InvalidInput(format!(
            "max_size {max_size} below reserved count {}",
            RESERVED.len() + 1
        )));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for s in sentences {
        for w in word_split(&s.text) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    let mut v = Vocabulary {
        tokens,
        index: HashMap::new(),
        max_size,
    };
    v.rebuild_index();
    Ok(v)
}

/// Tokenize text with BOS prepended; unknown words map to UNK. Total for all input.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![BOS];
    for w in word_split(text) {
        ids.push(vocab.id(&w).unwrap_or(UNK));
    }
    TokenSequence(ids)
}

/// Space-join tokens, with no space before punctuation; reserved tokens dropped.
pub fn detokenize(tokens: &TokenSequence, vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in &tokens.0 {
        let tok = vocab.token(id)?;
        if id < RESERVED.len() {
            continue;
        }
        let is_punct = tok.len() == 1 && PUNCT_CHARS.contains(&tok.chars().next().unwrap());
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<LabeledSentence>,
    pub validation: Vec<LabeledSentence>,
    pub test: Vec<LabeledSentence>,
    pub split_seed: u64,
}

/// Deterministic shuffled split into (train, validation, test).
pub fn split(
    sentences: &[LabeledSentence],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::InvalidInput("split ratios must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split ratios sum to {} != 1",
            a + b + c
        )));
    }
    if sentences.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 sentences to split, got {}",
            sentences.len()
        )));
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = sentences.len();
    let n_train = ((n as f64) * a).round() as usize;
    let n_val = ((n as f64) * b).round() as usize;
    let n_train = n_train.min(n - 2).max(1);
    let n_val = n_val.min(n - n_train - 1).max(1);

    let pick = |ids: &[usize]| ids.iter().map(|&i| sentences[i].clone()).collect::<Vec<_>>();
    Ok(CorpusSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
        split_seed: seed,
    })
}

/// Template-grammar synthetic corpus. `{marker}` slots are filled from the
/// benign pool for label 1 and the undesirable pool for label 0; every other
/// `{name}` slot draws from `pools[name]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub benign_markers: Vec<String>,
    pub undesirable_markers: Vec<String>,
    pub templates: Vec<String>,
    #[serde(default)]
    pub pools: BTreeMap<String, Vec<String>>,
    pub count_per_class: usize,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.benign_markers.is_empty() || self.undesirable_markers.is_empty() {
            return Err(Error::InvalidInput("marker pools must be non-empty".into()));
        }
        let benign: HashSet<&String> = self.benign_markers.iter().collect();
        let bad: HashSet<&String> = self.undesirable_markers.iter().collect();
        if benign.intersection(&bad).next().is_some() {
            return Err(Error::InvalidInput("marker pools overlap".into()));
        }
        // Undesirable markers may not leak into label-1 sentences through
        // other pools or template literals.
        for (name, pool) in &self.pools {
            for w in pool {
                if bad.contains(w) {
                    return Err(Error::InvalidInput(format!(
                        "pool '{name}' contains undesirable marker '{w}'"
                    )));
                }
            }
        }
        for t in &self.templates {
            if !t.contains("{marker}") {
                return Err(Error::InvalidInput(format!(
                    "template '{t}' lacks a {{marker}} slot"
                )));
            }
            for w in word_split(t) {
                if bad.contains(&w) {
                    return Err(Error::InvalidInput(format!(
                        "template literal contains undesirable marker '{w}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<LabeledSentence>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(spec.count_per_class * 2);
    for k in 0..spec.count_per_class * 2 {
        let label = (k % 2) as u8; // interleave 1,0,1,0,...
        let label = 1 - label;
        let template = spec.templates.choose(&mut rng).ok_or_else(|| {
            Error::InvalidInput("synthetic spec has no templates".into())
        })?;
        let marker_pool = if label == 1 {
            &spec.benign_markers
        } else {
            &spec.undesirable_markers
        };
        let mut text = String::new();
        let mut rest = template.as_str();
        while let Some(start) = rest.find('{') {
            text.push_str(&rest[..start]);
            let end = rest[start..].find('}').ok_or_else(|| {
                Error::InvalidInput(format!("unbalanced braces in template '{template}'"))
            })? + start;
            let slot = &rest[start + 1..end];
            let word = if slot == "marker" {
                marker_pool.choose(&mut rng).unwrap()
            } else {
                spec.pools
                    .get(slot)
                    .and_then(|p| p.choose(&mut rng))
                    .ok_or_else(|| Error::InvalidInput(format!("unknown or empty pool '{slot}'")))?
            };
            text.push_str(word);
            rest = &rest[end + 1..];
        }
        text.push_str(rest);
        out.push(LabeledSentence::new(text, label)?);
    }
    Ok(out)
}
