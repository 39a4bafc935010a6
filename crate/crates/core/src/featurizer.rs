//! Tokenization, vocabularies, TF / TF-IDF sparse vectors and the
//! classical baseline feature layout.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Vocabulary slots reserved per text in the baseline layout.
pub const BASELINE_VOCAB_WIDTH: usize = 5000;
/// `[claim TF | explanation TF | TF-IDF cosine]`.
pub const BASELINE_FEATURE_DIM: usize = 2 * BASELINE_VOCAB_WIDTH + 1;

const ENGLISH_STOP_WORDS: &str = include_str!("../data/english_stopwords.txt");

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn parse_stop_words(src: &str) -> HashSet<String> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// The bundled English stop-word list.
pub fn english_stop_words() -> HashSet<String> {
    parse_stop_words(ENGLISH_STOP_WORDS)
}

pub fn load_stop_words(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_stop_words(&src))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VocabEntry {
    term: String,
    index: usize,
    df: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VocabFile {
    corpus_size: usize,
    terms: Vec<VocabEntry>,
}

/// Term → dense index map with document frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    terms: Vec<String>,
    term_to_index: HashMap<String, usize>,
    document_frequency: Vec<u32>,
    corpus_size: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.term_to_index.get(term).copied()
    }

    pub fn term(&self, index: usize) -> Option<&str> {
        self.terms.get(index).map(String::as_str)
    }

    pub fn document_frequency(&self, index: usize) -> u32 {
        self.document_frequency[index]
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    /// Smoothed inverse document frequency `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, index: usize) -> f64 {
        let n = self.corpus_size as f64;
        let df = self.document_frequency[index] as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            corpus_size: self.corpus_size,
            terms: self
                .terms
                .iter()
                .enumerate()
                .map(|(i, t)| VocabEntry {
                    term: t.clone(),
                    index: i,
                    df: self.document_frequency[i],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(src).map_err(|e| Error::format("vocabulary", e.to_string()))?;
        let mut entries = file.terms;
        entries.sort_by_key(|e| e.index);
        let mut terms = Vec::with_capacity(entries.len());
        let mut document_frequency = Vec::with_capacity(entries.len());
        let mut term_to_index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            if e.index != i {
                return Err(Error::format("vocabulary", format!("index {} not dense", e.index)));
            }
            if term_to_index.insert(e.term.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate term {:?}", e.term)));
            }
            terms.push(e.term);
            document_frequency.push(e.df);
        }
        Ok(Self {
            terms,
            term_to_index,
            document_frequency,
            corpus_size: file.corpus_size,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&src)
    }
}

/// Keeps the `max_terms` most frequent non-stop-word terms, ordered by
/// descending total count with lexicographic tie-breaks.
pub fn build_vocabulary(
    documents: &[Vec<String>],
    max_terms: usize,
    stop_words: &HashSet<String>,
) -> Result<Vocabulary> {
    if documents.is_empty() {
        return Err(Error::InvalidArgument("no documents".into()));
    }
    let mut counts: HashMap<&str, (u64, u32)> = HashMap::new();
    for doc in documents {
        let mut seen = HashSet::new();
        for tok in doc {
            if stop_words.contains(tok) {
                continue;
            }
            let entry = counts.entry(tok.as_str()).or_default();
            entry.0 += 1;
            if seen.insert(tok.as_str()) {
                entry.1 += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidArgument(
            "documents contain no non-stop-word terms".into(),
        ));
    }
    let mut ranked: Vec<(&str, u64, u32)> = counts.into_iter().map(|(t, (n, df))| (t, n, df)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_terms);

    let terms: Vec<String> = ranked.iter().map(|r| r.0.to_string()).collect();
    let document_frequency = ranked.iter().map(|r| r.2).collect();
    let term_to_index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    Ok(Vocabulary {
        terms,
        term_to_index,
        document_frequency,
        corpus_size: documents.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    dimension: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Entries must be strictly increasing in index, below `dimension`, and finite.
    pub fn new(dimension: usize, entries: Vec<(usize, f64)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::InvalidArgument("sparse indices not strictly increasing".into()));
            }
        }
        if let Some(&(i, _)) = entries.last() {
            if i >= dimension {
                return Err(Error::InvalidArgument(format!("index {i} >= dimension {dimension}")));
            }
        }
        if entries.iter().any(|(_, w)| !w.is_finite()) {
            return Err(Error::NonFinite("sparse vector"));
        }
        Ok(Self { dimension, entries })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SparseVector) -> Result<f64> {
        if self.dimension != other.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: other.dimension,
            });
        }
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        let (a, b) = (&self.entries, &other.entries);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(acc)
    }

    /// Cosine similarity; 0.0 when either vector has zero norm.
    pub fn cosine(&self, other: &SparseVector) -> Result<f64> {
        let dot = self.dot(other)?;
        let denom = self.norm() * other.norm();
        Ok(if denom == 0.0 { 0.0 } else { (dot / denom).clamp(-1.0, 1.0) })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        for &(i, w) in &self.entries {
            out[i] = w;
        }
        out
    }

    fn scatter_into(&self, out: &mut [f64]) {
        for &(i, w) in &self.entries {
            out[i] = w;
        }
    }
}

/// Cosine similarity of dense vectors; 0.0 when either norm is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt() * nb.sqrt();
    Ok(if denom == 0.0 { 0.0 } else { (dot / denom).clamp(-1.0, 1.0) })
}

fn term_counts(tokens: &[String], vocab: &Vocabulary) -> Vec<(usize, f64)> {
    let mut counts: HashMap<usize, f64> = HashMap::new();
    for t in tokens {
        if let Some(i) = vocab.index_of(t) {
            *counts.entry(i).or_default() += 1.0;
        }
    }
    let mut entries: Vec<(usize, f64)> = counts.into_iter().collect();
    entries.sort_unstable_by_key(|e| e.0);
    entries
}

/// Raw in-vocabulary term counts.
pub fn tf_vector(tokens: &[String], vocab: &Vocabulary) -> SparseVector {
    SparseVector {
        dimension: vocab.len(),
        entries: term_counts(tokens, vocab),
    }
}

/// `tf · idf` per term, scaled to unit L2 norm (the zero vector stays zero).
pub fn tfidf_vector(tokens: &[String], vocab: &Vocabulary) -> SparseVector {
    let mut entries = term_counts(tokens, vocab);
    for (i, w) in entries.iter_mut() {
        *w *= vocab.idf(*i);
    }
    let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in entries.iter_mut() {
            *w /= norm;
        }
    }
    SparseVector {
        dimension: vocab.len(),
        entries,
    }
}

/// The 10,001-wide baseline input.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFeatures(Vec<f64>);

impl BaselineFeatures {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn similarity(&self) -> f64 {
        self.0[BASELINE_FEATURE_DIM - 1]
    }
}

/// Lays out `[claim TF | explanation TF | TF-IDF cosine]`, zero-padding each
/// TF block to 5000 slots when the vocabulary is smaller.
pub fn assemble_baseline_features(
    claim_tokens: &[String],
    explanation_tokens: &[String],
    vocab: &Vocabulary,
) -> Result<BaselineFeatures> {
    if vocab.len() > BASELINE_VOCAB_WIDTH {
        return Err(Error::InvalidArgument(format!(
            "vocabulary of {} terms exceeds the {BASELINE_VOCAB_WIDTH}-slot layout",
            vocab.len()
        )));
    }
    let mut out = vec![0.0; BASELINE_FEATURE_DIM];
    tf_vector(claim_tokens, vocab).scatter_into(&mut out[..BASELINE_VOCAB_WIDTH]);
    tf_vector(explanation_tokens, vocab)
        .scatter_into(&mut out[BASELINE_VOCAB_WIDTH..2 * BASELINE_VOCAB_WIDTH]);
    let sim = tfidf_vector(claim_tokens, vocab).cosine(&tfidf_vector(explanation_tokens, vocab))?;
    out[BASELINE_FEATURE_DIM - 1] = sim;
    Ok(BaselineFeatures(out))
}
