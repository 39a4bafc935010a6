//! Knowledge-base records, temporal splitting and training-pair generation.
//!
//! The on-disk corpus is JSON-lines with a `kind` discriminator:
//!
//! ```text
//! {"kind":"explanation","id":"e1","text":"...","date":"2020-03-01","source":"..."}
//! {"kind":"claim","id":"c1","text":"...","veracity":false,"gold_explanation_id":"e1","date":"2020-03-01"}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub text: String,
    /// `None` for claims that were never cross-validated.
    #[serde(default)]
    pub veracity: Option<bool>,
    pub gold_explanation_id: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Claim(ClaimRecord),
    Explanation(ExplanationRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Relevance between a claim and an explanation.
    A,
    /// Alignment of a claim with its explanation (veracity).
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub claim_text: String,
    pub explanation_text: String,
    pub label: u8,
    pub stage: Stage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorpusCounts {
    pub explanations: usize,
    pub claims: usize,
    pub labeled_claims: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    explanations: Vec<ExplanationRecord>,
    claims: Vec<ClaimRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, checking id uniqueness and cross-references.
    pub fn new(explanations: Vec<ExplanationRecord>, claims: Vec<ClaimRecord>) -> Result<Self> {
        if explanations.is_empty() && claims.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut seen = HashSet::new();
        for id in explanations.iter().map(|e| &e.id).chain(claims.iter().map(|c| &c.id)) {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let by_id: HashMap<String, usize> = explanations
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        for c in &claims {
            if !by_id.contains_key(&c.gold_explanation_id) {
                return Err(Error::DanglingReference {
                    claim: c.id.clone(),
                    explanation: c.gold_explanation_id.clone(),
                });
            }
        }
        Ok(Self {
            explanations,
            claims,
            by_id,
        })
    }

    pub fn explanations(&self) -> &[ExplanationRecord] {
        &self.explanations
    }

    pub fn claims(&self) -> &[ClaimRecord] {
        &self.claims
    }

    pub fn explanation(&self, id: &str) -> Option<&ExplanationRecord> {
        self.by_id.get(id).map(|&i| &self.explanations[i])
    }

    pub fn counts(&self) -> CorpusCounts {
        CorpusCounts {
            explanations: self.explanations.len(),
            claims: self.claims.len(),
            labeled_claims: self.claims.iter().filter(|c| c.veracity.is_some()).count(),
        }
    }

    /// Writes the corpus as JSON-lines, explanations first.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.explanations {
            serde_json::to_writer(&mut w, &Record::Explanation(e.clone()))?;
            w.write_all(b"\n")?;
        }
        for c in &self.claims {
            serde_json::to_writer(&mut w, &Record::Claim(c.clone()))?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_jsonl(BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

/// Loads a JSON-lines corpus file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let corpus = parse_jsonl(BufReader::new(file))?;
    let counts = corpus.counts();
    log::info!(
        "loaded {} explanations, {} claims ({} with veracity) from {}",
        counts.explanations,
        counts.claims,
        counts.labeled_claims,
        path.display()
    );
    Ok(corpus)
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut explanations = Vec::new();
    let mut claims = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let (id, text) = match &record {
            Record::Claim(c) => (&c.id, &c.text),
            Record::Explanation(e) => (&e.id, &e.text),
        };
        if id.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if text.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("record {id:?} has empty text"),
            });
        }
        match record {
            Record::Claim(c) => claims.push(c),
            Record::Explanation(e) => explanations.push(e),
        }
    }
    Corpus::new(explanations, claims)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    false_claim: String,
    #[serde(default)]
    true_claim: String,
    explanation: String,
    date: String,
    #[serde(default)]
    source: String,
}

/// Imports the spreadsheet layout `false_claim,true_claim,explanation,date,source`.
///
/// Row `n` (1-based) becomes explanation `exp-n`, false claim `claim-n-f`
/// and, when `true_claim` is non-empty, true claim `claim-n-t`.
pub fn import_csv<R: Read>(reader: R) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut explanations = Vec::new();
    let mut claims = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("bad date {:?}: {e}", row.date),
        })?;
        if row.explanation.is_empty() || row.false_claim.is_empty() {
            return Err(Error::Parse {
                line,
                message: "false_claim and explanation are required".into(),
            });
        }
        let n = i + 1;
        let exp_id = format!("exp-{n:06}");
        explanations.push(ExplanationRecord {
            id: exp_id.clone(),
            text: row.explanation,
            date: Some(date),
            source: (!row.source.is_empty()).then_some(row.source),
        });
        claims.push(ClaimRecord {
            id: format!("claim-{n:06}-f"),
            text: row.false_claim,
            veracity: Some(false),
            gold_explanation_id: exp_id.clone(),
            date,
        });
        if !row.true_claim.is_empty() {
            claims.push(ClaimRecord {
                id: format!("claim-{n:06}-t"),
                text: row.true_claim,
                veracity: Some(true),
                gold_explanation_id: exp_id,
                date,
            });
        }
    }
    Corpus::new(explanations, claims)
}

/// One side of a split: a set of explanations together with every claim
/// whose gold explanation is among them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub explanations: Vec<ExplanationRecord>,
    pub claims: Vec<ClaimRecord>,
}

impl Partition {
    pub fn is_empty(&self) -> bool {
        self.explanations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.explanations.len()
    }

    pub fn explanation_ids(&self) -> Vec<String> {
        self.explanations.iter().map(|e| e.id.clone()).collect()
    }

    fn from_ids(corpus: &Corpus, ids: &[String], claims_by_exp: &HashMap<&str, Vec<&ClaimRecord>>) -> Self {
        let mut explanations = Vec::with_capacity(ids.len());
        let mut claims = Vec::new();
        for id in ids {
            if let Some(e) = corpus.explanation(id) {
                explanations.push(e.clone());
                if let Some(cs) = claims_by_exp.get(id.as_str()) {
                    claims.extend(cs.iter().map(|&c| c.clone()));
                }
            }
        }
        claims.sort_by(|a, b| a.id.cmp(&b.id));
        Self {
            explanations,
            claims,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Partition,
    pub validation: Partition,
    pub test: Partition,
    pub cutoff_train_end: NaiveDate,
    pub cutoff_test_start: NaiveDate,
    /// Explanation ids left out: dated between the cutoffs, straddling them,
    /// or carrying no date at all.
    pub excluded: Vec<String>,
}

/// Persistable form of a split (explanation ids only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub cutoff_train_end: NaiveDate,
    pub cutoff_test_start: NaiveDate,
    pub val_fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub excluded: Vec<String>,
}

impl CorpusSplit {
    pub fn manifest(&self, val_fraction: f64, seed: u64) -> SplitManifest {
        SplitManifest {
            cutoff_train_end: self.cutoff_train_end,
            cutoff_test_start: self.cutoff_test_start,
            val_fraction,
            seed,
            train: self.train.explanation_ids(),
            validation: self.validation.explanation_ids(),
            test: self.test.explanation_ids(),
            excluded: self.excluded.clone(),
        }
    }

    pub fn from_manifest(corpus: &Corpus, m: &SplitManifest) -> Result<Self> {
        for id in m.train.iter().chain(&m.validation).chain(&m.test) {
            if corpus.explanation(id).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "split references unknown explanation {id:?}"
                )));
            }
        }
        let claims_by_exp = claims_by_explanation(corpus);
        Ok(Self {
            train: Partition::from_ids(corpus, &m.train, &claims_by_exp),
            validation: Partition::from_ids(corpus, &m.validation, &claims_by_exp),
            test: Partition::from_ids(corpus, &m.test, &claims_by_exp),
            cutoff_train_end: m.cutoff_train_end,
            cutoff_test_start: m.cutoff_test_start,
            excluded: m.excluded.clone(),
        })
    }
}

fn claims_by_explanation(corpus: &Corpus) -> HashMap<&str, Vec<&ClaimRecord>> {
    let mut map: HashMap<&str, Vec<&ClaimRecord>> = HashMap::new();
    for c in corpus.claims() {
        map.entry(c.gold_explanation_id.as_str()).or_default().push(c);
    }
    map
}

/// Splits the corpus by date, keeping each explanation together with all of
/// its claims.
///
/// A group (explanation plus claims) lands in train when every date it
/// carries is on or before `cutoff_train_end`, in test when every date is on
/// or after `cutoff_test_start`, and is excluded otherwise. Validation is a
/// seeded sample of `round(val_fraction * |train|)` train groups.
pub fn temporal_split(
    corpus: &Corpus,
    cutoff_train_end: NaiveDate,
    cutoff_test_start: NaiveDate,
    val_fraction: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    if cutoff_train_end >= cutoff_test_start {
        return Err(Error::InvalidArgument(format!(
            "train cutoff {cutoff_train_end} must precede test cutoff {cutoff_test_start}"
        )));
    }
    if !(0.0..=0.5).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction {val_fraction} outside [0, 0.5]"
        )));
    }
    let claims_by_exp = claims_by_explanation(corpus);
    // BTreeMap keeps the id order total and deterministic.
    let mut dates: BTreeMap<&str, Vec<NaiveDate>> = BTreeMap::new();
    for e in corpus.explanations() {
        let entry = dates.entry(e.id.as_str()).or_default();
        entry.extend(e.date);
        if let Some(cs) = claims_by_exp.get(e.id.as_str()) {
            entry.extend(cs.iter().map(|c| c.date));
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut excluded = Vec::new();
    for (id, ds) in dates {
        let (Some(lo), Some(hi)) = (ds.iter().min(), ds.iter().max()) else {
            log::warn!("explanation {id:?} has no date; excluded from split");
            excluded.push(id.to_string());
            continue;
        };
        if *hi <= cutoff_train_end {
            train.push(id.to_string());
        } else if *lo >= cutoff_test_start {
            test.push(id.to_string());
        } else {
            log::warn!("explanation {id:?} dated {lo}..{hi} falls between cutoffs; excluded");
            excluded.push(id.to_string());
        }
    }

    let n_val = (val_fraction * train.len() as f64).round() as usize;
    let mut order = train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_ids: HashSet<String> = order.into_iter().take(n_val).collect();
    let (mut validation, train): (Vec<String>, Vec<String>) =
        train.into_iter().partition(|id| val_ids.contains(id));
    validation.sort();

    if train.is_empty() && test.is_empty() && validation.is_empty() {
        log::warn!("temporal split produced no records");
    }

    Ok(CorpusSplit {
        train: Partition::from_ids(corpus, &train, &claims_by_exp),
        validation: Partition::from_ids(corpus, &validation, &claims_by_exp),
        test: Partition::from_ids(corpus, &test, &claims_by_exp),
        cutoff_train_end,
        cutoff_test_start,
        excluded,
    })
}

/// Relevance pairs: one positive per claim and `negatives_per_positive`
/// negatives drawn uniformly from the partition's other explanations.
pub fn generate_stage_a_pairs(
    partition: &Partition,
    seed: u64,
    negatives_per_positive: usize,
) -> Result<Vec<PairExample>> {
    if partition.claims.is_empty() {
        return Err(Error::InvalidArgument("partition has no claims".into()));
    }
    let exps = &partition.explanations;
    if negatives_per_positive > 0 && exps.len() < 2 {
        return Err(Error::InvalidArgument(
            "at least two explanations are needed to sample negatives".into(),
        ));
    }
    let position: HashMap<&str, usize> = exps
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.as_str(), i))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(partition.claims.len() * (1 + negatives_per_positive));
    for claim in &partition.claims {
        let gold = *position.get(claim.gold_explanation_id.as_str()).ok_or_else(|| {
            Error::DanglingReference {
                claim: claim.id.clone(),
                explanation: claim.gold_explanation_id.clone(),
            }
        })?;
        pairs.push(PairExample {
            claim_text: claim.text.clone(),
            explanation_text: exps[gold].text.clone(),
            label: 1,
            stage: Stage::A,
        });
        for _ in 0..negatives_per_positive {
            let mut j = rng.random_range(0..exps.len() - 1);
            if j >= gold {
                j += 1;
            }
            pairs.push(PairExample {
                claim_text: claim.text.clone(),
                explanation_text: exps[j].text.clone(),
                label: 0,
                stage: Stage::A,
            });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// Alignment pairs: (claim, gold explanation, 1 if the claim is true).
pub fn generate_stage_b_pairs(partition: &Partition) -> Vec<PairExample> {
    let texts: HashMap<&str, &str> = partition
        .explanations
        .iter()
        .map(|e| (e.id.as_str(), e.text.as_str()))
        .collect();
    partition
        .claims
        .iter()
        .filter_map(|c| {
            let Some(veracity) = c.veracity else {
                log::warn!("claim {:?} has no veracity label; skipped", c.id);
                return None;
            };
            let Some(exp) = texts.get(c.gold_explanation_id.as_str()) else {
                log::warn!("claim {:?} gold explanation outside partition; skipped", c.id);
                return None;
            };
            Some(PairExample {
                claim_text: c.text.clone(),
                explanation_text: exp.to_string(),
                label: u8::from(veracity),
                stage: Stage::B,
            })
        })
        .collect()
}
