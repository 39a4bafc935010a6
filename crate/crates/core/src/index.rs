//! Cached explanation embeddings with exhaustive top-k cosine retrieval.
//!
//! File layout (little-endian):
//!
//! ```text
//! "FCIX" | version u16 | dimension u32 | count u32
//! | identity_len u32 | identity utf-8
//! | count × (id_len u32 | id utf-8)
//! | count × dimension × f32
//! ```

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::ExplanationRecord;
use crate::encoder::{Embedding, Encoder};
use crate::{Error, Result};

const INDEX_MAGIC: &[u8; 4] = b"FCIX";
const INDEX_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub explanation_id: String,
    pub similarity: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dimension: usize,
    ids: Vec<String>,
    /// Row-major, unit-normalized (zero rows stay zero).
    vectors: Vec<f32>,
    norms: Vec<f64>,
    encoder_identity: String,
    built_at: Option<DateTime<Utc>>,
    position: HashMap<String, usize>,
}

impl PartialEq for EmbeddingIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dimension == other.dimension
            && self.ids == other.ids
            && self.encoder_identity == other.encoder_identity
            && self.vectors.iter().map(|v| v.to_bits()).eq(other.vectors.iter().map(|v| v.to_bits()))
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

impl EmbeddingIndex {
    /// Assembles an index from raw vectors, normalizing each one.
    pub fn from_vectors(
        ids: Vec<String>,
        vectors: &[Vec<f64>],
        dimension: usize,
        encoder_identity: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let mut flat = Vec::with_capacity(ids.len() * dimension);
        for v in vectors {
            if v.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("embedding"));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            flat.extend(v.iter().map(|x| (x * scale) as f32));
        }
        Self::from_parts(dimension, ids, flat, encoder_identity.into(), Some(Utc::now()))
    }

    fn from_parts(
        dimension: usize,
        ids: Vec<String>,
        vectors: Vec<f32>,
        encoder_identity: String,
        built_at: Option<DateTime<Utc>>,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidArgument("index dimension must be > 0".into()));
        }
        let mut position = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if position.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        let norms = vectors.chunks(dimension).map(row_norm).collect();
        Ok(Self {
            dimension,
            ids,
            vectors,
            norms,
            encoder_identity,
            built_at,
            position,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn encoder_identity(&self) -> &str {
        &self.encoder_identity
    }

    /// Set for freshly built indexes; `None` after loading from disk.
    pub fn built_at(&self) -> Option<DateTime<Utc>> {
        self.built_at
    }

    pub fn contains(&self, id: &str) -> bool {
        self.position.contains_key(id)
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.position
            .get(id)
            .map(|&i| &self.vectors[i * self.dimension..(i + 1) * self.dimension])
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if query.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        if query.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("query embedding"));
        }
        Ok(())
    }

    fn row_similarity(&self, row: usize, unit_query: &[f64]) -> f64 {
        let norm = self.norms[row];
        if norm == 0.0 {
            return 0.0;
        }
        let v = &self.vectors[row * self.dimension..(row + 1) * self.dimension];
        let dot: f64 = v.iter().zip(unit_query).map(|(&a, b)| f64::from(a) * b).sum();
        (dot / norm).clamp(-1.0, 1.0)
    }

    fn unit_query(query: &[f64]) -> Option<Vec<f64>> {
        let norm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm > 0.0).then(|| query.iter().map(|x| x / norm).collect())
    }

    /// Cosine similarity of `query` against every stored vector, in index order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.check_query(query)?;
        let Some(q) = Self::unit_query(query) else {
            return Ok(vec![0.0; self.len()]);
        };
        Ok(crate::par::map_range(self.len(), |i| self.row_similarity(i, &q)))
    }

    /// [`scores`](Self::scores) on the calling thread only.
    pub fn scores_sequential(&self, query: &[f64]) -> Result<Vec<f64>> {
        self.check_query(query)?;
        let Some(q) = Self::unit_query(query) else {
            return Ok(vec![0.0; self.len()]);
        };
        Ok((0..self.len()).map(|i| self.row_similarity(i, &q)).collect())
    }

    fn rank(&self, scores: Vec<f64>, k: usize) -> Vec<RetrievalHit> {
        let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        };
        let mut scored: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Vec::new();
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        scored
            .into_iter()
            .enumerate()
            .map(|(r, (i, s))| RetrievalHit {
                explanation_id: self.ids[i].clone(),
                similarity: s,
                rank: r + 1,
            })
            .collect()
    }

    /// Exact top-k by cosine similarity; ties go to the smaller id.
    pub fn query_top_k(&self, query: &Embedding, k: usize) -> Result<Vec<RetrievalHit>> {
        let scores = self.scores(query.as_slice())?;
        Ok(self.rank(scores, k))
    }

    pub fn query_top_k_sequential(&self, query: &Embedding, k: usize) -> Result<Vec<RetrievalHit>> {
        let scores = self.scores_sequential(query.as_slice())?;
        Ok(self.rank(scores, k))
    }

    /// Cosine between `query` and the stored vector for `id`.
    pub fn similarity_to(&self, id: &str, query: &Embedding) -> Result<f64> {
        self.check_query(query.as_slice())?;
        let row = *self
            .position
            .get(id)
            .ok_or_else(|| Error::MissingFromIndex(id.to_string()))?;
        Ok(match Self::unit_query(query.as_slice()) {
            Some(q) => self.row_similarity(row, &q),
            None => 0.0,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.dimension as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u32).to_le_bytes())?;
        write_str(&mut w, &self.encoder_identity)?;
        for id in &self.ids {
            write_str(&mut w, id)?;
        }
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::format("index", e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::format("index", "bad magic"));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(bad)?;
        let version = u16::from_le_bytes(b2);
        if version != INDEX_VERSION {
            return Err(Error::format("index", format!("unsupported version {version}")));
        }
        let dimension = read_u32(&mut r)? as usize;
        let count = read_u32(&mut r)? as usize;
        let identity = read_str(&mut r)?;
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            ids.push(read_str(&mut r)?);
        }
        let n = count
            .checked_mul(dimension)
            .ok_or_else(|| Error::format("index", "size overflow"))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(bad)?;
        if raw.len() != n * 4 {
            return Err(Error::format(
                "index",
                format!("expected {} vector bytes, found {}", n * 4, raw.len()),
            ));
        }
        let vectors: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index vectors"));
        }
        Self::from_parts(dimension, ids, vectors, identity, None)
    }

    /// Writes to a temporary sibling and renames, so a failed write never
    /// leaves a partial index behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(self.vectors.len() * 4 + self.ids.len() * 16 + 64);
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("index", e.to_string()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::format("index", format!("string length {len} implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("index", e.to_string()))?;
    String::from_utf8(buf).map_err(|e| Error::format("index", e.to_string()))
}

/// Encodes every explanation once and stores the normalized vectors.
pub fn build_index(explanations: &[ExplanationRecord], encoder: &dyn Encoder) -> Result<EmbeddingIndex> {
    if explanations.is_empty() {
        return Err(Error::InvalidArgument("no explanations to index".into()));
    }
    let mut seen = HashSet::new();
    for e in explanations {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
    }
    let texts: Vec<String> = explanations.iter().map(|e| e.text.clone()).collect();
    let embeddings = encoder.encode_batch(&texts)?;
    let descriptor = encoder.descriptor();
    let vectors: Vec<Vec<f64>> = embeddings.into_iter().map(|e| e.0).collect();
    let ids = explanations.iter().map(|e| e.id.clone()).collect();
    EmbeddingIndex::from_vectors(ids, &vectors, descriptor.dimension, descriptor.identity)
}

/// Similarity cutoff `t = mean − std` over gold-pair cosines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub t: f64,
    pub mean: f64,
    pub std: f64,
    pub n_calibration: usize,
}

impl Threshold {
    /// Uses the population standard deviation, accumulated with Welford's
    /// update so a constant input yields exactly that constant and zero spread.
    pub fn from_similarities(similarities: &[f64]) -> Result<Self> {
        let n = similarities.len();
        if n < 2 {
            return Err(Error::InsufficientCalibration { needed: 2, got: n });
        }
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, &s) in similarities.iter().enumerate() {
            let d = s - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (s - mean);
        }
        let std = (m2 / n as f64).sqrt();
        Ok(Self {
            t: mean - std,
            mean,
            std,
            n_calibration: n,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("threshold serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&src).map_err(|e| Error::format("threshold", e.to_string()))
    }
}

/// Cosine between each validation claim and its gold explanation's cached
/// vector, summarized as a [`Threshold`].
pub fn calibrate_threshold(
    index: &EmbeddingIndex,
    encoder: &dyn Encoder,
    validation_pairs: &[(String, String)],
) -> Result<Threshold> {
    if validation_pairs.len() < 2 {
        return Err(Error::InsufficientCalibration {
            needed: 2,
            got: validation_pairs.len(),
        });
    }
    for (_, gold) in validation_pairs {
        if !index.contains(gold) {
            return Err(Error::MissingFromIndex(gold.clone()));
        }
    }
    let claims: Vec<String> = validation_pairs.iter().map(|(c, _)| c.clone()).collect();
    let embeddings = encoder.encode_batch(&claims)?;
    let sims = validation_pairs
        .iter()
        .zip(&embeddings)
        .map(|((_, gold), emb)| index.similarity_to(gold, emb))
        .collect::<Result<Vec<f64>>>()?;
    Threshold::from_similarities(&sims)
}

/// Hits with similarity strictly above `t`, order preserved.
pub fn filter_hits(hits: &[RetrievalHit], threshold: f64) -> Vec<RetrievalHit> {
    hits.iter().filter(|h| h.similarity > threshold).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::HashedEncoder;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_index(n: usize, dim: usize, seed: u64) -> (EmbeddingIndex, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vecs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ids = (0..n).map(|i| format!("e{i:04}")).collect();
        (EmbeddingIndex::from_vectors(ids, &vecs, dim, "test").unwrap(), vecs)
    }

    /// Full sort of independently computed cosines.
    fn brute_force(index: &EmbeddingIndex, q: &[f64], k: usize) -> Vec<(String, f64)> {
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut all: Vec<(String, f64)> = index
            .ids()
            .iter()
            .map(|id| {
                let v: Vec<f64> = index.vector(id).unwrap().iter().map(|&x| f64::from(x)).collect();
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                let s = if vn == 0.0 || qn == 0.0 { 0.0 } else { dot / (vn * qn) };
                (id.clone(), s)
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn planted_vector_ranks_first() {
        let (index, vecs) = random_index(50, 8, 1);
        let hits = index.query_top_k(&Embedding(vecs[17].clone()), 10).unwrap();
        assert_eq!(hits[0].explanation_id, "e0017");
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
        assert_eq!(hits.len(), 10);
        assert!(hits.iter().enumerate().all(|(i, h)| h.rank == i + 1));
    }

    #[test]
    fn zero_query_orders_by_id() {
        let ids = vec!["b".to_string(), "a".to_string(), "c".to_string()];
        let vecs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let index = EmbeddingIndex::from_vectors(ids, &vecs, 2, "t").unwrap();
        let hits = index.query_top_k(&Embedding(vec![0.0, 0.0]), 10).unwrap();
        let order: Vec<_> = hits.iter().map(|h| h.explanation_id.as_str()).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert!(hits.iter().all(|h| h.similarity == 0.0));
    }

    #[test]
    fn five_vector_hand_fixture() {
        let ids: Vec<String> = ["e1", "e2", "e3", "e4", "e5"].iter().map(|s| s.to_string()).collect();
        let vecs = vec![
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![-1.0, 0.0],
            vec![2.0, 1.0],
        ];
        let index = EmbeddingIndex::from_vectors(ids, &vecs, 2, "t").unwrap();
        let hits = index.query_top_k(&Embedding(vec![1.0, 0.0]), 5).unwrap();
        // cosines: e1 1, e5 2/√5, e3 1/√2, e2 0, e4 -1
        let order: Vec<_> = hits.iter().map(|h| h.explanation_id.as_str()).collect();
        assert_eq!(order, vec!["e1", "e5", "e3", "e2", "e4"]);
        assert!((hits[1].similarity - 2.0 / 5f64.sqrt()).abs() < 1e-6);
        assert!((hits[2].similarity - 0.5f64.sqrt()).abs() < 1e-6);
        assert!((hits[4].similarity + 1.0).abs() < 1e-6);
    }

    #[test]
    fn query_errors() {
        let empty = EmbeddingIndex::from_vectors(vec![], &[], 3, "t").unwrap();
        assert!(matches!(empty.query_top_k(&Embedding(vec![0.0; 3]), 10), Err(Error::EmptyIndex)));
        let (index, _) = random_index(3, 4, 2);
        assert!(matches!(
            index.query_top_k(&Embedding(vec![1.0; 3]), 10),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn stored_vectors_are_unit_or_zero() {
        let vecs = vec![vec![3.0, 4.0], vec![0.0, 0.0]];
        let index = EmbeddingIndex::from_vectors(vec!["a".into(), "b".into()], &vecs, 2, "t").unwrap();
        assert!((row_norm(index.vector("a").unwrap()) - 1.0).abs() < 1e-6);
        assert_eq!(row_norm(index.vector("b").unwrap()), 0.0);
        assert!(EmbeddingIndex::from_vectors(vec!["a".into(), "a".into()], &vecs, 2, "t").is_err());
    }

    #[test]
    fn build_single_and_rebuild_identical() {
        let enc = HashedEncoder::new(16, 0).unwrap();
        let exps: Vec<ExplanationRecord> = (0..5)
            .map(|i| ExplanationRecord {
                id: format!("e{i}"),
                text: format!("explanation text {i}"),
                date: None,
                source: None,
            })
            .collect();
        assert_eq!(build_index(&exps[..1], &enc).unwrap().len(), 1);
        let mut a = Vec::new();
        let mut b = Vec::new();
        build_index(&exps, &enc).unwrap().write_to(&mut a).unwrap();
        build_index(&exps, &enc).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(build_index(&[], &enc).is_err());
    }

    #[test]
    fn file_layout_header() {
        let (index, _) = random_index(2, 3, 4);
        let mut buf = Vec::new();
        index.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FCIX");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), 1);
        assert_eq!(u32::from_le_bytes(buf[6..10].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[10..14].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[14..18].try_into().unwrap()), 4);
        assert_eq!(&buf[18..22], b"test");
        let ids_len = 2 * (4 + 5);
        assert_eq!(buf.len(), 22 + ids_len + 2 * 3 * 4);
        assert!(EmbeddingIndex::read_from(&buf[..buf.len() - 2]).is_err());
    }

    #[test]
    fn threshold_arithmetic() {
        let flat = Threshold::from_similarities(&[0.8, 0.8, 0.8]).unwrap();
        assert_eq!((flat.mean, flat.std, flat.t), (0.8, 0.0, 0.8));
        let two = Threshold::from_similarities(&[0.9, 0.7]).unwrap();
        assert_eq!(two.t, 0.7);
        assert!((two.mean - 0.8).abs() < 1e-15 && (two.std - 0.1).abs() < 1e-15);
        assert!(matches!(
            Threshold::from_similarities(&[0.5]),
            Err(Error::InsufficientCalibration { .. })
        ));
    }

    #[test]
    fn calibration_requires_gold_in_index() {
        let enc = HashedEncoder::new(8, 0).unwrap();
        let exps = vec![
            ExplanationRecord { id: "e1".into(), text: "masks help".into(), date: None, source: None },
            ExplanationRecord { id: "e2".into(), text: "garlic does nothing".into(), date: None, source: None },
        ];
        let index = build_index(&exps, &enc).unwrap();
        let pairs = vec![
            ("masks help".to_string(), "e1".to_string()),
            ("garlic does nothing".to_string(), "e2".to_string()),
        ];
        let t = calibrate_threshold(&index, &enc, &pairs).unwrap();
        assert!((t.mean - 1.0).abs() < 1e-6 && t.std < 1e-6);
        let missing = vec![pairs[0].clone(), ("x".to_string(), "e9".to_string())];
        assert!(matches!(
            calibrate_threshold(&index, &enc, &missing),
            Err(Error::MissingFromIndex(_))
        ));
        assert!(calibrate_threshold(&index, &enc, &pairs[..1]).is_err());
    }

    fn hit(id: &str, s: f64, rank: usize) -> RetrievalHit {
        RetrievalHit { explanation_id: id.into(), similarity: s, rank }
    }

    #[test]
    fn filter_is_strict() {
        let hits = vec![hit("a", 0.9, 1), hit("b", 0.7, 2), hit("c", 0.5, 3)];
        let kept = filter_hits(&hits, 0.6);
        assert_eq!(kept, hits[..2].to_vec());
        assert!(filter_hits(&hits, 0.95).is_empty());
        assert_eq!(filter_hits(&hits, 0.7).len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn top_k_matches_brute_force(n in 1usize..1000, dim in 1usize..12, seed in any::<u64>(), k in 1usize..20) {
            let (index, _) = random_index(n, dim, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let hits = index.query_top_k(&Embedding(q.clone()), k).unwrap();
            let want = brute_force(&index, &q, k);
            prop_assert_eq!(hits.len(), want.len());
            for (h, (id, s)) in hits.iter().zip(&want) {
                prop_assert!((h.similarity - s).abs() < 1e-9);
                if (h.similarity - s).abs() < 1e-12 { prop_assert_eq!(&h.explanation_id, id); }
            }
            prop_assert_eq!(index.query_top_k_sequential(&Embedding(q), k).unwrap(), hits);
        }

        #[test]
        fn rank_order_scale_invariant(seed in any::<u64>(), alpha in 0.01f64..100.0) {
            let (index, _) = random_index(200, 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = q.iter().map(|x| x * alpha).collect();
            let a: Vec<_> = index.query_top_k(&Embedding(q), 10).unwrap().into_iter().map(|h| h.explanation_id).collect();
            let b: Vec<_> = index.query_top_k(&Embedding(scaled), 10).unwrap().into_iter().map(|h| h.explanation_id).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn filter_matches_brute_force(sims in prop::collection::vec(-1.0f64..1.0, 0..30), t in -1.0f64..1.0) {
            let hits: Vec<_> = sims.iter().enumerate().map(|(i, &s)| hit(&format!("h{i}"), s, i + 1)).collect();
            let mut want = Vec::new();
            for h in &hits {
                if h.similarity > t { want.push(h.clone()); }
            }
            prop_assert_eq!(filter_hits(&hits, t), want);
        }
    }
}
