//! End-to-end claim checking.
//!
//! encode claim → top-k retrieval → keep hits with similarity `> t` →
//! per-candidate alignment probability → `p_truth` = unweighted mean →
//! `True` when `p_truth ≥ τ_B`, `False` otherwise, `NoEvidence` when no
//! candidate survives the similarity cut.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExplanationRecord, PairExample};
use crate::encoder::{Encoder, ExternalClient};
use crate::featurizer::{assemble_baseline_features, tokenize, Vocabulary};
use crate::index::{filter_hits, EmbeddingIndex, RetrievalHit, Threshold};
use crate::nn::{nonzero_entries, DenseNet};
use crate::{par, Error, Result};

/// Default retrieval depth before thresholding.
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    BaselineTfidfNet,
    BaselineWordvecNet,
    External,
}

/// Stage B: probability that a claim aligns with an explanation.
pub trait Verifier: Send + Sync {
    fn kind(&self) -> VerifierKind;

    /// One probability per explanation, each scored independently.
    fn probabilities(&self, claim: &str, explanations: &[&str]) -> Result<Vec<f64>>;
}

/// Feature function for the TF / TF-IDF baseline.
pub fn tfidf_pair_features(vocab: &Vocabulary) -> impl Fn(&PairExample) -> Result<Vec<f64>> + Sync + '_ {
    move |p| {
        assemble_baseline_features(&tokenize(&p.claim_text), &tokenize(&p.explanation_text), vocab)
            .map(|f| f.into_inner())
    }
}

fn concat_embeddings(encoder: &dyn Encoder, claim: &str, explanation: &str) -> Result<Vec<f64>> {
    let mut v = encoder.encode(claim)?.0;
    v.extend(encoder.encode(explanation)?.0);
    Ok(v)
}

/// Feature function for the averaged-word-vector baseline: `[claim | explanation]`.
pub fn wordvec_pair_features(encoder: &dyn Encoder) -> impl Fn(&PairExample) -> Result<Vec<f64>> + Sync + '_ {
    move |p| concat_embeddings(encoder, &p.claim_text, &p.explanation_text)
}

pub struct TfidfNetVerifier {
    vocab: Vocabulary,
    net: DenseNet,
}

impl TfidfNetVerifier {
    pub fn new(vocab: Vocabulary, net: DenseNet) -> Result<Self> {
        if net.input_dim() != crate::featurizer::BASELINE_FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: crate::featurizer::BASELINE_FEATURE_DIM,
                actual: net.input_dim(),
            });
        }
        Ok(Self { vocab, net })
    }
}

impl Verifier for TfidfNetVerifier {
    fn kind(&self) -> VerifierKind {
        VerifierKind::BaselineTfidfNet
    }

    fn probabilities(&self, claim: &str, explanations: &[&str]) -> Result<Vec<f64>> {
        let claim_tokens = tokenize(claim);
        explanations
            .iter()
            .map(|e| {
                let f = assemble_baseline_features(&claim_tokens, &tokenize(e), &self.vocab)?;
                Ok(self.net.forward_entries(&nonzero_entries(f.as_slice()))?[1])
            })
            .collect()
    }
}

pub struct WordvecNetVerifier {
    encoder: Arc<dyn Encoder>,
    net: DenseNet,
}

impl WordvecNetVerifier {
    pub fn new(encoder: Arc<dyn Encoder>, net: DenseNet) -> Result<Self> {
        let want = 2 * encoder.dimension();
        if net.input_dim() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                actual: net.input_dim(),
            });
        }
        Ok(Self { encoder, net })
    }
}

impl Verifier for WordvecNetVerifier {
    fn kind(&self) -> VerifierKind {
        VerifierKind::BaselineWordvecNet
    }

    fn probabilities(&self, claim: &str, explanations: &[&str]) -> Result<Vec<f64>> {
        let c = self.encoder.encode(claim)?.0;
        explanations
            .iter()
            .map(|e| {
                let mut x = c.clone();
                x.extend(self.encoder.encode(e)?.0);
                self.net.predict_prob(&x)
            })
            .collect()
    }
}

pub struct ExternalVerifier {
    client: Arc<ExternalClient>,
}

impl ExternalVerifier {
    pub fn new(client: Arc<ExternalClient>) -> Self {
        Self { client }
    }
}

impl Verifier for ExternalVerifier {
    fn kind(&self) -> VerifierKind {
        VerifierKind::External
    }

    fn probabilities(&self, claim: &str, explanations: &[&str]) -> Result<Vec<f64>> {
        let pairs: Vec<(&str, &str)> = explanations.iter().map(|e| (claim, *e)).collect();
        self.client.classify(&pairs)
    }
}

/// Verifier backed by a plain scoring function. Useful for fixtures and for
/// wiring in scorers that live outside this crate.
pub struct ScoreFnVerifier<F>(pub F);

impl<F> Verifier for ScoreFnVerifier<F>
where
    F: Fn(&str, &str) -> f64 + Send + Sync,
{
    fn kind(&self) -> VerifierKind {
        VerifierKind::External
    }

    fn probabilities(&self, claim: &str, explanations: &[&str]) -> Result<Vec<f64>> {
        Ok(explanations.iter().map(|e| (self.0)(claim, e)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    True,
    False,
    NoEvidence,
}

impl Label {
    /// Ties at the boundary are labeled `True`.
    pub fn from_probability(p_truth: f64, tau_b: f64) -> Self {
        if p_truth >= tau_b {
            Label::True
        } else {
            Label::False
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::True => "True",
            Label::False => "False",
            Label::NoEvidence => "NoEvidence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub similarity: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub encode: f64,
    pub retrieve: f64,
    pub verify: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.encode + self.retrieve + self.verify
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub label: Label,
    pub p_truth: Option<f64>,
    pub tau_b: f64,
    pub threshold_t: f64,
    /// In retrieval rank order.
    pub candidates: Vec<Candidate>,
    pub timings_ms: StageTimings,
}

impl Verdict {
    /// Same verdict with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings_ms: StageTimings::default(),
            ..self.clone()
        }
    }
}

/// Verdict plus the unfiltered ranking it was derived from.
#[derive(Debug, Clone)]
pub struct CheckDetail {
    pub verdict: Verdict,
    /// Top `max(k, 10)` hits before thresholding.
    pub ranked: Vec<RetrievalHit>,
}

/// Unweighted mean of candidate probabilities.
pub fn aggregate(probabilities: &[f64]) -> Option<f64> {
    if probabilities.is_empty() {
        None
    } else {
        Some(probabilities.iter().sum::<f64>() / probabilities.len() as f64)
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub struct Pipeline {
    encoder: Arc<dyn Encoder>,
    index: EmbeddingIndex,
    explanations: HashMap<String, String>,
    threshold: Threshold,
    verifier: Arc<dyn Verifier>,
    tau_b: f64,
    k: usize,
}

impl Pipeline {
    pub fn new(
        encoder: Arc<dyn Encoder>,
        index: EmbeddingIndex,
        explanations: &[ExplanationRecord],
        threshold: Threshold,
        verifier: Arc<dyn Verifier>,
        tau_b: f64,
    ) -> Result<Self> {
        if index.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let desc = encoder.descriptor();
        if desc.identity != index.encoder_identity() || desc.dimension != index.dimension() {
            return Err(Error::InvalidArgument(format!(
                "index was built with {:?} (dim {}), pipeline encoder is {:?} (dim {})",
                index.encoder_identity(),
                index.dimension(),
                desc.identity,
                desc.dimension
            )));
        }
        if !(tau_b > 0.0 && tau_b < 1.0) {
            return Err(Error::InvalidArgument(format!("tau_b {tau_b} outside (0, 1)")));
        }
        let texts: HashMap<String, String> = explanations
            .iter()
            .map(|e| (e.id.clone(), e.text.clone()))
            .collect();
        if let Some(id) = index.ids().iter().find(|id| !texts.contains_key(*id)) {
            return Err(Error::InvalidArgument(format!(
                "indexed explanation {id:?} has no text in the knowledge base"
            )));
        }
        Ok(Self {
            encoder,
            index,
            explanations: texts,
            threshold,
            verifier,
            tau_b,
            k: DEFAULT_TOP_K,
        })
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.k = k.max(1);
        self
    }

    pub fn index(&self) -> &EmbeddingIndex {
        &self.index
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn threshold(&self) -> &Threshold {
        &self.threshold
    }

    pub fn tau_b(&self) -> f64 {
        self.tau_b
    }

    /// Knowledge-base text of an indexed explanation.
    pub fn explanation_text(&self, id: &str) -> Option<&str> {
        self.explanations.get(id).map(String::as_str)
    }

    pub fn top_k(&self) -> usize {
        self.k
    }

    pub fn check_claim(&self, claim: &str) -> Result<Verdict> {
        self.check_claim_detailed(claim).map(|d| d.verdict)
    }

    pub fn check_claim_detailed(&self, claim: &str) -> Result<CheckDetail> {
        let start = Instant::now();
        let embedding = self.encoder.encode(claim)?;
        let encode = ms_since(start);

        let start = Instant::now();
        let ranked = self.index.query_top_k(&embedding, self.k.max(DEFAULT_TOP_K))?;
        let top: Vec<RetrievalHit> = ranked.iter().take(self.k).cloned().collect();
        let kept = filter_hits(&top, self.threshold.t);
        let retrieve = ms_since(start);

        let start = Instant::now();
        let texts: Vec<&str> = kept
            .iter()
            .map(|h| self.explanations[&h.explanation_id].as_str())
            .collect();
        let probs = if texts.is_empty() {
            Vec::new()
        } else {
            self.verifier.probabilities(claim, &texts)?
        };
        if probs.len() != kept.len() {
            return Err(Error::External(format!(
                "verifier returned {} probabilities for {} candidates",
                probs.len(),
                kept.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::External(format!("verifier probability {p} outside [0, 1]")));
        }
        let verify = ms_since(start);

        let p_truth = aggregate(&probs);
        let label = match p_truth {
            Some(p) => Label::from_probability(p, self.tau_b),
            None => Label::NoEvidence,
        };
        let candidates = kept
            .into_iter()
            .zip(probs)
            .map(|(h, prob)| Candidate {
                id: h.explanation_id,
                similarity: h.similarity,
                prob,
            })
            .collect();
        Ok(CheckDetail {
            verdict: Verdict {
                claim: claim.to_string(),
                label,
                p_truth,
                tau_b: self.tau_b,
                threshold_t: self.threshold.t,
                candidates,
                timings_ms: StageTimings {
                    encode,
                    retrieve,
                    verify,
                },
            },
            ranked,
        })
    }

    /// Order-preserving; a failing claim does not stop the batch.
    pub fn check_batch(&self, claims: &[String]) -> Vec<Result<Verdict>> {
        par::map(claims, |c| self.check_claim(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCalibration {
    pub tau_b: f64,
    pub mean_aligned: f64,
    pub mean_misaligned: f64,
    /// True when the class means were not ordered and 0.5 was used.
    pub fallback: bool,
}

/// Midpoint of the two class means of the verifier's probabilities.
pub fn boundary_from_means(mean_aligned: f64, mean_misaligned: f64) -> BoundaryCalibration {
    if mean_aligned <= mean_misaligned {
        log::warn!(
            "aligned mean {mean_aligned:.4} <= misaligned mean {mean_misaligned:.4}; using tau_b = 0.5"
        );
        return BoundaryCalibration {
            tau_b: 0.5,
            mean_aligned,
            mean_misaligned,
            fallback: true,
        };
    }
    BoundaryCalibration {
        tau_b: (mean_aligned + mean_misaligned) / 2.0,
        mean_aligned,
        mean_misaligned,
        fallback: false,
    }
}

pub fn calibrate_verifier_boundary(
    verifier: &dyn Verifier,
    validation_pairs: &[PairExample],
) -> Result<BoundaryCalibration> {
    let probs = par::try_map(validation_pairs, |p| {
        verifier
            .probabilities(&p.claim_text, &[p.explanation_text.as_str()])
            .map(|v| v[0])
    })
    .map_err(|(i, e)| Error::at(i, e))?;
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (p, prob) in validation_pairs.iter().zip(probs) {
        if p.label == 1 {
            pos.push(prob);
        } else {
            neg.push(prob);
        }
    }
    let (Some(mean_pos), Some(mean_neg)) = (aggregate(&pos), aggregate(&neg)) else {
        return Err(Error::InvalidArgument(
            "validation pairs must contain both labels".into(),
        ));
    };
    Ok(boundary_from_means(mean_pos, mean_neg))
}
