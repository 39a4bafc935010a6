//! Ranking and verdict metrics, end-to-end evaluation and latency benchmarking.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::Partition;
use crate::pipeline::{Label, Pipeline, StageTimings};
use crate::{par, Error, Result};

/// Cut-off for the recall metric.
pub const RECALL_DEPTH: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub claim_id: String,
    pub gold_explanation_id: String,
    /// 1-based position of the gold explanation; `None` if not in the list.
    pub rank: Option<usize>,
}

/// Mean reciprocal rank; an unretrieved gold contributes 0.
pub fn mrr(outcomes: &[RankingOutcome]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("no ranking outcomes".into()));
    }
    let sum: f64 = outcomes
        .iter()
        .map(|o| o.rank.map_or(0.0, |r| 1.0 / r as f64))
        .sum();
    Ok(sum / outcomes.len() as f64)
}

pub fn recall_at_k(outcomes: &[RankingOutcome], k: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InvalidArgument("no ranking outcomes".into()));
    }
    let hits = outcomes.iter().filter(|o| o.rank.is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / outcomes.len() as f64)
}

pub fn recall_at_10(outcomes: &[RankingOutcome]) -> Result<f64> {
    recall_at_k(outcomes, RECALL_DEPTH)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub no_evidence: usize,
    /// Claims whose check failed; excluded from the accuracy denominator.
    pub errors: usize,
}

impl Confusion {
    pub fn scored(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.scored();
        if n == 0 {
            0.0
        } else {
            (self.tp + self.tn) as f64 / n as f64
        }
    }
}

/// Accuracy over binary verdicts; `NoEvidence` is counted separately and
/// left out of the denominator.
pub fn accuracy(predicted: &[Label], gold: &[bool]) -> Result<(f64, Confusion)> {
    if predicted.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            actual: predicted.len(),
        });
    }
    let mut c = Confusion::default();
    for (p, &g) in predicted.iter().zip(gold) {
        match (p, g) {
            (Label::True, true) => c.tp += 1,
            (Label::True, false) => c.fp += 1,
            (Label::False, false) => c.tn += 1,
            (Label::False, true) => c.fn_ += 1,
            (Label::NoEvidence, _) => c.no_evidence += 1,
        }
    }
    Ok((c.accuracy(), c))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl StageStats {
    /// Median (mean of the middle pair for even counts) and nearest-rank p95.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Self {
            median_ms: median,
            p95_ms: s[rank - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub samples: usize,
    pub failures: usize,
    pub encode: StageStats,
    pub retrieve: StageStats,
    pub verify: StageStats,
    pub total: StageStats,
    /// Peak resident set size, when the platform exposes it.
    pub peak_rss_mb: Option<f64>,
}

impl LatencySummary {
    pub fn from_timings(timings: &[StageTimings], failures: usize) -> Self {
        let col = |f: fn(&StageTimings) -> f64| timings.iter().map(f).collect::<Vec<_>>();
        Self {
            samples: timings.len(),
            failures,
            encode: StageStats::from_samples(&col(|t| t.encode)),
            retrieve: StageStats::from_samples(&col(|t| t.retrieve)),
            verify: StageStats::from_samples(&col(|t| t.verify)),
            total: StageStats::from_samples(&col(|t| t.total())),
            peak_rss_mb: peak_rss_mb(),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>12} {:>12}", "stage", "median_ms", "p95_ms");
        for (name, s) in [
            ("encode", self.encode),
            ("retrieve", self.retrieve),
            ("verify", self.verify),
            ("total", self.total),
        ] {
            let _ = writeln!(out, "{:<10} {:>12.4} {:>12.4}", name, s.median_ms, s.p95_ms);
        }
        let _ = writeln!(out, "samples    {:>12}", self.samples);
        if self.failures > 0 {
            let _ = writeln!(out, "failures   {:>12}", self.failures);
        }
        match self.peak_rss_mb {
            Some(mb) => {
                let _ = writeln!(out, "peak_rss   {mb:>10.1}MB");
            }
            None => {
                let _ = writeln!(out, "peak_rss    unavailable");
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,median_ms,p95_ms\n");
        for (name, s) in [
            ("encode", self.encode),
            ("retrieve", self.retrieve),
            ("verify", self.verify),
            ("total", self.total),
        ] {
            let _ = writeln!(out, "{name},{},{}", s.median_ms, s.p95_ms);
        }
        out
    }
}

/// Peak resident memory from `/proc/self/status` (`VmHWM`).
pub fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mrr: f64,
    pub recall_at_10: f64,
    pub accuracy: f64,
    /// Claims with a veracity label that went through the full pipeline.
    pub n_claims: usize,
    /// Claims included in the ranking metrics.
    pub n_ranked: usize,
    /// Claims dropped because their gold explanation is not indexed.
    pub excluded_missing_gold: usize,
    pub confusion: Confusion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencySummary>,
}

impl EvalReport {
    pub fn without_timings(&self) -> Self {
        Self {
            latency: None,
            ..self.clone()
        }
    }

    pub fn to_table(&self) -> String {
        let c = &self.confusion;
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>10}", "metric", "value");
        let _ = writeln!(out, "{:<14} {:>10.4}", "MRR", self.mrr);
        let _ = writeln!(out, "{:<14} {:>10.4}", "Recall@10", self.recall_at_10);
        let _ = writeln!(out, "{:<14} {:>10.4}", "Accuracy", self.accuracy);
        let _ = writeln!(out, "{:<14} {:>10}", "claims", self.n_claims);
        let _ = writeln!(out, "{:<14} {:>10}", "ranked", self.n_ranked);
        let _ = writeln!(out, "{:<14} {:>10}", "tp/fp/tn/fn", format!("{}/{}/{}/{}", c.tp, c.fp, c.tn, c.fn_));
        let _ = writeln!(out, "{:<14} {:>10}", "no_evidence", c.no_evidence);
        let _ = writeln!(out, "{:<14} {:>10}", "errors", c.errors);
        if self.excluded_missing_gold > 0 {
            let _ = writeln!(out, "{:<14} {:>10}", "excluded", self.excluded_missing_gold);
        }
        if let Some(l) = &self.latency {
            out.push('\n');
            out.push_str(&l.to_table());
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let c = &self.confusion;
        format!(
            "mrr,recall_at_10,accuracy,n_claims,n_ranked,tp,fp,tn,fn,no_evidence,errors\n{},{},{},{},{},{},{},{},{},{},{}\n",
            self.mrr, self.recall_at_10, self.accuracy, self.n_claims, self.n_ranked,
            c.tp, c.fp, c.tn, c.fn_, c.no_evidence, c.errors
        )
    }
}

/// Ranking metrics from the unfiltered top-10 list of every claim, then
/// verdict accuracy from the full pipeline.
pub fn evaluate_pipeline(pipeline: &Pipeline, test: &Partition) -> Result<EvalReport> {
    let index = pipeline.index();
    let claims: Vec<_> = test
        .claims
        .iter()
        .filter(|c| {
            let present = index.contains(&c.gold_explanation_id);
            if !present {
                log::warn!(
                    "claim {:?}: gold explanation {:?} not indexed; excluded",
                    c.id,
                    c.gold_explanation_id
                );
            }
            present
        })
        .collect();
    let excluded = test.claims.len() - claims.len();
    if claims.is_empty() {
        return Err(Error::InvalidArgument("no evaluable claims in test split".into()));
    }

    let details = par::map(&claims, |c| pipeline.check_claim_detailed(&c.text));

    let mut outcomes = Vec::with_capacity(claims.len());
    let mut predicted = Vec::new();
    let mut gold = Vec::new();
    let mut timings = Vec::new();
    let mut errors = 0;
    for (claim, detail) in claims.iter().zip(details) {
        match detail {
            Ok(d) => {
                let rank = d
                    .ranked
                    .iter()
                    .take(RECALL_DEPTH)
                    .find(|h| h.explanation_id == claim.gold_explanation_id)
                    .map(|h| h.rank);
                outcomes.push(RankingOutcome {
                    claim_id: claim.id.clone(),
                    gold_explanation_id: claim.gold_explanation_id.clone(),
                    rank,
                });
                timings.push(d.verdict.timings_ms);
                if let Some(v) = claim.veracity {
                    predicted.push(d.verdict.label);
                    gold.push(v);
                }
            }
            Err(e) => {
                log::warn!("claim {:?} failed: {e}", claim.id);
                outcomes.push(RankingOutcome {
                    claim_id: claim.id.clone(),
                    gold_explanation_id: claim.gold_explanation_id.clone(),
                    rank: None,
                });
                if claim.veracity.is_some() {
                    errors += 1;
                }
            }
        }
    }
    let (acc, mut confusion) = accuracy(&predicted, &gold)?;
    confusion.errors = errors;
    Ok(EvalReport {
        mrr: mrr(&outcomes)?,
        recall_at_10: recall_at_10(&outcomes)?,
        accuracy: acc,
        n_claims: predicted.len() + errors,
        n_ranked: outcomes.len(),
        excluded_missing_gold: excluded,
        confusion,
        latency: Some(LatencySummary::from_timings(&timings, errors)),
    })
}

/// Per-stage latency over `repetitions` passes through `claims`, measured on
/// a single worker.
pub fn bench_latency(pipeline: &Pipeline, claims: &[String], repetitions: usize) -> LatencySummary {
    par::single_threaded(|| {
        let mut timings = Vec::with_capacity(claims.len() * repetitions);
        let mut failures = 0;
        for _ in 0..repetitions {
            for c in claims {
                let start = Instant::now();
                match pipeline.check_claim(c) {
                    Ok(v) => timings.push(v.timings_ms),
                    Err(e) => {
                        log::debug!("bench claim failed after {:?}: {e}", start.elapsed());
                        failures += 1;
                    }
                }
            }
        }
        LatencySummary::from_timings(&timings, failures)
    })
}
