//! Subcommand implementations. Each step reads the artifacts of the previous
//! ones from the work directory and writes its own:
//!
//! | step          | writes                                          |
//! |---------------|-------------------------------------------------|
//! | `ingest`      | `corpus.jsonl`                                  |
//! | `split`       | `split.json`                                    |
//! | `train-a`     | `vocab.json`, `stage_a.fcnn`, `stage_a_report.json` |
//! | `build-index` | `index.fcix`                                    |
//! | `calibrate`   | `threshold.json`                                |
//! | `train-b`     | `vocab.json`, `stage_b.fcnn`, `verifier.json`   |
//! | `eval`        | `report.json`                                   |

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use factcheck_core::corpus::{
    generate_stage_a_pairs, generate_stage_b_pairs, import_csv, load_corpus, temporal_split, Corpus,
    CorpusCounts, CorpusSplit, PairExample, Partition, SplitManifest,
};
use factcheck_core::encoder::{load_word_vectors, Encoder, ExternalClient, ExternalOptions, HashedEncoder};
use factcheck_core::eval::{bench_latency, evaluate_pipeline, EvalReport, LatencySummary};
use factcheck_core::featurizer::{
    build_vocabulary, english_stop_words, tokenize, Vocabulary, BASELINE_FEATURE_DIM, BASELINE_VOCAB_WIDTH,
};
use factcheck_core::index::{build_index, calibrate_threshold, EmbeddingIndex, Threshold};
use factcheck_core::nn::{classification_accuracy, train, DenseNet, TrainConfig, TrainReport};
use factcheck_core::pipeline::{
    calibrate_verifier_boundary, tfidf_pair_features, wordvec_pair_features, BoundaryCalibration,
    ExternalVerifier, Pipeline, TfidfNetVerifier, Verdict, Verifier, VerifierKind, WordvecNetVerifier,
};

use crate::config::{AppConfig, EncoderChoice, UsageError, VerifierChoice};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const STAGE_A_FILE: &str = "stage_a.fcnn";
pub const STAGE_A_REPORT_FILE: &str = "stage_a_report.json";
pub const STAGE_B_FILE: &str = "stage_b.fcnn";
pub const VERIFIER_FILE: &str = "verifier.json";
pub const THRESHOLD_FILE: &str = "threshold.json";
pub const REPORT_FILE: &str = "report.json";

/// What `train-b` leaves behind for loading the verifier later. File names
/// are relative to the work directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierManifest {
    pub kind: VerifierKind,
    pub checkpoint: Option<String>,
    pub vocabulary: Option<String>,
    /// Encoder the word-vector net was trained against.
    pub encoder_identity: Option<String>,
    pub boundary: BoundaryCalibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub train_accuracy: Option<f64>,
    pub validation_accuracy: Option<f64>,
    pub training: TrainReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryCalibration>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub entries: usize,
    pub dimension: usize,
    pub encoder: String,
}

fn artifact(cfg: &AppConfig, name: &str) -> PathBuf {
    cfg.workdir.join(name)
}

/// Fails with a hint naming the step that produces `path`.
fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("{} not found; run `factcheck {producer}` first", path.display());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&src).with_context(|| format!("parsing {}", path.display()))
}

fn ensure_workdir(cfg: &AppConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.workdir)
        .with_context(|| format!("creating work directory {}", cfg.workdir.display()))
}

pub fn make_encoder(cfg: &AppConfig) -> Result<Arc<dyn Encoder>> {
    Ok(match cfg.encoder {
        EncoderChoice::Hashed => Arc::new(HashedEncoder::new(cfg.hashed_dim, cfg.seed)?),
        EncoderChoice::Wordvec => {
            let path = cfg.wordvec_path.as_ref().ok_or_else(|| UsageError("wordvec_path is not set".into()))?;
            Arc::new(load_word_vectors(path)?)
        }
        EncoderChoice::External => Arc::new(connect_external(cfg)?),
    })
}

fn connect_external(cfg: &AppConfig) -> Result<ExternalClient> {
    let endpoint = cfg.endpoint.as_deref().ok_or_else(|| UsageError("endpoint is not set".into()))?;
    ExternalClient::connect(endpoint, ExternalOptions::default())
        .with_context(|| format!("connecting to {endpoint}"))
}

/// Reads a JSON-lines or CSV corpus (by extension) and stores it as
/// `corpus.jsonl` in the work directory.
pub fn ingest(cfg: &AppConfig, input: Option<&Path>) -> Result<CorpusCounts> {
    let input = input
        .map(Path::to_path_buf)
        .or_else(|| cfg.corpus.clone())
        .ok_or_else(|| UsageError("ingest needs an input file (argument or --corpus)".into()))?;
    let is_csv = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let corpus = if is_csv {
        let f = std::fs::File::open(&input).with_context(|| format!("opening {}", input.display()))?;
        import_csv(f).with_context(|| format!("importing {}", input.display()))?
    } else {
        load_corpus(&input)?
    };
    ensure_workdir(cfg)?;
    let out = cfg.corpus_path();
    let tmp = out.with_extension("jsonl.tmp");
    corpus.save(&tmp)?;
    std::fs::rename(&tmp, &out).with_context(|| format!("writing {}", out.display()))?;
    Ok(corpus.counts())
}

fn corpus(cfg: &AppConfig) -> Result<Corpus> {
    let path = cfg.corpus_path();
    require(&path, "ingest")?;
    Ok(load_corpus(&path)?)
}

pub fn split(cfg: &AppConfig) -> Result<SplitManifest> {
    let corpus = corpus(cfg)?;
    let split = temporal_split(&corpus, cfg.train_end, cfg.test_start, cfg.val_fraction, cfg.seed)?;
    if split.train.is_empty() || split.test.is_empty() {
        log::warn!(
            "split has {} train and {} test explanations; check the cutoffs",
            split.train.len(),
            split.test.len()
        );
    }
    let manifest = split.manifest(cfg.val_fraction, cfg.seed);
    ensure_workdir(cfg)?;
    write_json(&artifact(cfg, SPLIT_FILE), &manifest)?;
    Ok(manifest)
}

fn load_split(cfg: &AppConfig) -> Result<(Corpus, CorpusSplit)> {
    let corpus = corpus(cfg)?;
    let path = artifact(cfg, SPLIT_FILE);
    require(&path, "split")?;
    let manifest: SplitManifest = read_json(&path)?;
    let split = CorpusSplit::from_manifest(&corpus, &manifest)?;
    Ok((corpus, split))
}

/// Vocabulary over the train partition's claims and explanations.
fn train_vocabulary(cfg: &AppConfig, train: &Partition) -> Result<Vocabulary> {
    let docs: Vec<Vec<String>> = train
        .claims
        .iter()
        .map(|c| tokenize(&c.text))
        .chain(train.explanations.iter().map(|e| tokenize(&e.text)))
        .collect();
    let vocab = build_vocabulary(&docs, BASELINE_VOCAB_WIDTH, &english_stop_words())?;
    vocab.save(artifact(cfg, VOCAB_FILE))?;
    Ok(vocab)
}

fn train_config(cfg: &AppConfig) -> TrainConfig {
    TrainConfig {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed: cfg.seed,
        shuffle: true,
        patience: (cfg.patience > 0).then_some(cfg.patience),
    }
}

fn fit<F>(
    cfg: &AppConfig,
    mut net: DenseNet,
    model: &str,
    pairs: &[PairExample],
    validation: &[PairExample],
    featurize: F,
) -> Result<(DenseNet, TrainSummary)>
where
    F: Fn(&PairExample) -> factcheck_core::Result<Vec<f64>> + Sync,
{
    let training = train(&mut net, pairs, validation, &featurize, &train_config(cfg))?;
    let train_accuracy = classification_accuracy(&net, pairs, &featurize)?;
    let validation_accuracy = if validation.is_empty() {
        None
    } else {
        Some(classification_accuracy(&net, validation, &featurize)?)
    };
    let summary = TrainSummary {
        model: model.to_string(),
        train_pairs: pairs.len(),
        validation_pairs: validation.len(),
        train_accuracy: Some(train_accuracy),
        validation_accuracy,
        training,
        boundary: None,
    };
    Ok((net, summary))
}

/// Trains the selected baseline as a pair classifier on either stage's pairs.
fn fit_baseline(
    cfg: &AppConfig,
    train_split: &Partition,
    pairs: &[PairExample],
    validation: &[PairExample],
) -> Result<(DenseNet, TrainSummary, Option<Arc<dyn Encoder>>, Option<Vocabulary>)> {
    match cfg.verifier {
        VerifierChoice::Tfidf => {
            let vocab = train_vocabulary(cfg, train_split)?;
            let net = DenseNet::tfidf_baseline(BASELINE_FEATURE_DIM, cfg.seed)?;
            let (net, s) = fit(cfg, net, "tfidf_net", pairs, validation, tfidf_pair_features(&vocab))?;
            Ok((net, s, None, Some(vocab)))
        }
        VerifierChoice::Wordvec => {
            let encoder = make_encoder(cfg)?;
            let net = DenseNet::wordvec_baseline(2 * encoder.dimension(), cfg.seed)?;
            let (net, s) = fit(cfg, net, "wordvec_net", pairs, validation, wordvec_pair_features(encoder.as_ref()))?;
            Ok((net, s, Some(encoder), None))
        }
        VerifierChoice::External => {
            Err(UsageError("baseline training needs --verifier tfidf or wordvec".into()).into())
        }
    }
}

pub fn train_a(cfg: &AppConfig) -> Result<TrainSummary> {
    let (_, split) = load_split(cfg)?;
    let pairs = generate_stage_a_pairs(&split.train, cfg.seed, cfg.negatives)?;
    let validation = if split.validation.claims.is_empty() {
        Vec::new()
    } else {
        generate_stage_a_pairs(&split.validation, cfg.seed, cfg.negatives)?
    };
    let (net, summary, _, _) = fit_baseline(cfg, &split.train, &pairs, &validation)?;
    net.save(artifact(cfg, STAGE_A_FILE))?;
    write_json(&artifact(cfg, STAGE_A_REPORT_FILE), &summary)?;
    Ok(summary)
}

/// Indexes every explanation in the corpus, not just one partition.
pub fn build_index_cmd(cfg: &AppConfig) -> Result<IndexSummary> {
    let corpus = corpus(cfg)?;
    let encoder = make_encoder(cfg)?;
    let index = build_index(corpus.explanations(), encoder.as_ref())?;
    let path = cfg.index_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    index.save(&path)?;
    Ok(IndexSummary {
        entries: index.len(),
        dimension: index.dimension(),
        encoder: index.encoder_identity().to_string(),
    })
}

fn load_index(cfg: &AppConfig, encoder: &dyn Encoder) -> Result<EmbeddingIndex> {
    let path = cfg.index_path();
    require(&path, "build-index")?;
    let index = EmbeddingIndex::load(&path)?;
    let identity = encoder.descriptor().identity;
    if index.encoder_identity() != identity {
        bail!(
            "{} was built with encoder {:?} but the configured encoder is {:?}; rebuild the index",
            path.display(),
            index.encoder_identity(),
            identity
        );
    }
    Ok(index)
}

pub fn calibrate(cfg: &AppConfig) -> Result<Threshold> {
    let (_, split) = load_split(cfg)?;
    let encoder = make_encoder(cfg)?;
    let index = load_index(cfg, encoder.as_ref())?;
    let pairs: Vec<(String, String)> = split
        .validation
        .claims
        .iter()
        .map(|c| (c.text.clone(), c.gold_explanation_id.clone()))
        .collect();
    let threshold = calibrate_threshold(&index, encoder.as_ref(), &pairs)
        .context("calibrating on the validation claims")?;
    threshold.save(artifact(cfg, THRESHOLD_FILE))?;
    Ok(threshold)
}

pub fn train_b(cfg: &AppConfig) -> Result<TrainSummary> {
    let (_, split) = load_split(cfg)?;
    let pairs = generate_stage_b_pairs(&split.train);
    let validation = generate_stage_b_pairs(&split.validation);
    if cfg.verifier == VerifierChoice::External {
        let verifier = ExternalVerifier::new(Arc::new(connect_external(cfg)?));
        let boundary = calibrate_verifier_boundary(&verifier, &validation)?;
        let manifest = VerifierManifest {
            kind: VerifierKind::External,
            checkpoint: None,
            vocabulary: None,
            encoder_identity: None,
            boundary,
        };
        write_json(&artifact(cfg, VERIFIER_FILE), &manifest)?;
        return Ok(TrainSummary {
            model: "external".into(),
            train_pairs: 0,
            validation_pairs: validation.len(),
            train_accuracy: None,
            validation_accuracy: None,
            training: TrainReport {
                epoch_losses: Vec::new(),
                validation_losses: Vec::new(),
                steps: 0,
                best_epoch: None,
                stopped_early: false,
            },
            boundary: Some(boundary),
        });
    }
    if pairs.is_empty() {
        bail!("no train claims carry a veracity label");
    }
    let (net, mut summary, encoder, vocab) = fit_baseline(cfg, &split.train, &pairs, &validation)?;
    net.save(artifact(cfg, STAGE_B_FILE))?;
    let (verifier, manifest): (Box<dyn Verifier>, _) = match (vocab, encoder) {
        (Some(vocab), _) => (
            Box::new(TfidfNetVerifier::new(vocab, net)?),
            VerifierManifest {
                kind: VerifierKind::BaselineTfidfNet,
                checkpoint: Some(STAGE_B_FILE.into()),
                vocabulary: Some(VOCAB_FILE.into()),
                encoder_identity: None,
                boundary: placeholder_boundary(),
            },
        ),
        (None, Some(encoder)) => {
            let identity = encoder.descriptor().identity;
            (
                Box::new(WordvecNetVerifier::new(encoder, net)?),
                VerifierManifest {
                    kind: VerifierKind::BaselineWordvecNet,
                    checkpoint: Some(STAGE_B_FILE.into()),
                    vocabulary: None,
                    encoder_identity: Some(identity),
                    boundary: placeholder_boundary(),
                },
            )
        }
        (None, None) => unreachable!("fit_baseline returns a vocabulary or an encoder"),
    };
    let boundary = calibrate_verifier_boundary(verifier.as_ref(), &validation)
        .context("calibrating the verifier boundary on validation pairs")?;
    write_json(&artifact(cfg, VERIFIER_FILE), &VerifierManifest { boundary, ..manifest })?;
    summary.boundary = Some(boundary);
    Ok(summary)
}

fn placeholder_boundary() -> BoundaryCalibration {
    BoundaryCalibration {
        tau_b: 0.5,
        mean_aligned: 0.5,
        mean_misaligned: 0.5,
        fallback: true,
    }
}

fn load_verifier(cfg: &AppConfig, encoder: &Arc<dyn Encoder>) -> Result<(Arc<dyn Verifier>, f64)> {
    let path = artifact(cfg, VERIFIER_FILE);
    require(&path, "train-b")?;
    let m: VerifierManifest = read_json(&path)?;
    let checkpoint = || -> Result<DenseNet> {
        let name = m.checkpoint.as_deref().context("verifier manifest has no checkpoint")?;
        Ok(DenseNet::load(artifact(cfg, name))?)
    };
    let verifier: Arc<dyn Verifier> = match m.kind {
        VerifierKind::BaselineTfidfNet => {
            let name = m.vocabulary.as_deref().context("verifier manifest has no vocabulary")?;
            let vocab = Vocabulary::load(artifact(cfg, name))?;
            Arc::new(TfidfNetVerifier::new(vocab, checkpoint()?)?)
        }
        VerifierKind::BaselineWordvecNet => {
            let identity = encoder.descriptor().identity;
            if m.encoder_identity.as_deref() != Some(identity.as_str()) {
                bail!(
                    "verifier was trained against encoder {:?} but the configured encoder is {identity:?}",
                    m.encoder_identity
                );
            }
            Arc::new(WordvecNetVerifier::new(encoder.clone(), checkpoint()?)?)
        }
        VerifierKind::External => Arc::new(ExternalVerifier::new(Arc::new(connect_external(cfg)?))),
    };
    Ok((verifier, m.boundary.tau_b))
}

pub fn load_pipeline(cfg: &AppConfig) -> Result<Pipeline> {
    let encoder = make_encoder(cfg)?;
    let index = load_index(cfg, encoder.as_ref())?;
    let corpus = corpus(cfg)?;
    let threshold = match cfg.threshold_t {
        Some(t) => Threshold {
            t,
            mean: t,
            std: 0.0,
            n_calibration: 0,
        },
        None => {
            let path = artifact(cfg, THRESHOLD_FILE);
            require(&path, "calibrate")?;
            Threshold::load(&path)?
        }
    };
    let (verifier, calibrated_tau) = load_verifier(cfg, &encoder)?;
    let tau_b = cfg.tau_b.unwrap_or(calibrated_tau);
    Ok(Pipeline::new(encoder, index, corpus.explanations(), threshold, verifier, tau_b)?.with_top_k(cfg.k))
}

pub fn check(cfg: &AppConfig, claim: &str) -> Result<(Verdict, Pipeline)> {
    if claim.trim().is_empty() {
        return Err(UsageError("empty claim".into()).into());
    }
    let pipeline = load_pipeline(cfg)?;
    let verdict = pipeline.check_claim(claim)?;
    Ok((verdict, pipeline))
}

/// Evaluates on the test partition and stores the report without timings.
pub fn eval(cfg: &AppConfig) -> Result<EvalReport> {
    let (_, split) = load_split(cfg)?;
    if split.test.claims.is_empty() {
        bail!("the test partition has no claims");
    }
    let pipeline = load_pipeline(cfg)?;
    let report = evaluate_pipeline(&pipeline, &split.test)?;
    write_json(&artifact(cfg, REPORT_FILE), &report.without_timings())?;
    Ok(report)
}

/// Latency over `n` claim checks drawn in order (cycling) from the test
/// partition, or from the whole corpus when the split is missing or empty.
pub fn bench(cfg: &AppConfig, n: usize) -> Result<LatencySummary> {
    if n == 0 {
        return Err(UsageError("--n must be >= 1".into()).into());
    }
    let corpus = corpus(cfg)?;
    let test_claims: Vec<String> = if artifact(cfg, SPLIT_FILE).exists() {
        load_split(cfg)?.1.test.claims.into_iter().map(|c| c.text).collect()
    } else {
        Vec::new()
    };
    let pool = if test_claims.is_empty() {
        corpus.claims().iter().map(|c| c.text.clone()).collect()
    } else {
        test_claims
    };
    if pool.is_empty() {
        bail!("corpus has no claims to benchmark with");
    }
    let claims: Vec<String> = pool.iter().cycle().take(n).cloned().collect();
    let pipeline = load_pipeline(cfg)?;
    Ok(bench_latency(&pipeline, &claims, 1))
}
