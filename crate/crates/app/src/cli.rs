use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use factcheck_core::pipeline::{Pipeline, Verdict};

use crate::config::{AppConfig, EncoderChoice, UsageError, VerifierChoice};
use crate::{service, workflow};

#[derive(Debug, Parser)]
#[command(name = "factcheck", version, about = "Check claims against a knowledge base of explanations")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Key-value config file; flags override its settings.
    #[arg(long, global = true, env = "FACTCHECK_CONFIG")]
    pub config: Option<PathBuf>,
    /// Directory holding the run's artifacts.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Corpus file to ingest (JSON lines or CSV).
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub encoder: Option<EncoderChoice>,
    /// Dimension of the hashed encoder.
    #[arg(long, global = true)]
    pub hashed_dim: Option<usize>,
    /// Text file of word vectors, one `word v1 v2 ...` per line.
    #[arg(long, global = true)]
    pub wordvec_path: Option<PathBuf>,
    /// Base URL of the external encoder/classifier service.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub verifier: Option<VerifierChoice>,
    /// Index file (default: <workdir>/index.fcix).
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// Explanations retrieved per claim before thresholding.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus and store it in the work directory.
    Ingest {
        /// JSON-lines or CSV corpus; defaults to --corpus.
        input: Option<PathBuf>,
    },
    /// Split the corpus by date into train/validation/test.
    Split {
        #[arg(long)]
        train_end: Option<NaiveDate>,
        #[arg(long)]
        test_start: Option<NaiveDate>,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Train the baseline relevance classifier on claim/explanation pairs.
    TrainA {
        #[command(flatten)]
        train: TrainArgs,
        /// Negative pairs per positive.
        #[arg(long)]
        negatives: Option<usize>,
    },
    /// Embed every explanation and write the retrieval index.
    BuildIndex,
    /// Derive the similarity cutoff from validation claims.
    Calibrate,
    /// Train the baseline verifier and calibrate its decision boundary.
    TrainB {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Check one claim.
    Check {
        claim: String,
        #[arg(long)]
        json: bool,
        /// Override the similarity cutoff.
        #[arg(long)]
        t: Option<f64>,
        /// Override the verifier boundary.
        #[arg(long)]
        tau_b: Option<f64>,
    },
    /// Evaluate retrieval and verdict accuracy on the test split.
    Eval {
        #[arg(long)]
        json: bool,
        #[arg(long, conflicts_with = "json")]
        csv: bool,
    },
    /// Measure per-stage latency over repeated claim checks.
    Bench {
        /// Number of timed checks.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        json: bool,
        #[arg(long, conflicts_with = "json")]
        csv: bool,
    },
    /// Serve /check, /health and /metrics over HTTP.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long)]
    pub patience: Option<usize>,
}

macro_rules! overlay {
    ($cfg:expr, $src:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $cfg.$field = v; } )*
    };
}

macro_rules! overlay_opt {
    ($cfg:expr, $src:expr; $($field:ident),* $(,)?) => {
        $( if let Some(v) = $src.$field.clone() { $cfg.$field = Some(v); } )*
    };
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn resolve_config(&self) -> Result<AppConfig, UsageError> {
        let mut cfg = AppConfig::default();
        if let Some(path) = &self.global.config {
            cfg.apply_file(path)?;
        }
        let g = &self.global;
        overlay!(cfg, g; workdir, encoder, hashed_dim, verifier, k, seed);
        overlay_opt!(cfg, g; corpus, wordvec_path, endpoint, index);
        match &self.command {
            Command::Split { train_end, test_start, val_fraction } => {
                if let Some(d) = train_end {
                    cfg.train_end = *d;
                }
                if let Some(d) = test_start {
                    cfg.test_start = *d;
                }
                if let Some(f) = val_fraction {
                    cfg.val_fraction = *f;
                }
            }
            Command::TrainA { train, negatives } => {
                overlay!(cfg, train; epochs, batch_size, lr, patience);
                if let Some(n) = negatives {
                    cfg.negatives = *n;
                }
            }
            Command::TrainB { train } => {
                overlay!(cfg, train; epochs, batch_size, lr, patience);
            }
            Command::Check { t, tau_b, .. } => {
                if t.is_some() {
                    cfg.threshold_t = *t;
                }
                if tau_b.is_some() {
                    cfg.tau_b = *tau_b;
                }
            }
            Command::Serve { port: Some(p) } => cfg.port = *p,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn shorten(text: &str, max: usize) -> String {
    if text.chars().count() <= max {
        return text.to_string();
    }
    let mut s: String = text.chars().take(max.saturating_sub(3)).collect();
    s.push_str("...");
    s
}

pub fn render_verdict(verdict: &Verdict, pipeline: &Pipeline) -> String {
    let mut s = format!("claim:   {}\nverdict: {}", verdict.claim, verdict.label);
    match verdict.p_truth {
        Some(p) => s.push_str(&format!(" (p_truth {p:.4}, tau_b {:.4})\n", verdict.tau_b)),
        None => s.push_str(&format!(" (no explanation above t = {:.4})\n", verdict.threshold_t)),
    }
    for (i, c) in verdict.candidates.iter().enumerate() {
        let text = pipeline.explanation_text(&c.id).unwrap_or("");
        s.push_str(&format!(
            "  {:>2}. {}  sim {:.4}  p {:.4}  {}\n",
            i + 1,
            c.id,
            c.similarity,
            c.prob,
            shorten(text, 100)
        ));
    }
    s
}

/// Runs the parsed command, writing its report to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::Ingest { input } => {
            let c = workflow::ingest(&cfg, input.as_deref())?;
            writeln!(
                out,
                "ingested {} explanations, {} claims ({} labeled) into {}",
                c.explanations,
                c.claims,
                c.labeled_claims,
                cfg.corpus_path().display()
            )?;
        }
        Command::Split { .. } => {
            let m = workflow::split(&cfg)?;
            writeln!(
                out,
                "train {} / validation {} / test {} explanations, {} excluded",
                m.train.len(),
                m.validation.len(),
                m.test.len(),
                m.excluded.len()
            )?;
        }
        Command::TrainA { .. } | Command::TrainB { .. } => {
            let stage_a = matches!(cli.command, Command::TrainA { .. });
            let s = if stage_a { workflow::train_a(&cfg)? } else { workflow::train_b(&cfg)? };
            let fmt_acc = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            writeln!(
                out,
                "{} {}: {} train pairs, {} epochs, train acc {}, validation acc {}",
                if stage_a { "stage A" } else { "stage B" },
                s.model,
                s.train_pairs,
                s.training.epoch_losses.len(),
                fmt_acc(s.train_accuracy),
                fmt_acc(s.validation_accuracy)
            )?;
            if let Some(b) = s.boundary {
                writeln!(
                    out,
                    "tau_b {:.4} (aligned mean {:.4}, misaligned mean {:.4}{})",
                    b.tau_b,
                    b.mean_aligned,
                    b.mean_misaligned,
                    if b.fallback { ", fallback" } else { "" }
                )?;
            }
        }
        Command::BuildIndex => {
            let s = workflow::build_index_cmd(&cfg)?;
            writeln!(out, "indexed {} explanations ({}-d, {})", s.entries, s.dimension, s.encoder)?;
        }
        Command::Calibrate => {
            let t = workflow::calibrate(&cfg)?;
            writeln!(
                out,
                "t = {:.6} (mean {:.6} - std {:.6} over {} validation claims)",
                t.t, t.mean, t.std, t.n_calibration
            )?;
        }
        Command::Check { claim, json, .. } => {
            let (verdict, pipeline) = workflow::check(&cfg, claim)?;
            if *json {
                print_json(out, &verdict)?;
            } else {
                write!(out, "{}", render_verdict(&verdict, &pipeline))?;
            }
        }
        Command::Eval { json, csv } => {
            let report = workflow::eval(&cfg)?;
            if *json {
                print_json(out, &report)?;
            } else if *csv {
                write!(out, "{}", report.to_csv())?;
            } else {
                write!(out, "{}", report.to_table())?;
            }
        }
        Command::Bench { n, json, csv } => {
            let summary = workflow::bench(&cfg, *n)?;
            if *json {
                print_json(out, &summary)?;
            } else if *csv {
                write!(out, "{}", summary.to_csv())?;
            } else {
                write!(out, "{}", summary.to_table())?;
            }
        }
        Command::Serve { .. } => {
            let pipeline = Arc::new(workflow::load_pipeline(&cfg).context("refusing to start")?);
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(async {
                let addr = std::net::SocketAddr::from(([0, 0, 0, 0], cfg.port));
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .with_context(|| format!("binding port {}", cfg.port))?;
                log::info!(
                    "serving {} explanations on {}",
                    pipeline.index().len(),
                    listener.local_addr()?
                );
                service::serve(listener, pipeline, service::shutdown_signal()).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
