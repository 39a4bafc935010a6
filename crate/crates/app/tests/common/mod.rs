#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Duration, NaiveDate};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const TOPICS: &[&[&str]] = &[
    &["garlic", "soup", "eating", "raw", "cloves", "kitchen"],
    &["vaccine", "trial", "dose", "antibodies", "injection", "phase"],
    &["masks", "cloth", "surgical", "breathing", "oxygen", "fabric"],
    &["towers", "radio", "signal", "antenna", "network", "waves"],
    &["hydroxychloroquine", "malaria", "tablet", "pharmacy", "prescription", "heart"],
    &["bleach", "disinfectant", "drinking", "chemical", "poison", "cleaning"],
    &["lockdown", "curfew", "police", "streets", "closure", "borders"],
    &["ventilators", "hospital", "intensive", "beds", "nurses", "ward"],
    &["testing", "swab", "laboratory", "positive", "negative", "kits"],
    &["children", "school", "classroom", "teachers", "pupils", "playground"],
    &["pets", "dogs", "cats", "veterinary", "animals", "owners"],
    &["sunlight", "heat", "temperature", "summer", "humidity", "weather"],
];

pub fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

/// Explanations on a dozen topics, each with a false and a true claim.
/// Roughly 80% are dated before mid-May 2020 and the rest after, so the
/// default cutoffs give a usable split.
pub fn synthetic_corpus(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = n * 4 / 5;
    let mut out = String::new();
    for i in 0..n {
        let topic = TOPICS[i % TOPICS.len()];
        let day = if i < n_train {
            date(2020, 1, 1) + Duration::days((i * 135 / n_train.max(1)) as i64)
        } else {
            date(2020, 5, 18) + Duration::days(((i - n_train) * 40 / (n - n_train).max(1)) as i64)
        };
        let words: Vec<&str> = (0..5).map(|_| *topic.choose(&mut rng).unwrap()).collect();
        let tag = format!("case{i}");
        let eid = format!("exp-{i:06}");
        let expl = format!("{} {tag} reports about {} were checked by experts", words.join(" "), topic[0]);
        let false_claim = format!("{} {} {tag} miracle cure proven", words[0], words[1]);
        let true_claim = format!("{} {} {tag} not proven lacking evidence", words[2], words[3]);
        let d = day.to_string();
        for v in [
            json!({"kind": "explanation", "id": eid, "text": expl, "date": d, "source": "synthetic"}),
            json!({"kind": "claim", "id": format!("claim-{i:06}-f"), "text": false_claim, "veracity": false, "gold_explanation_id": eid, "date": d}),
            json!({"kind": "claim", "id": format!("claim-{i:06}-t"), "text": true_claim, "veracity": true, "gold_explanation_id": eid, "date": d}),
        ] {
            out.push_str(&v.to_string());
            out.push('\n');
        }
    }
    out
}

/// Every claim's text equals its gold explanation's text.
pub fn planted_corpus(n: usize, seed: u64) -> String {
    let mut out = String::new();
    for line in synthetic_corpus(n, seed).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        out.push_str(line);
        out.push('\n');
        if v["kind"] == "explanation" {
            let i = v["id"].as_str().unwrap().trim_start_matches("exp-").to_string();
            for (suffix, veracity) in [("f", false), ("t", true)] {
                let c = json!({
                    "kind": "claim", "id": format!("planted-{i}-{suffix}"), "text": v["text"],
                    "veracity": veracity, "gold_explanation_id": v["id"], "date": v["date"],
                });
                out.push_str(&c.to_string());
                out.push('\n');
            }
        }
    }
    out.lines()
        .filter(|l| !l.contains("\"claim-"))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, contents).unwrap();
    p
}

pub fn factcheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_factcheck"))
        .args(args)
        .env_remove("FACTCHECK_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = factcheck(args);
    assert!(
        out.status.success(),
        "factcheck {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// ingest → split → train-a → build-index → calibrate → train-b in `workdir`.
pub fn prepare(workdir: &Path, corpus: &Path, extra: &[&str]) {
    let wd = workdir.to_str().unwrap();
    let with = |cmd: &[&str]| {
        let mut v: Vec<&str> = cmd.to_vec();
        v.extend(["--workdir", wd]);
        v.extend(extra);
        ok(&v);
    };
    with(&["ingest", corpus.to_str().unwrap()]);
    with(&["split"]);
    with(&["train-a", "--epochs", "5"]);
    with(&["build-index"]);
    with(&["calibrate"]);
    with(&["train-b", "--epochs", "5"]);
}
