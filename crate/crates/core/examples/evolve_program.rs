//! Improves a partial program with the island optimizer. No model is
//! attached, so every mutation is the deterministic fallback.

use std::sync::Arc;

use schemacoder::corpus::{GroundTruth, LogFile};
use schemacoder::llm::{BackendProfile, FailingBackend, LlmClient, RetryPolicy};
use schemacoder::optimizer::{evolve, EvalCorpus, OptimizerConfig};
use schemacoder::program::ParserProgram;

fn main() {
    let mut truth = GroundTruth::new();
    let mut lines = Vec::new();
    for i in 1..=60u32 {
        let (content, template) = match i % 3 {
            0 => (format!("fetch item {i} done"), "fetch item <*> done"),
            1 => (format!("retry {} of 5", i % 5), "retry <*> of 5"),
            _ => ("idle".to_owned(), "idle"),
        };
        truth.insert(i, content.as_str(), template).unwrap();
        lines.push(content);
    }
    let log = LogFile::from_lines("demo", &lines);
    let corpus = EvalCorpus::full(&log, &truth);

    let initial = ParserProgram::deserialize(
        r#"{"version":1,"rules":[{"pattern":"fetch item (\\d+) done","template":"fetch item <*> done"}]}"#,
    )
    .unwrap();
    let client = LlmClient::new(Arc::new(FailingBackend { transient: false }), BackendProfile::default())
        .with_retry(RetryPolicy {
            max_attempts: 1,
            base_ms: 0,
            ..Default::default()
        });
    let cfg = OptimizerConfig {
        islands: 2,
        generations: 6,
        migrate_every: 3,
        ..Default::default()
    };

    let out = evolve(&client, "", &initial, &corpus, &cfg, 2).expect("fallback mutations");
    for (g, score) in out.best_per_generation.iter().enumerate() {
        println!("generation {}: loss {:.4}", g + 1, 1.0 - score);
    }
    println!("migrations: {}", out.migrations.len());
    println!("{}", out.best.program.serialize());
}
