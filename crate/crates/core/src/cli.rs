//! The three commands behind the `schemacoder` binary.
//!
//! `extract` runs the pipeline from a TOML config and writes a run
//! directory, `evaluate` scores a prediction CSV against ground truth, and
//! `report` derives plotting data from a finished run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boosting::{run_schemacoder, BoostRecord, HistoryRow, PipelineError};
use crate::config::{ConfigError, RunConfig};
use crate::corpus::{load_ground_truth, load_log, segment, CorpusError, GroundTruth};
use crate::embedding::{cluster, embed_chunks, pca_project};
use crate::llm::{LlmClient, Transcript, PROMPT_VERSION};
use crate::metrics::{evaluate, EvalReport};
use crate::optimizer::LineageEdge;
use crate::program::{LineageEntry, ParseResult};
use crate::qtree::TraceRecord;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config or input files.
    #[error("{0}")]
    Invalid(String),
    /// The run itself failed.
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Failed(_) => EXIT_FAILED,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Failed(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| write_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_file(path, text + "\n")
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(|e| write_err(path, e))
}

fn write_trace(path: &Path, trace: &[TraceRecord]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in trace {
        out.push_str(&serde_json::to_string(r).expect("serializable"));
        out.push('\n');
    }
    write_file(path, out)
}

/// Written to `manifest.json` in every run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub prompt_version: String,
    pub status: String,
    pub error: Option<String>,
    pub total_lines: usize,
    pub chunks: usize,
    pub clusters: usize,
    pub program_version: Option<u64>,
    pub rules: Option<usize>,
    pub summary: Option<String>,
    pub boosts: Vec<BoostRecord>,
    pub degraded: Vec<String>,
    pub lineage: Vec<LineageEntry>,
}

#[derive(Debug, Clone, Serialize)]
struct LineageFile<'a> {
    program: &'a [LineageEntry],
    edges: &'a [LineageEdge],
}

#[derive(Debug, Clone)]
pub struct ExtractSummary {
    pub output_dir: PathBuf,
    pub report: EvalReport,
    pub history: Vec<HistoryRow>,
}

/// Runs the pipeline described by `config_path`. `output_dir` overrides the
/// config's output directory.
///
/// On pipeline failure the Q-Tree trace and a manifest with the error are
/// still written before `CliError::Failed` is returned.
pub fn cmd_extract(config_path: &Path, output_dir: Option<&Path>) -> Result<ExtractSummary, CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.to_path_buf();
    }
    let out = cfg.output_dir.clone();
    let log = load_log(&cfg.log)?;
    let truth = load_ground_truth(&cfg.truth)?;
    truth.bind(&log)?;
    let background = cfg.read_background()?;
    let (backend, profile) = cfg.backend.build()?;

    fs::create_dir_all(&out).map_err(|e| write_err(&out, e))?;
    let transcript_path = out.join("transcript.jsonl");
    if transcript_path.exists() {
        fs::remove_file(&transcript_path).map_err(|e| write_err(&transcript_path, e))?;
    }
    let transcript = Transcript::to_file(&transcript_path).map_err(|e| write_err(&transcript_path, e))?;
    let client = LlmClient::new(backend, profile)
        .with_retry(cfg.backend.retry)
        .with_transcript(Arc::new(transcript));

    let mut trace = Vec::new();
    let run = run_schemacoder(&client, &log, &truth, &background, &cfg.pipeline, &mut trace);
    write_trace(&out.join("qtree_trace.jsonl"), &trace)?;

    let outcome = match run {
        Ok(o) => o,
        Err(e) => {
            let manifest = Manifest {
                config: cfg.clone(),
                prompt_version: PROMPT_VERSION.into(),
                status: "failed".into(),
                error: Some(e.to_string()),
                total_lines: log.total_lines(),
                chunks: 0,
                clusters: 0,
                program_version: None,
                rules: None,
                summary: None,
                boosts: Vec::new(),
                degraded: Vec::new(),
                lineage: Vec::new(),
            };
            write_json(&out.join("manifest.json"), &manifest)?;
            return Err(match e {
                PipelineError::Config(m) => CliError::Invalid(m),
                PipelineError::Corpus(c) => CliError::Invalid(c.to_string()),
                other => CliError::Failed(other.to_string()),
            });
        }
    };

    write_file(&out.join("program.json"), outcome.program.serialize() + "\n")?;
    let parsed = outcome.program.execute(&log);
    let parsed_path = out.join("parsed.csv");
    let file = fs::File::create(&parsed_path).map_err(|e| write_err(&parsed_path, e))?;
    parsed.write_csv(file).map_err(|e| write_err(&parsed_path, e))?;
    write_json(&out.join("eval_report.json"), &outcome.report)?;
    write_csv(&out.join("history.csv"), &outcome.history)?;
    write_csv(&out.join("progress.csv"), &outcome.progress)?;
    write_json(
        &out.join("lineage.json"),
        &LineageFile {
            program: &outcome.program.lineage,
            edges: &outcome.lineage,
        },
    )?;
    let manifest = Manifest {
        config: cfg.clone(),
        prompt_version: PROMPT_VERSION.into(),
        status: "ok".into(),
        error: None,
        total_lines: log.total_lines(),
        chunks: outcome.chunks.len(),
        clusters: outcome.clustering.k,
        program_version: Some(outcome.program.version),
        rules: Some(outcome.program.len()),
        summary: Some(outcome.report.summary_line()),
        boosts: outcome.boosts.clone(),
        degraded: outcome.degraded.clone(),
        lineage: outcome.program.lineage.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(ExtractSummary {
        output_dir: out,
        report: outcome.report,
        history: outcome.history,
    })
}

#[derive(Debug, Deserialize)]
struct PredRow {
    #[serde(rename = "LineId")]
    line_id: u32,
    #[serde(rename = "Content")]
    content: String,
    #[serde(rename = "EventTemplate")]
    template: String,
    #[serde(rename = "Matched", default)]
    matched: Option<bool>,
}

/// Reads a prediction CSV with `LineId`, `Content` and `EventTemplate`
/// columns and an optional boolean `Matched` column. Line ids must be exactly
/// `1..=n` in any order.
pub fn load_predictions(path: &Path) -> Result<ParseResult, CliError> {
    let invalid = |m: String| CliError::Invalid(format!("{}: {m}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| invalid(e.to_string()))?;
    let mut rows: Vec<PredRow> = Vec::new();
    for row in reader.deserialize() {
        rows.push(row.map_err(|e: csv::Error| invalid(e.to_string()))?);
    }
    rows.sort_by_key(|r| r.line_id);
    for (i, r) in rows.iter().enumerate() {
        if r.line_id as usize != i + 1 {
            return Err(invalid(format!("LineId values must be 1..={} without gaps or duplicates", rows.len())));
        }
    }
    Ok(ParseResult::from_templates(rows.into_iter().map(|r| {
        let template = (r.matched != Some(false)).then_some(r.template);
        (r.content, template)
    })))
}

/// Scores `pred` against `truth`, writes the report as JSON to `out` and
/// returns it.
pub fn cmd_evaluate(pred: &Path, truth: &Path, out: &Path) -> Result<EvalReport, CliError> {
    let result = load_predictions(pred)?;
    let truth: GroundTruth = load_ground_truth(truth)?;
    let report = evaluate(&result, &truth).map_err(|e| CliError::Invalid(e.to_string()))?;
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaRow {
    pub chunk_id: usize,
    pub cluster: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// Recomputes the chunk embedding projection for a finished run and writes
/// `pca.csv` and `loss_curve.csv` into it. Deterministic, so repeated calls
/// produce identical files.
pub fn cmd_report(run_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let manifest_path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", manifest_path.display())))?;
    let cfg = &manifest.config.pipeline;
    let log = load_log(&manifest.config.log)?;
    let chunks = segment(&log, &cfg.segment);
    if chunks.is_empty() {
        return Err(CliError::Invalid("run log has no chunks".into()));
    }
    let vectors = embed_chunks(&chunks, cfg.embedding_dim);
    let clustering = cluster(&vectors, cfg.clusters.map(|k| k.min(chunks.len())), cfg.seed);
    let points: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let projection = pca_project(&points, 2.min(points.len()));
    let rows: Vec<PcaRow> = chunks
        .iter()
        .enumerate()
        .map(|(i, c)| PcaRow {
            chunk_id: c.id,
            cluster: clustering.assignments[i],
            pc1: projection.points[i][0],
            pc2: projection.points[i].get(1).copied().unwrap_or(0.0),
        })
        .collect();
    let pca_path = run_dir.join("pca.csv");
    write_csv(&pca_path, &rows)?;

    let history_path = run_dir.join("history.csv");
    let mut reader = csv::Reader::from_path(&history_path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", history_path.display())))?;
    let history: Vec<HistoryRow> = reader
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", history_path.display())))?;
    let curve_path = run_dir.join("loss_curve.csv");
    write_csv(&curve_path, &history)?;
    Ok(vec![pca_path, curve_path])
}

/// Prints `err` to stderr and returns its exit code.
pub fn report_error(err: &CliError) -> i32 {
    let _ = writeln!(std::io::stderr(), "error: {err}");
    err.exit_code()
}
