//! Residual boosting and the end-to-end pipeline.
//!
//! After the initial program is built and refined, lines it still gets wrong
//! are collected into a residual corpus. A fresh Q-Tree run over that residual
//! produces a fragment, which is integrated into the program only when the
//! loss does not go up.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{segment, Chunk, GroundTruth, LineId, LogFile, SegmentConfig};
use crate::embedding::{cluster, embed_chunks, sample_representatives, Clustering, DEFAULT_DIM};
use crate::llm::{extract_json, render_prompt, CompletionRequest, LlmClient, Purpose};
use crate::metrics::EvalReport;
use crate::optimizer::{evolve, EvalCorpus, LineageEdge, OptimizerConfig, ProgressRecord};
use crate::program::{compile_program, concat_programs, merge_programs, CompileMode, ParserProgram, Provenance};
use crate::qtree::{retag, run_qtree_traced, QTreeConfig, QTreeError, QTreeOutcome, TraceRecord};

/// Lines the current program gets wrong, with context windows cut into chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub line_ids: BTreeSet<LineId>,
    /// Inclusive, padded, non-overlapping line windows.
    pub windows: Vec<(LineId, LineId)>,
    pub chunks: Vec<Chunk>,
}

impl ResidualSet {
    pub fn is_empty(&self) -> bool {
        self.line_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.line_ids.len()
    }
}

/// Union of unmatched, misgrouped and template-mismatched lines, each padded
/// by `pad` lines on both sides. Overlapping or adjacent windows are merged
/// and then segmented with `cfg`.
pub fn compute_residual(report: &EvalReport, log: &LogFile, cfg: &SegmentConfig, pad: u32) -> ResidualSet {
    let line_ids: BTreeSet<LineId> = report.wrong_lines();
    let last = log.total_lines() as LineId;
    let mut windows: Vec<(LineId, LineId)> = Vec::new();
    for &id in &line_ids {
        let lo = id.saturating_sub(pad).max(1);
        let hi = (id + pad).min(last);
        match windows.last_mut() {
            Some(w) if lo <= w.1 + 1 => w.1 = w.1.max(hi),
            _ => windows.push((lo, hi)),
        }
    }
    let mut chunks = Vec::new();
    for &(lo, hi) in &windows {
        let slice = LogFile::from_lines(
            log.source_path.clone(),
            (lo..=hi).map(|id| log.line(id).expect("window within log").content.clone()),
        );
        for mut c in segment(&slice, cfg) {
            c.id = chunks.len();
            c.line_span = (c.line_span.0 + lo - 1, c.line_span.1 + lo - 1);
            chunks.push(c);
        }
    }
    ResidualSet {
        line_ids,
        windows,
        chunks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub segment: SegmentConfig,
    pub qtree: QTreeConfig,
    /// `generations` is overridden by `boost_period` in each refinement stage.
    pub optimizer: OptimizerConfig,
    pub embedding_dim: usize,
    /// Cluster count; `None` picks `min(8, ceil(sqrt(n)))`.
    pub clusters: Option<usize>,
    pub representatives_per_cluster: usize,
    pub max_boosts: usize,
    /// Optimizer generations between boosting steps.
    pub boost_period: usize,
    pub residual_pad: u32,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            segment: SegmentConfig::default(),
            qtree: QTreeConfig::default(),
            optimizer: OptimizerConfig::default(),
            embedding_dim: DEFAULT_DIM,
            clusters: None,
            representatives_per_cluster: 3,
            max_boosts: 3,
            boost_period: 10,
            residual_pad: 2,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.segment.validate()?;
        if self.qtree.breadth == 0 {
            return Err("qtree.breadth must be >= 1".into());
        }
        if self.qtree.layer_attempts == 0 {
            return Err("qtree.layer_attempts must be >= 1".into());
        }
        if self.optimizer.islands == 0 {
            return Err("optimizer.islands must be >= 1".into());
        }
        if self.optimizer.feedback_cap == 0 {
            return Err("optimizer.feedback_cap must be >= 1".into());
        }
        if self.optimizer.eval_max_lines == 0 {
            return Err("optimizer.eval_max_lines must be >= 1".into());
        }
        if self.embedding_dim == 0 {
            return Err("embedding_dim must be >= 1".into());
        }
        if self.clusters == Some(0) {
            return Err("clusters must be >= 1".into());
        }
        if self.boost_period == 0 {
            return Err("boost_period must be >= 1".into());
        }
        if self.representatives_per_cluster == 0 {
            return Err("representatives_per_cluster must be >= 1".into());
        }
        Ok(())
    }
}

/// Picks representative chunks: embed, cluster, sample per cluster.
pub fn representatives(chunks: &[Chunk], cfg: &PipelineConfig, seed: u64) -> (Clustering, Vec<Chunk>) {
    let vectors = embed_chunks(chunks, cfg.embedding_dim);
    let k = cfg.clusters.map(|k| k.min(chunks.len()));
    let clustering = cluster(&vectors, k, seed);
    let ids = sample_representatives(&clustering, cfg.representatives_per_cluster, seed);
    let by_id: BTreeMap<usize, &Chunk> = chunks.iter().map(|c| (c.id, c)).collect();
    let picked = ids.iter().map(|id| by_id[id].clone()).collect();
    (clustering, picked)
}

/// Runs a Q-Tree over the residual and returns a fragment tagged with the
/// boosting iteration. The fragment must match at least one residual line;
/// one retry is made before giving up.
pub fn fit_residual(
    client: &LlmClient,
    residual: &ResidualSet,
    log: &LogFile,
    background: &str,
    cfg: &PipelineConfig,
    iteration: u32,
    trace: &mut Vec<TraceRecord>,
) -> Result<(ParserProgram, QTreeOutcome), QTreeError> {
    if residual.chunks.is_empty() {
        return Err(QTreeError::Degenerate {
            layer: "boost",
            reason: "empty residual".into(),
        });
    }
    let lines: Vec<&str> = residual
        .line_ids
        .iter()
        .filter_map(|&id| log.line(id).map(|l| l.content.as_str()))
        .collect();
    let (_, picked) = representatives(&residual.chunks, cfg, cfg.seed.wrapping_add(u64::from(iteration)));
    let mut last_err = None;
    for _ in 0..2 {
        let start = trace.len();
        let run = run_qtree_traced(client, &picked, background, &cfg.qtree, trace);
        for r in &mut trace[start..] {
            r.layer = format!("boost{iteration}:{}", r.layer);
        }
        let outcome = match run {
            Ok(o) => o,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let rules = outcome
            .program
            .rules()
            .iter()
            .map(|r| retag(r, format!("b{iteration}.{}", r.id), r.priority, Provenance::BoostIteration(iteration)))
            .collect();
        let fragment = ParserProgram::from_rules(rules, 0).expect("ids stay unique under a common prefix");
        if lines.iter().any(|l| fragment.matches_any(l)) {
            return Ok((fragment, outcome));
        }
        last_err = Some(QTreeError::Degenerate {
            layer: "boost",
            reason: format!("fragment of {} rules matches no residual line", fragment.len()),
        });
    }
    Err(last_err.expect("two attempts were made"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Integration {
    pub program: ParserProgram,
    pub report: EvalReport,
    pub accepted: bool,
    /// Which candidate was kept: `llm`, `merge`, `fragment_first`,
    /// `fragment_last`, or `rejected`.
    pub variant: &'static str,
    pub candidates: Vec<(&'static str, f64)>,
}

/// Combines `current` with `fragment`, keeping the lowest-loss candidate whose
/// loss does not exceed that of `current`. When none qualifies the current
/// program is returned unchanged and the step is flagged as rejected.
///
/// Candidates, in tie-break order: a model-proposed integration (when the
/// reply is a valid program), the deterministic merge, the fragment placed
/// ahead of all current rules, and the fragment appended after them.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    client: Option<&LlmClient>,
    background: &str,
    current: &ParserProgram,
    fragment: &ParserProgram,
    residual_text: &str,
    corpus: &EvalCorpus,
    version: u64,
    iteration: u32,
) -> Integration {
    let (_, base) = corpus.evaluate(current);
    if fragment.is_empty() {
        return Integration {
            program: current.clone(),
            report: base,
            accepted: false,
            variant: "rejected",
            candidates: Vec::new(),
        };
    }
    let mut candidates: Vec<(&'static str, ParserProgram)> = Vec::new();
    if let Some(client) = client {
        let bindings = BTreeMap::from([
            ("background", background.to_owned()),
            ("program", current.serialize()),
            ("fragment", fragment.serialize()),
            ("residual", residual_text.to_owned()),
        ]);
        let prompt = render_prompt(Purpose::Boost, &bindings).expect("boost template bindings are complete");
        if let Ok(reply) = client.complete(&CompletionRequest::new(Purpose::Boost, prompt)) {
            if let Some((p, _)) = extract_json(&reply).and_then(|j| compile_program(j, CompileMode::Lenient).ok()) {
                candidates.push(("llm", p));
            }
        }
    }
    candidates.push(("merge", merge_programs(&[current.clone(), fragment.clone()])));
    candidates.push(("fragment_first", concat_programs(&[fragment, current], version)));
    candidates.push(("fragment_last", concat_programs(&[current, fragment], version)));

    let mut scored = Vec::new();
    let mut best: Option<(&'static str, ParserProgram, EvalReport)> = None;
    for (name, program) in candidates {
        let (_, report) = corpus.evaluate(&program);
        scored.push((name, report.loss));
        let better = match &best {
            Some((_, _, b)) => report.loss < b.loss,
            None => report.loss <= base.loss,
        };
        if better {
            best = Some((name, program, report));
        }
    }
    let parents = vec![current.version, fragment.version];
    match best {
        Some((variant, program, report)) => {
            let mut program = program.with_version(version);
            program.lineage = current.lineage.clone();
            Integration {
                program: program.with_lineage(format!("boost{iteration}:{variant}"), parents),
                report,
                accepted: true,
                variant,
                candidates: scored,
            }
        }
        None => Integration {
            program: current.clone(),
            report: base,
            accepted: false,
            variant: "rejected",
            candidates: scored,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub phase: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostRecord {
    pub iteration: u32,
    pub residual_lines: usize,
    pub residual_chunks: usize,
    pub fragment_rules: usize,
    pub variant: String,
    pub accepted: bool,
    pub loss_before: f64,
    pub loss_after: f64,
    pub error: Option<String>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("ground truth does not cover the log: {0}")]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("initial program synthesis failed: {0}")]
    Initial(#[source] QTreeError),
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub program: ParserProgram,
    pub report: EvalReport,
    pub history: Vec<HistoryRow>,
    pub boosts: Vec<BoostRecord>,
    pub chunks: Vec<Chunk>,
    pub clustering: Clustering,
    pub initial: QTreeOutcome,
    pub progress: Vec<ProgressRecord>,
    pub lineage: Vec<LineageEdge>,
    /// Stages that failed and were skipped.
    pub degraded: Vec<String>,
}

/// Full pipeline: segment, embed and cluster the log, build an initial
/// program from representative chunks, then alternate optimizer runs and
/// boosting steps until the loss is zero or the boost budget is spent.
///
/// `trace` receives every Q-Tree layer record, also when the run fails.
pub fn run_schemacoder(
    client: &LlmClient,
    log: &LogFile,
    truth: &GroundTruth,
    background: &str,
    cfg: &PipelineConfig,
    trace: &mut Vec<TraceRecord>,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    truth.bind(log)?;
    if log.is_empty() {
        return Err(PipelineError::Config("log is empty".into()));
    }
    let full = EvalCorpus::full(log, truth);
    let eval = EvalCorpus::sampled(log, truth, cfg.optimizer.eval_max_lines, cfg.seed);

    let chunks = segment(log, &cfg.segment);
    let (clustering, picked) = representatives(&chunks, cfg, cfg.seed);
    log::info!(
        "{} chunks, {} clusters, {} representatives",
        chunks.len(),
        clustering.k,
        picked.len()
    );
    let initial = run_qtree_traced(client, &picked, background, &cfg.qtree, trace).map_err(PipelineError::Initial)?;
    let mut program = initial.program.clone().with_version(1);
    let (_, mut report) = full.evaluate(&program);

    let mut iteration = 0;
    let mut history = vec![HistoryRow {
        iteration,
        phase: "init".into(),
        loss: report.loss,
    }];
    let mut boosts = Vec::new();
    let mut progress = Vec::new();
    let mut lineage = Vec::new();
    let mut degraded = Vec::new();
    let mut next_version = 2;

    loop {
        if report.loss == 0.0 || boosts.len() >= cfg.max_boosts {
            break;
        }
        {
            let ocfg = OptimizerConfig {
                generations: cfg.boost_period,
                seed: cfg.optimizer.seed.wrapping_add(boosts.len() as u64),
                ..cfg.optimizer
            };
            match evolve(client, background, &program, &eval, &ocfg, next_version) {
                Ok(out) => {
                    for (g, score) in out.best_per_generation.iter().enumerate() {
                        history.push(HistoryRow {
                            iteration: iteration + g + 1,
                            phase: "evolve".into(),
                            loss: 1.0 - score,
                        });
                    }
                    iteration += out.best_per_generation.len();
                    let offset = progress.iter().map(|p: &ProgressRecord| p.generation).max().unwrap_or(0);
                    progress.extend(out.progress.into_iter().map(|mut p| {
                        p.generation += offset;
                        p
                    }));
                    lineage.extend(out.lineage);
                    next_version = out.next_version;
                    let (_, r) = full.evaluate(&out.best.program);
                    if r.loss <= report.loss {
                        program = out.best.program;
                        report = r;
                    }
                }
                Err(e) => {
                    log::warn!("optimizer stage failed: {e}");
                    degraded.push(format!("evolve: {e}"));
                }
            }
        }
        if report.loss == 0.0 {
            break;
        }

        let step = boosts.len() as u32 + 1;
        let residual = compute_residual(&report, log, &cfg.segment, cfg.residual_pad);
        let loss_before = report.loss;
        let mut record = BoostRecord {
            iteration: step,
            residual_lines: residual.len(),
            residual_chunks: residual.chunks.len(),
            fragment_rules: 0,
            variant: "failed".into(),
            accepted: false,
            loss_before,
            loss_after: loss_before,
            error: None,
        };
        match fit_residual(client, &residual, log, background, cfg, step, trace) {
            Ok((fragment, _)) => {
                let residual_text: String = residual.chunks.iter().map(|c| format!("{}\n", c.text)).collect();
                let merged = integrate(
                    Some(client),
                    background,
                    &program,
                    &fragment,
                    &residual_text,
                    &full,
                    next_version,
                    step,
                );
                next_version += 1;
                record.fragment_rules = fragment.len();
                record.variant = merged.variant.into();
                record.accepted = merged.accepted;
                program = merged.program;
                report = merged.report;
                record.loss_after = report.loss;
            }
            Err(e) => {
                log::warn!("boost step {step} failed: {e}");
                degraded.push(format!("boost {step}: {e}"));
                record.error = Some(e.to_string());
            }
        }
        log::info!("boost {step}: loss {:.4} -> {:.4}", loss_before, report.loss);
        boosts.push(record);
        history.push(HistoryRow {
            iteration,
            phase: "boost".into(),
            loss: report.loss,
        });
    }

    Ok(PipelineOutcome {
        program,
        report,
        history,
        boosts,
        chunks,
        clustering,
        initial,
        progress,
        lineage,
        degraded,
    })
}
