//! Hierarchical question-tree pattern recognition.
//!
//! Every branch runs the same three layers: an exploration question, a
//! grounded segment selection for that question, and rule generation for the
//! selected lines. Branch fragments are then packed by token budget, merged
//! per group and folded pairwise into a single program.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Chunk, LineId};
use crate::llm::{
    extract_json, group_by_token_limit, prompt_hash, render_prompt, BackendError, CompletionRequest, LlmClient,
    Purpose, TemplateError,
};
use crate::program::{compile_program, merge_programs, CompileMode, ParserProgram, Provenance, TemplateRule};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum QTreeError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("degenerate {layer} output: {reason}")]
    Degenerate { layer: &'static str, reason: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("all {attempted} branches failed; first failure: {first}")]
    AllBranchesFailed {
        attempted: usize,
        first: Box<QTreeError>,
    },
}

impl QTreeError {
    fn degenerate(layer: &'static str, reason: impl Into<String>) -> Self {
        QTreeError::Degenerate {
            layer,
            reason: reason.into(),
        }
    }

    /// The underlying backend failure, if any.
    pub fn backend(&self) -> Option<&BackendError> {
        match self {
            QTreeError::Backend(e) => Some(e),
            QTreeError::AllBranchesFailed { first, .. } => first.backend(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QTreeConfig {
    /// Questions per tree.
    pub breadth: usize,
    /// Token budget of one merge group.
    pub token_limit: usize,
    /// Token budget of the chunk context shown to one tree.
    pub chunk_token_limit: usize,
    /// Attempts per layer before degrading.
    pub layer_attempts: usize,
}

impl Default for QTreeConfig {
    fn default() -> Self {
        QTreeConfig {
            breadth: 4,
            token_limit: 4096,
            chunk_token_limit: 6144,
            layer_attempts: 3,
        }
    }
}

/// A verbatim excerpt of a chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub chunk_id: usize,
    pub line_span: (LineId, LineId),
    pub text: String,
    /// Full chunk lines covered by the excerpt.
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tree: usize,
    pub branch: Option<usize>,
    pub layer: String,
    pub input_hash: String,
    pub output_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QBranch {
    pub question: String,
    pub segments: Vec<Segment>,
    pub fragment: ParserProgram,
    /// `(layer, raw reply)` in layer order.
    pub raw_llm_outputs: Vec<(String, String)>,
}

impl QBranch {
    /// Segment lines the fragment matches.
    pub fn matched_lines(&self) -> Vec<&str> {
        self.segments
            .iter()
            .flat_map(|s| s.lines.iter())
            .filter(|l| self.fragment.matches_any(l))
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTree {
    pub background: String,
    pub chunk_ids: Vec<usize>,
    pub branches: Vec<QBranch>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Questions {
    pub questions: Vec<String>,
    /// Fewer than the requested breadth survived re-queries.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub segments: Vec<Segment>,
    /// Excerpts that were not verbatim substrings of their chunk.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub program: ParserProgram,
    /// Rules dropped for failing to compile or to match any segment line.
    pub rejected: Vec<(String, String)>,
}

/// Issues layer prompts and records a trace of every exchange.
pub struct QTreeSession<'a> {
    client: &'a LlmClient,
    background: &'a str,
    pub trace: Vec<TraceRecord>,
    pub tree: usize,
    pub branch: Option<usize>,
    raw: Vec<(String, String)>,
}

fn render_chunks(chunks: &[Chunk]) -> String {
    chunks
        .iter()
        .map(|c| format!("[chunk {}]\n{}", c.id, c.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn question_line() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:\d+\s*[.):]|[-*\u{2022}]|Q\d+[.:])\s*(.+?)\s*$").unwrap())
}

/// Parses a numbered or bulleted list. Falls back to lines ending in `?`.
pub fn parse_questions(reply: &str) -> Vec<String> {
    let listed: Vec<String> = reply
        .lines()
        .filter_map(|l| question_line().captures(l))
        .map(|c| c[1].to_owned())
        .filter(|q| !q.is_empty())
        .collect();
    if !listed.is_empty() {
        return listed;
    }
    reply
        .lines()
        .map(str::trim)
        .filter(|l| l.ends_with('?'))
        .map(str::to_owned)
        .collect()
}

#[derive(Deserialize)]
struct SelectionReply {
    segments: Vec<SegmentClaim>,
}

#[derive(Deserialize)]
struct SegmentClaim {
    #[serde(default)]
    chunk_id: Option<usize>,
    text: String,
}

fn parse_selection(reply: &str) -> Vec<SegmentClaim> {
    if let Some(json) = extract_json(reply) {
        if let Ok(parsed) = serde_json::from_str::<SelectionReply>(json) {
            return parsed.segments;
        }
    }
    reply
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .map(|l| SegmentClaim {
            chunk_id: None,
            text: l.to_owned(),
        })
        .collect()
}

/// Locates `excerpt` in `chunk` and returns the covered line span and lines.
pub fn ground_excerpt(chunk: &Chunk, excerpt: &str) -> Option<Segment> {
    let excerpt = excerpt.trim_end_matches(['\n', '\r']);
    if excerpt.trim().is_empty() {
        return None;
    }
    let offset = chunk.text.find(excerpt)?;
    let first_line = chunk.text[..offset].matches('\n').count();
    let last_line = first_line + excerpt.matches('\n').count();
    let lines: Vec<String> = chunk
        .text
        .split('\n')
        .skip(first_line)
        .take(last_line - first_line + 1)
        .map(str::to_owned)
        .collect();
    let base = chunk.line_span.0;
    Some(Segment {
        chunk_id: chunk.id,
        line_span: (base + first_line as LineId, base + last_line as LineId),
        text: excerpt.to_owned(),
        lines,
    })
}

impl<'a> QTreeSession<'a> {
    pub fn new(client: &'a LlmClient, background: &'a str) -> Self {
        QTreeSession {
            client,
            background,
            trace: Vec::new(),
            tree: 0,
            branch: None,
            raw: Vec::new(),
        }
    }

    fn ask(&mut self, purpose: Purpose, layer: &str, bindings: BTreeMap<&str, String>) -> Result<String, QTreeError> {
        let mut bindings = bindings;
        bindings.insert("background", self.background.to_owned());
        let prompt = render_prompt(purpose, &bindings)?;
        let reply = self.client.complete(&CompletionRequest::new(purpose, prompt.clone()));
        self.trace.push(TraceRecord {
            tree: self.tree,
            branch: self.branch,
            layer: layer.to_owned(),
            input_hash: prompt_hash(&prompt),
            output_hash: reply.as_ref().map(|r| prompt_hash(r)).unwrap_or_default(),
        });
        let reply = reply?;
        self.raw.push((layer.to_owned(), reply.clone()));
        Ok(reply)
    }

    /// Layer 1. Re-queries up to three times to reach `breadth` distinct
    /// (case-insensitive) questions, then accepts fewer with `short` set.
    pub fn generate_questions(&mut self, chunks: &[Chunk], breadth: usize) -> Result<Questions, QTreeError> {
        assert!(!chunks.is_empty() && breadth >= 1);
        let rendered = render_chunks(chunks);
        let mut out = Questions::default();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..4 {
            let bindings = BTreeMap::from([("chunks", rendered.clone()), ("breadth", breadth.to_string())]);
            let reply = self.ask(Purpose::Explore, "explore", bindings)?;
            let parsed = parse_questions(&reply);
            if parsed.len() > parsed.iter().map(|q| q.to_lowercase()).collect::<std::collections::HashSet<_>>().len() {
                out.short = true;
            }
            for q in parsed {
                if out.questions.len() < breadth && seen.insert(q.to_lowercase()) {
                    out.questions.push(q);
                }
            }
            if out.questions.len() >= breadth {
                break;
            }
        }
        if out.questions.is_empty() {
            return Err(QTreeError::degenerate("explore", "no parseable questions"));
        }
        out.short |= out.questions.len() < breadth;
        Ok(out)
    }

    /// Layer 2. Only excerpts found verbatim in their chunk survive.
    pub fn select_segments(&mut self, question: &str, chunks: &[Chunk], attempts: usize) -> Result<Selection, QTreeError> {
        assert!(!question.trim().is_empty(), "question must be non-empty");
        let rendered = render_chunks(chunks);
        let mut dropped = 0;
        for _ in 0..attempts.max(1) {
            let bindings = BTreeMap::from([("question", question.to_owned()), ("chunks", rendered.clone())]);
            let reply = self.ask(Purpose::Select, "select", bindings)?;
            let mut segments: Vec<Segment> = Vec::new();
            for claim in parse_selection(&reply) {
                let grounded = match claim.chunk_id {
                    Some(id) => chunks.iter().find(|c| c.id == id).and_then(|c| ground_excerpt(c, &claim.text)),
                    None => chunks.iter().find_map(|c| ground_excerpt(c, &claim.text)),
                };
                match grounded {
                    Some(s) if !segments.contains(&s) => segments.push(s),
                    Some(_) => {}
                    None => dropped += 1,
                }
            }
            if !segments.is_empty() {
                return Ok(Selection { segments, dropped });
            }
        }
        Err(QTreeError::degenerate(
            "select",
            format!("no grounded segments ({dropped} excerpts dropped)"),
        ))
    }

    /// Layer 3. Keeps rules that compile and match at least one segment line.
    pub fn generate_pattern_fragment(
        &mut self,
        question: &str,
        segments: &[Segment],
        attempts: usize,
    ) -> Result<Fragment, QTreeError> {
        assert!(!segments.is_empty());
        let mut lines: Vec<&str> = Vec::new();
        for l in segments.iter().flat_map(|s| s.lines.iter()) {
            if !lines.contains(&l.as_str()) {
                lines.push(l);
            }
        }
        let mut rejected = Vec::new();
        for _ in 0..attempts.max(1) {
            let bindings = BTreeMap::from([("question", question.to_owned()), ("segments", lines.join("\n"))]);
            let reply = self.ask(Purpose::Pattern, "pattern", bindings)?;
            let Some(json) = extract_json(&reply) else {
                rejected.push(("<reply>".to_owned(), "no rule document in reply".to_owned()));
                continue;
            };
            let (program, diagnostics) = match compile_program(json, CompileMode::Lenient) {
                Ok(p) => p,
                Err(e) => {
                    rejected.push(("<reply>".to_owned(), e.to_string()));
                    continue;
                }
            };
            rejected.extend(diagnostics.into_iter().map(|d| (d.rule_id, d.reason)));
            let mut kept = Vec::new();
            for rule in program.rules() {
                if lines.iter().any(|l| rule.is_full_match(l)) {
                    kept.push(rule.clone());
                } else {
                    rejected.push((rule.id.clone(), "matches no selected line".to_owned()));
                }
            }
            if !kept.is_empty() {
                let prefix = match self.branch {
                    Some(b) => format!("t{}b{}.", self.tree, b),
                    None => format!("t{}.", self.tree),
                };
                let rules = kept
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| retag(&r, format!("{prefix}{}", r.id), i as i64, Provenance::QtreeBranch))
                    .collect();
                let program = ParserProgram::from_rules(rules, 0).expect("prefixed ids are unique");
                return Ok(Fragment { program, rejected });
            }
        }
        Err(QTreeError::degenerate(
            "pattern",
            format!("empty fragment after filtering ({} rules rejected)", rejected.len()),
        ))
    }

    /// Asks the model to merge `parts`; falls back to the deterministic merge
    /// when the reply is unusable or loses any line in `must_match`.
    pub fn merge(&mut self, parts: &[ParserProgram], must_match: &[&str], layer: &str) -> (ParserProgram, bool) {
        if parts.len() == 1 {
            return (merge_programs(parts), false);
        }
        let programs = parts
            .iter()
            .enumerate()
            .map(|(i, p)| format!("Parser {}:\n{}", i + 1, p.serialize()))
            .collect::<Vec<_>>()
            .join("\n\n");
        let merged = self
            .ask(Purpose::Merge, layer, BTreeMap::from([("programs", programs)]))
            .ok()
            .and_then(|reply| extract_json(&reply).map(str::to_owned))
            .and_then(|json| compile_program(&json, CompileMode::Lenient).ok())
            .map(|(p, _)| p)
            .filter(|p| !p.is_empty() && must_match.iter().all(|l| p.matches_any(l)));
        match merged {
            Some(p) => {
                let version = parts.iter().map(|p| p.version).max().unwrap_or(0) + 1;
                let parents = parts.iter().map(|p| p.version).collect();
                let rules = p
                    .rules()
                    .iter()
                    .map(|r| retag(r, r.id.clone(), r.priority, Provenance::Merge))
                    .collect();
                let program = ParserProgram::from_rules(rules, version)
                    .expect("compiled ids are unique")
                    .with_lineage("llm_merge", parents);
                (program, false)
            }
            None => (merge_programs(parts), true),
        }
    }

    pub fn take_raw(&mut self) -> Vec<(String, String)> {
        std::mem::take(&mut self.raw)
    }
}

/// Copy of `rule` with a new id, priority and provenance.
pub fn retag(rule: &TemplateRule, id: String, priority: i64, provenance: Provenance) -> TemplateRule {
    TemplateRule::new(id, rule.pattern.clone(), rule.template.clone(), priority, provenance)
        .expect("rule was already valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTreeOutcome {
    pub program: ParserProgram,
    pub trees: Vec<QTree>,
    pub trace: Vec<TraceRecord>,
    /// Human-readable reasons for failed trees or branches.
    pub failures: Vec<String>,
    pub merge_groups: usize,
    pub fold_steps: usize,
    pub merge_fallbacks: usize,
}

impl QTreeOutcome {
    pub fn branches(&self) -> impl Iterator<Item = &QBranch> {
        self.trees.iter().flat_map(|t| t.branches.iter())
    }
}

/// Runs every tree and branch over `chunks`, then merges the fragments.
///
/// Chunks are packed into trees by `chunk_token_limit`. Fails only when no
/// branch produced a fragment.
pub fn run_qtree(
    client: &LlmClient,
    chunks: &[Chunk],
    background: &str,
    cfg: &QTreeConfig,
) -> Result<QTreeOutcome, QTreeError> {
    let mut trace = Vec::new();
    run_qtree_traced(client, chunks, background, cfg, &mut trace)
}

/// As [`run_qtree`], appending to `trace` even when the run fails.
pub fn run_qtree_traced(
    client: &LlmClient,
    chunks: &[Chunk],
    background: &str,
    cfg: &QTreeConfig,
    trace: &mut Vec<TraceRecord>,
) -> Result<QTreeOutcome, QTreeError> {
    assert!(!chunks.is_empty(), "run_qtree needs at least one chunk");
    let mut session = QTreeSession::new(client, background);
    let mut trees = Vec::new();
    let mut failures: Vec<QTreeError> = Vec::new();
    let mut attempted = 0;

    let packed = group_by_token_limit(
        chunks.iter().map(|c| (format!("[chunk {}]\n{}", c.id, c.text), c.clone())).collect(),
        cfg.chunk_token_limit,
    );
    for (t, group) in packed.into_iter().enumerate() {
        session.tree = t;
        session.branch = None;
        let tree_chunks: Vec<Chunk> = group.items.into_iter().map(|(_, c)| c).collect();
        let mut tree = QTree {
            background: background.to_owned(),
            chunk_ids: tree_chunks.iter().map(|c| c.id).collect(),
            branches: Vec::new(),
        };
        let questions = match session.generate_questions(&tree_chunks, cfg.breadth) {
            Ok(q) => q,
            Err(e) => {
                attempted += 1;
                failures.push(e);
                continue;
            }
        };
        session.take_raw();
        for (b, question) in questions.questions.iter().enumerate() {
            attempted += 1;
            session.branch = Some(b);
            let branch = session
                .select_segments(question, &tree_chunks, cfg.layer_attempts)
                .and_then(|sel| {
                    session
                        .generate_pattern_fragment(question, &sel.segments, cfg.layer_attempts)
                        .map(|frag| (sel, frag))
                });
            let raw = session.take_raw();
            match branch {
                Ok((sel, frag)) => tree.branches.push(QBranch {
                    question: question.clone(),
                    segments: sel.segments,
                    fragment: frag.program,
                    raw_llm_outputs: raw,
                }),
                Err(e) => failures.push(e),
            }
        }
        trees.push(tree);
    }
    trace.append(&mut session.trace);

    let failure_text: Vec<String> = failures.iter().map(ToString::to_string).collect();
    let branches: Vec<&QBranch> = trees.iter().flat_map(|t| t.branches.iter()).collect();
    if branches.is_empty() {
        let first = failures
            .into_iter()
            .next()
            .unwrap_or_else(|| QTreeError::degenerate("explore", "no branches"));
        return Err(QTreeError::AllBranchesFailed {
            attempted,
            first: Box::new(first),
        });
    }

    // merge fragments group by group, then fold the groups in order
    session.tree = 0;
    session.branch = None;
    let groups = group_by_token_limit(
        branches.iter().map(|b| (b.fragment.serialize(), *b)).collect(),
        cfg.token_limit,
    );
    let merge_groups = groups.len();
    let mut merge_fallbacks = 0;
    let mut merged: Vec<(ParserProgram, Vec<&str>)> = Vec::new();
    for group in &groups {
        let parts: Vec<ParserProgram> = group.items.iter().map(|(_, b)| b.fragment.clone()).collect();
        let lines: Vec<&str> = group.items.iter().flat_map(|(_, b)| b.matched_lines()).collect();
        let (program, fell_back) = session.merge(&parts, &lines, "merge");
        merge_fallbacks += usize::from(fell_back && parts.len() > 1);
        merged.push((program, lines));
    }
    let mut fold_steps = 0;
    let mut iter = merged.into_iter();
    let (mut acc, mut acc_lines) = iter.next().expect("at least one group");
    for (next, lines) in iter {
        acc_lines.extend(lines);
        let (program, fell_back) = session.merge(&[acc, next], &acc_lines, "fold");
        merge_fallbacks += usize::from(fell_back);
        acc = program;
        fold_steps += 1;
    }
    trace.append(&mut session.trace);

    // integrity: every branch's matched lines must survive the merge
    let all_lines: Vec<&str> = branches.iter().flat_map(|b| b.matched_lines()).collect();
    if !all_lines.iter().all(|l| acc.matches_any(l)) {
        let parts: Vec<ParserProgram> = branches.iter().map(|b| b.fragment.clone()).collect();
        acc = merge_programs(&parts);
        merge_fallbacks += 1;
    }

    Ok(QTreeOutcome {
        program: acc,
        trees,
        trace: trace.clone(),
        failures: failure_text,
        merge_groups,
        fold_steps,
        merge_fallbacks,
    })
}
