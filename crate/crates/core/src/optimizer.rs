//! Evolutionary refinement of parser programs.
//!
//! Each island keeps a MAP-Elites archive over (rule count, mean specificity).
//! Parents are drawn uniformly from occupied cells, mutated by the model with
//! textual feedback about misparsed lines, and scored with `1 - loss`. Island
//! bests migrate around a ring on a fixed schedule.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GroundTruth, LineId, LogFile};
use crate::llm::{extract_json, render_prompt, BackendError, CompletionRequest, LlmClient, Purpose};
use crate::metrics::{evaluate, EvalReport};
use crate::program::{compile_program, CompileMode, ParseResult, ParserProgram, Provenance, TemplateRule};

/// Log and annotations a program is scored on, possibly a seeded subsample of
/// the full log (renumbered densely).
#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub log: LogFile,
    pub truth: GroundTruth,
    /// Original line id of each corpus line.
    pub source_ids: Vec<LineId>,
}

impl EvalCorpus {
    pub fn full(log: &LogFile, truth: &GroundTruth) -> Self {
        EvalCorpus {
            log: log.clone(),
            truth: truth.clone(),
            source_ids: log.ids().collect(),
        }
    }

    /// At most `max_lines` lines, chosen uniformly with `seed`, in log order.
    pub fn sampled(log: &LogFile, truth: &GroundTruth, max_lines: usize, seed: u64) -> Self {
        if log.total_lines() <= max_lines {
            return Self::full(log, truth);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, log.total_lines(), max_lines).into_vec();
        picked.sort_unstable();
        let source_ids: Vec<LineId> = picked.iter().map(|&i| (i + 1) as LineId).collect();
        let lines: Vec<String> = picked.iter().map(|&i| log.lines()[i].content.clone()).collect();
        let mut sub_truth = GroundTruth::new();
        for (new, &old) in source_ids.iter().enumerate() {
            sub_truth
                .insert(
                    (new + 1) as LineId,
                    truth.content(old).unwrap_or_default(),
                    truth.template(old).unwrap_or("<missing>"),
                )
                .expect("fresh ids");
        }
        EvalCorpus {
            log: LogFile::from_lines(log.source_path.clone(), lines),
            truth: sub_truth,
            source_ids,
        }
    }

    pub fn evaluate(&self, program: &ParserProgram) -> (ParseResult, EvalReport) {
        let result = program.execute(&self.log);
        let report = evaluate(&result, &self.truth).expect("corpus universes agree by construction");
        (result, report)
    }
}

/// MAP-Elites cell coordinates.
pub type Descriptor = (usize, usize);

pub const RULE_COUNT_BUCKETS: usize = 5;
pub const SPECIFICITY_BUCKETS: usize = 5;

/// Rule-count buckets {0–2, 3–5, 6–10, 11–20, 21+} by mean-specificity
/// quintile.
pub fn descriptor(program: &ParserProgram) -> Descriptor {
    let rules = match program.len() {
        0..=2 => 0,
        3..=5 => 1,
        6..=10 => 2,
        11..=20 => 3,
        _ => 4,
    };
    let spec = ((program.mean_specificity() * SPECIFICITY_BUCKETS as f64) as usize).min(SPECIFICITY_BUCKETS - 1);
    (rules, spec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub program: ParserProgram,
    pub score: f64,
    pub report: EvalReport,
    pub descriptor: Descriptor,
    pub island: usize,
    pub generation: usize,
    /// Creation order, used to break score ties in favour of the earlier one.
    pub seq: u64,
}

impl Candidate {
    pub fn new(program: ParserProgram, report: EvalReport, island: usize, generation: usize, seq: u64) -> Self {
        Candidate {
            id: format!("g{generation}i{island}v{}", program.version),
            score: report.score(),
            descriptor: descriptor(&program),
            program,
            report,
            island,
            generation,
            seq,
        }
    }

    fn beats(&self, other: &Candidate) -> bool {
        self.score > other.score || (self.score == other.score && self.seq < other.seq)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EliteArchive {
    pub grid: BTreeMap<Descriptor, Candidate>,
}

impl EliteArchive {
    /// Keeps `candidate` if its cell is empty or it scores strictly higher.
    pub fn insert(&mut self, candidate: Candidate) -> bool {
        match self.grid.get(&candidate.descriptor) {
            Some(existing) if existing.score >= candidate.score => false,
            _ => {
                self.grid.insert(candidate.descriptor, candidate);
                true
            }
        }
    }

    pub fn best(&self) -> Option<&Candidate> {
        self.grid
            .values()
            .fold(None, |best: Option<&Candidate>, c| match best {
                Some(b) if !c.beats(b) => Some(b),
                _ => Some(c),
            })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarKind {
    Unmatched,
    TemplateMismatch,
    Misgrouped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub line_id: LineId,
    pub kind: ExemplarKind,
    pub content: String,
    /// `None` when the line was unmatched.
    pub predicted: Option<String>,
    pub predicted_rule: Option<String>,
    pub expected: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualFeedback {
    pub summary: String,
    pub exemplars: Vec<Exemplar>,
}

impl TextualFeedback {
    pub fn render(&self) -> String {
        let mut out = self.summary.clone();
        if !self.exemplars.is_empty() {
            out.push_str("\nMisparsed lines:");
        }
        for e in &self.exemplars {
            let predicted = e.predicted.as_deref().unwrap_or("UNMATCHED");
            out.push_str(&format!(
                "\n- line {} ({:?}): {}\n  predicted: {}\n  expected:  {}",
                e.line_id, e.kind, e.content, predicted, e.expected
            ));
        }
        out
    }
}

/// Picks `take` of `items` at an even stride, offset by `seed`.
fn stride_pick<T: Copy>(items: &[T], take: usize, seed: u64) -> Vec<T> {
    if take >= items.len() {
        return items.to_vec();
    }
    if take == 0 {
        return Vec::new();
    }
    let stride = items.len() as f64 / take as f64;
    let offset = (seed % 1024) as f64 / 1024.0 * stride;
    (0..take)
        .map(|i| items[((offset + i as f64 * stride) as usize).min(items.len() - 1)])
        .collect()
}

/// Summarizes a report as text plus up to `cap` misparsed lines: unmatched
/// first, then template mismatches, then misgrouped lines.
pub fn build_feedback(
    report: &EvalReport,
    result: &ParseResult,
    truth: &GroundTruth,
    cap: usize,
    seed: u64,
) -> TextualFeedback {
    assert!(cap >= 1);
    let summary = format!(
        "GA={:.4} PA={:.4} FGA={:.4} FTA={:.4} loss={:.4}; lines={} unmatched={} template_mismatch={} misgrouped={}",
        report.ga,
        report.pa,
        report.fga,
        report.fta,
        report.loss,
        report.total_lines,
        report.unmatched_lines.len(),
        report.template_mismatch_lines.len(),
        report.misgrouped_lines.len(),
    );
    let mut taken: BTreeSet<LineId> = BTreeSet::new();
    let mut exemplars = Vec::new();
    let categories = [
        (ExemplarKind::Unmatched, &report.unmatched_lines),
        (ExemplarKind::TemplateMismatch, &report.template_mismatch_lines),
        (ExemplarKind::Misgrouped, &report.misgrouped_lines),
    ];
    for (kind, lines) in categories {
        let remaining = cap - exemplars.len();
        if remaining == 0 {
            break;
        }
        let fresh: Vec<LineId> = lines.iter().copied().filter(|id| !taken.contains(id)).collect();
        for id in stride_pick(&fresh, remaining, seed) {
            taken.insert(id);
            exemplars.push(Exemplar {
                line_id: id,
                kind,
                content: result.content(id).to_owned(),
                predicted: result.template(id).map(str::to_owned),
                predicted_rule: result.rule_id(id).map(str::to_owned),
                expected: truth.template(id).unwrap_or_default().to_owned(),
            });
        }
    }
    TextualFeedback { summary, exemplars }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mutation {
    pub program: ParserProgram,
    pub fallback: bool,
    pub backend_error: Option<BackendError>,
}

/// Rule generalized from a concrete line: whitespace tokens containing a digit
/// become variables.
pub fn generalize_line(id: String, line: &str, priority: i64, provenance: Provenance) -> TemplateRule {
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.is_empty() || !tokens.iter().any(|t| t.chars().any(|c| c.is_ascii_digit())) {
        return TemplateRule::literal(id, line, priority, provenance);
    }
    let mut pattern = String::from(r"\s*");
    let mut template = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            pattern.push_str(r"\s+");
        }
        if t.chars().any(|c| c.is_ascii_digit()) {
            pattern.push_str(r"(\S+)");
            template.push("<*>".to_owned());
        } else {
            pattern.push_str(&regex::escape(t));
            template.push(t.replace("<*>", "<\u{2217}>"));
        }
    }
    pattern.push_str(r"\s*");
    TemplateRule::new(id, pattern, template.join(" "), priority, provenance)
        .unwrap_or_else(|_| TemplateRule::literal("literal", line, priority, Provenance::Mutation(0)))
}

fn insert_rule(parent: &ParserProgram, rule: TemplateRule, at: usize, version: u64) -> ParserProgram {
    let mut rules: Vec<TemplateRule> = parent.rules().to_vec();
    rules.insert(at.min(rules.len()), rule);
    let rules = rules
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            TemplateRule::new(r.id.clone(), r.pattern.clone(), r.template.clone(), i as i64, r.provenance.clone())
                .expect("valid rule")
        })
        .collect();
    ParserProgram::from_rules(rules, version).unwrap_or_else(|_| parent.clone().with_version(version))
}

fn fresh_id(program: &ParserProgram, base: &str) -> String {
    let mut id = base.to_owned();
    let mut n = 1;
    while program.rules().iter().any(|r| r.id == id) {
        id = format!("{base}~{n}");
        n += 1;
    }
    id
}

/// Deterministic child used when the model reply is unusable.
///
/// For a line misparsed by some rule, a generalized rule for that line is
/// inserted just ahead of the offending rule. For an unmatched line, a literal
/// rule for exactly that line is appended.
pub fn fallback_mutation(
    parent: &ParserProgram,
    feedback: &TextualFeedback,
    generation: usize,
    version: u64,
    rng: &mut impl Rng,
) -> ParserProgram {
    let provenance = Provenance::Mutation(generation as u32);
    let misparsed: Vec<&Exemplar> = feedback
        .exemplars
        .iter()
        .filter(|e| e.predicted_rule.is_some())
        .collect();
    let unmatched: Vec<&Exemplar> = feedback
        .exemplars
        .iter()
        .filter(|e| e.predicted_rule.is_none())
        .collect();
    let use_misparsed = match (misparsed.is_empty(), unmatched.is_empty()) {
        (true, true) => return parent.clone().with_version(version),
        (false, true) => true,
        (true, false) => false,
        (false, false) => rng.random_bool(0.5),
    };
    if use_misparsed {
        let e = misparsed[rng.random_range(0..misparsed.len())];
        let owner = e.predicted_rule.as_deref().unwrap_or_default();
        let at = parent.rules().iter().position(|r| r.id == owner).unwrap_or(0);
        let id = fresh_id(parent, &format!("{owner}.g{generation}"));
        let rule = generalize_line(id, &e.content, 0, provenance);
        insert_rule(parent, rule, at, version)
    } else {
        let e = unmatched[rng.random_range(0..unmatched.len())];
        let id = fresh_id(parent, &format!("lit.g{generation}.l{}", e.line_id));
        let rule = TemplateRule::literal(id, &e.content, 0, provenance);
        insert_rule(parent, rule, parent.len(), version)
    }
}

/// Asks the model for an improved program; falls back to
/// [`fallback_mutation`] when the reply is missing or invalid.
#[allow(clippy::too_many_arguments)]
pub fn mutate(
    client: &LlmClient,
    background: &str,
    parent: &Candidate,
    feedback: &TextualFeedback,
    generation: usize,
    version: u64,
    rng: &mut impl Rng,
) -> Mutation {
    let bindings = BTreeMap::from([
        ("background", background.to_owned()),
        ("program", parent.program.serialize()),
        ("feedback", feedback.render()),
    ]);
    let prompt = render_prompt(Purpose::Mutate, &bindings).expect("mutate template bindings are complete");
    let reply = client.complete(&CompletionRequest::new(Purpose::Mutate, prompt));
    let lineage = |p: ParserProgram| {
        let mut p = p.with_version(version);
        p.lineage = parent.program.lineage.clone();
        p.with_lineage(format!("mutate@g{generation}"), vec![parent.program.version])
    };
    let (reply, backend_error) = match reply {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e)),
    };
    let parsed = reply
        .as_deref()
        .and_then(extract_json)
        .and_then(|json| compile_program(json, CompileMode::Lenient).ok())
        .map(|(p, _)| p)
        .filter(|p| !p.is_empty());
    match parsed {
        Some(p) => Mutation {
            program: lineage(p),
            fallback: false,
            backend_error,
        },
        None => Mutation {
            program: lineage(fallback_mutation(&parent.program, feedback, generation, version, rng)),
            fallback: true,
            backend_error,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub islands: usize,
    pub generations: usize,
    pub migrate_every: usize,
    pub seed: u64,
    pub feedback_cap: usize,
    pub eval_max_lines: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            islands: 4,
            generations: 10,
            migrate_every: 5,
            seed: 0,
            feedback_cap: 20,
            eval_max_lines: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEdge {
    pub child: u64,
    pub parent: u64,
    pub island: usize,
    pub generation: usize,
    pub fallback: bool,
    pub inserted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub generation: usize,
    pub island: usize,
    pub best_score: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Migration {
    pub generation: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOutcome {
    pub best: Candidate,
    pub lineage: Vec<LineageEdge>,
    pub progress: Vec<ProgressRecord>,
    pub migrations: Vec<Migration>,
    /// Global best score after each generation.
    pub best_per_generation: Vec<f64>,
    pub next_version: u64,
}

fn global_best(archives: &[EliteArchive]) -> &Candidate {
    archives
        .iter()
        .filter_map(EliteArchive::best)
        .fold(None, |best: Option<&Candidate>, c| match best {
            Some(b) if !c.beats(b) => Some(b),
            _ => Some(c),
        })
        .expect("archives are seeded")
}

/// Runs the island model for `cfg.generations` generations starting from
/// `initial`. Program versions are allocated from `first_version` upwards.
///
/// Fails only when every mutation request failed with a transient backend
/// error, i.e. the backend was unreachable for the whole run.
pub fn evolve(
    client: &LlmClient,
    background: &str,
    initial: &ParserProgram,
    corpus: &EvalCorpus,
    cfg: &OptimizerConfig,
    first_version: u64,
) -> Result<EvolveOutcome, BackendError> {
    assert!(cfg.generations >= 1 && cfg.islands >= 1, "generations and islands must be >= 1");
    let (_, initial_report) = corpus.evaluate(initial);
    let mut seq = 0u64;
    let mut archives: Vec<EliteArchive> = (0..cfg.islands)
        .map(|island| {
            let mut a = EliteArchive::default();
            a.insert(Candidate::new(initial.clone(), initial_report.clone(), island, 0, seq));
            a
        })
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..cfg.islands)
        .map(|i| ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1))))
        .collect();

    let mut version = first_version.max(initial.version + 1);
    let mut lineage = Vec::new();
    let mut progress = Vec::new();
    let mut migrations = Vec::new();
    let mut best_per_generation = Vec::new();
    let mut requests = 0usize;
    let mut transient_failures = 0usize;
    let mut last_error = None;

    for generation in 1..=cfg.generations {
        for island in 0..cfg.islands {
            let rng = &mut rngs[island];
            let cells: Vec<&Candidate> = archives[island].grid.values().collect();
            let parent = cells[rng.random_range(0..cells.len())].clone();
            let (result, report) = corpus.evaluate(&parent.program);
            let feedback = build_feedback(&report, &result, &corpus.truth, cfg.feedback_cap, rng.random());
            let child_version = version;
            version += 1;
            let m = mutate(client, background, &parent, &feedback, generation, child_version, rng);
            requests += 1;
            if let Some(e) = &m.backend_error {
                if e.is_transient() {
                    transient_failures += 1;
                }
                last_error = Some(e.clone());
            }
            let (_, child_report) = corpus.evaluate(&m.program);
            seq += 1;
            let child = Candidate::new(m.program, child_report, island, generation, seq);
            let inserted = archives[island].insert(child);
            lineage.push(LineageEdge {
                child: child_version,
                parent: parent.program.version,
                island,
                generation,
                fallback: m.fallback,
                inserted,
            });
        }

        if cfg.islands > 1 && cfg.migrate_every > 0 && generation % cfg.migrate_every == 0 {
            let bests: Vec<Candidate> = archives
                .iter()
                .map(|a| a.best().expect("seeded").clone())
                .collect();
            for (from, best) in bests.into_iter().enumerate() {
                let to = (from + 1) % cfg.islands;
                archives[to].insert(best);
                migrations.push(Migration { generation, from, to });
            }
        }

        for (island, archive) in archives.iter().enumerate() {
            let best = archive.best().expect("seeded");
            progress.push(ProgressRecord {
                generation,
                island,
                best_score: best.score,
                loss: best.report.loss,
            });
        }
        best_per_generation.push(global_best(&archives).score);
    }

    if requests > 0 && transient_failures == requests {
        return Err(last_error.expect("a failure was recorded"));
    }

    let best = global_best(&archives).clone();
    Ok(EvolveOutcome {
        best,
        lineage,
        progress,
        migrations,
        best_per_generation,
        next_version: version,
    })
}
