//! Parser programs: ordered template rules executed with first-match-wins
//! semantics.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use regex::{Regex, RegexBuilder, RegexSet, RegexSetBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LineId, LogFile};

/// Placeholder token marking a variable in a template.
pub const PLACEHOLDER: &str = "<*>";

/// Work allowed per line, in bytes scanned across rule attempts.
pub const DEFAULT_STEP_BUDGET: usize = 100_000;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProgramError {
    #[error("malformed rule document: {0}")]
    Schema(String),
    #[error("rule {rule_id}: {reason}")]
    Rule { rule_id: String, reason: String },
}

/// Where a rule came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    QtreeBranch,
    Merge,
    BoostIteration(u32),
    Mutation(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub operation: String,
    pub parents: Vec<u64>,
}

/// Serializable rule as it appears in a rule document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    #[serde(default)]
    pub id: Option<String>,
    pub pattern: String,
    pub template: String,
    #[serde(default)]
    pub priority: Option<i64>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
}

/// The JSON contract shared by storage and LLM replies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDocument {
    #[serde(default)]
    pub version: u64,
    pub rules: Vec<RuleSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lineage: Vec<LineageEntry>,
}

/// A compiled rule. The pattern always matches the whole line.
#[derive(Clone)]
pub struct TemplateRule {
    pub id: String,
    pub pattern: String,
    pub template: String,
    pub priority: i64,
    pub provenance: Provenance,
    regex: Regex,
}

impl fmt::Debug for TemplateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TemplateRule")
            .field("id", &self.id)
            .field("pattern", &self.pattern)
            .field("template", &self.template)
            .field("priority", &self.priority)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl PartialEq for TemplateRule {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.pattern == other.pattern
            && self.template == other.template
            && self.priority == other.priority
            && self.provenance == other.provenance
    }
}

impl Eq for TemplateRule {}

fn anchored(pattern: &str) -> String {
    format!("^(?:{pattern})$")
}

pub fn placeholder_count(template: &str) -> usize {
    template.matches(PLACEHOLDER).count()
}

impl TemplateRule {
    pub fn new(
        id: impl Into<String>,
        pattern: impl Into<String>,
        template: impl Into<String>,
        priority: i64,
        provenance: Provenance,
    ) -> Result<Self, ProgramError> {
        let id = id.into();
        let pattern = pattern.into();
        let template = template.into();
        let err = |reason: String| ProgramError::Rule {
            rule_id: id.clone(),
            reason,
        };
        if template.is_empty() {
            return Err(err("empty template".into()));
        }
        let regex = RegexBuilder::new(&anchored(&pattern))
            .build()
            .map_err(|e| err(format!("bad pattern: {e}")))?;
        let groups = regex.captures_len() - 1;
        let holes = placeholder_count(&template);
        if groups != holes {
            return Err(err(format!(
                "placeholder mismatch: {groups} capture groups, {holes} placeholders"
            )));
        }
        Ok(TemplateRule {
            id,
            pattern,
            template,
            priority,
            provenance,
            regex,
        })
    }

    /// A rule matching exactly `line`, with no variables.
    pub fn literal(id: impl Into<String>, line: &str, priority: i64, provenance: Provenance) -> Self {
        // templates must be non-empty and free of stray placeholders
        let template = match line {
            "" => " ".to_owned(),
            _ => line.replace(PLACEHOLDER, "<\u{2217}>"),
        };
        TemplateRule::new(id, regex::escape(line), template, priority, provenance)
            .expect("escaped literal always compiles")
    }

    pub fn regex(&self) -> &Regex {
        &self.regex
    }

    pub fn is_full_match(&self, line: &str) -> bool {
        self.regex.is_match(line)
    }

    /// Captured variables when the rule matches `line` in full.
    pub fn capture(&self, line: &str) -> Option<Vec<String>> {
        let caps = self.regex.captures(line)?;
        Some(
            caps.iter()
                .skip(1)
                .map(|m| m.map(|m| m.as_str().to_owned()).unwrap_or_default())
                .collect(),
        )
    }

    pub fn specificity(&self) -> f64 {
        specificity(&self.pattern)
    }

    pub fn to_spec(&self) -> RuleSpec {
        RuleSpec {
            id: Some(self.id.clone()),
            pattern: self.pattern.clone(),
            template: self.template.clone(),
            priority: Some(self.priority),
            provenance: Some(self.provenance.clone()),
        }
    }

    fn same_rule(&self, other: &TemplateRule) -> bool {
        self.pattern == other.pattern && self.template == other.template
    }
}

/// Fraction of pattern characters that are literal text.
///
/// Escaped punctuation counts as one literal; class escapes, metacharacters
/// and everything inside `[...]` count as none.
pub fn specificity(pattern: &str) -> f64 {
    let len = pattern.chars().count();
    if len == 0 {
        return 0.0;
    }
    let mut literal = 0usize;
    let mut chars = pattern.chars();
    let mut in_class = false;
    while let Some(c) = chars.next() {
        if in_class {
            match c {
                '\\' => {
                    chars.next();
                }
                ']' => in_class = false,
                _ => {}
            }
            continue;
        }
        match c {
            '\\' => {
                if let Some(next) = chars.next() {
                    if !next.is_ascii_alphanumeric() {
                        literal += 1;
                    }
                }
            }
            '[' => in_class = true,
            '.' | '^' | '$' | '*' | '+' | '?' | '(' | ')' | '{' | '}' | '|' => {}
            _ => literal += 1,
        }
    }
    literal as f64 / len as f64
}

/// An immutable, executable parser.
#[derive(Clone, Default)]
pub struct ParserProgram {
    rules: Vec<TemplateRule>,
    pub version: u64,
    pub lineage: Vec<LineageEntry>,
    set: Option<RegexSet>,
}

impl fmt::Debug for ParserProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParserProgram")
            .field("version", &self.version)
            .field("rules", &self.rules)
            .field("lineage", &self.lineage)
            .finish()
    }
}

impl PartialEq for ParserProgram {
    fn eq(&self, other: &Self) -> bool {
        self.rules == other.rules && self.version == other.version && self.lineage == other.lineage
    }
}

impl Eq for ParserProgram {}

/// How rule errors are handled by [`compile_program`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompileMode {
    Strict,
    /// Bad rules are dropped and reported; duplicate ids are renamed.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleDiagnostic {
    pub rule_id: String,
    pub reason: String,
}

impl ParserProgram {
    /// Builds a program, ordering rules by priority (stable).
    pub fn from_rules(mut rules: Vec<TemplateRule>, version: u64) -> Result<Self, ProgramError> {
        let mut seen = HashSet::new();
        for r in &rules {
            if !seen.insert(r.id.as_str()) {
                return Err(ProgramError::Rule {
                    rule_id: r.id.clone(),
                    reason: "duplicate rule id".into(),
                });
            }
        }
        rules.sort_by_key(|r| r.priority);
        let set = build_set(&rules);
        Ok(ParserProgram {
            rules,
            version,
            lineage: Vec::new(),
            set,
        })
    }

    pub fn empty() -> Self {
        ParserProgram::default()
    }

    pub fn rules(&self) -> &[TemplateRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn mean_specificity(&self) -> f64 {
        if self.rules.is_empty() {
            return 0.0;
        }
        self.rules.iter().map(TemplateRule::specificity).sum::<f64>() / self.rules.len() as f64
    }

    pub fn with_lineage(mut self, operation: impl Into<String>, parents: Vec<u64>) -> Self {
        self.lineage.push(LineageEntry {
            operation: operation.into(),
            parents,
        });
        self
    }

    /// Same rules, new version number.
    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    /// Index of the first rule fully matching `line`.
    pub fn first_match(&self, line: &str) -> Option<usize> {
        match &self.set {
            Some(set) => set.matches(line).iter().next(),
            None => None,
        }
    }

    pub fn matches_any(&self, line: &str) -> bool {
        self.first_match(line).is_some()
    }

    pub fn to_document(&self) -> RuleDocument {
        RuleDocument {
            version: self.version,
            rules: self.rules.iter().map(TemplateRule::to_spec).collect(),
            lineage: self.lineage.clone(),
        }
    }

    pub fn serialize(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("rule document serializes")
    }

    pub fn deserialize(doc: &str) -> Result<Self, ProgramError> {
        compile_program(doc, CompileMode::Strict).map(|(p, _)| p)
    }

    /// Executes with the default step budget.
    pub fn execute(&self, log: &LogFile) -> ParseResult {
        execute(self, log, DEFAULT_STEP_BUDGET)
    }
}

fn build_set(rules: &[TemplateRule]) -> Option<RegexSet> {
    if rules.is_empty() {
        return None;
    }
    let set = RegexSetBuilder::new(rules.iter().map(|r| anchored(&r.pattern)))
        .size_limit(256 << 20)
        .build()
        .expect("individually valid patterns form a valid set");
    Some(set)
}

/// Parses and validates a rule document.
///
/// Missing ids default to `r{index}`, missing priorities to the rule's index
/// and missing provenance to `qtree_branch`.
pub fn compile_program(
    doc: &str,
    mode: CompileMode,
) -> Result<(ParserProgram, Vec<RuleDiagnostic>), ProgramError> {
    let document: RuleDocument =
        serde_json::from_str(doc).map_err(|e| ProgramError::Schema(e.to_string()))?;
    compile_document(&document, mode)
}

pub fn compile_document(
    document: &RuleDocument,
    mode: CompileMode,
) -> Result<(ParserProgram, Vec<RuleDiagnostic>), ProgramError> {
    let mut rules = Vec::with_capacity(document.rules.len());
    let mut diagnostics = Vec::new();
    let mut ids = HashSet::new();
    for (i, spec) in document.rules.iter().enumerate() {
        let mut id = spec.id.clone().unwrap_or_else(|| format!("r{i}"));
        if ids.contains(&id) {
            if mode == CompileMode::Strict {
                return Err(ProgramError::Rule {
                    rule_id: id,
                    reason: "duplicate rule id".into(),
                });
            }
            let base = id.clone();
            let mut n = 1;
            while ids.contains(&id) {
                id = format!("{base}~{n}");
                n += 1;
            }
            diagnostics.push(RuleDiagnostic {
                rule_id: id.clone(),
                reason: format!("renamed from duplicate id {base}"),
            });
        }
        let built = TemplateRule::new(
            id.clone(),
            spec.pattern.clone(),
            spec.template.clone(),
            spec.priority.unwrap_or(i as i64),
            spec.provenance.clone().unwrap_or_default(),
        );
        match built {
            Ok(rule) => {
                ids.insert(id);
                rules.push(rule);
            }
            Err(e) if mode == CompileMode::Strict => return Err(e),
            Err(ProgramError::Rule { rule_id, reason }) => {
                diagnostics.push(RuleDiagnostic { rule_id, reason })
            }
            Err(e) => return Err(e),
        }
    }
    let mut program = ParserProgram::from_rules(rules, document.version)?;
    program.lineage = document.lineage.clone();
    Ok((program, diagnostics))
}

/// Result of matching one line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineMatch {
    /// Index into [`ParseResult::rules`].
    pub rule: usize,
    pub variables: Vec<String>,
}

/// Per-line outcome of executing a program over a log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseResult {
    /// `(rule id, template)` for every rule of the program, in program order.
    pub rules: Vec<(String, String)>,
    /// Indexed by `line id - 1`.
    pub outcomes: Vec<Option<LineMatch>>,
    pub contents: Vec<String>,
    /// Rules whose attempt pushed a line over the step budget.
    pub budget_flags: BTreeSet<String>,
}

impl ParseResult {
    pub fn total_lines(&self) -> usize {
        self.outcomes.len()
    }

    pub fn template(&self, id: LineId) -> Option<&str> {
        let m = self.outcomes.get(id as usize - 1)?.as_ref()?;
        Some(self.rules[m.rule].1.as_str())
    }

    pub fn rule_id(&self, id: LineId) -> Option<&str> {
        let m = self.outcomes.get(id as usize - 1)?.as_ref()?;
        Some(self.rules[m.rule].0.as_str())
    }

    pub fn variables(&self, id: LineId) -> Option<&[String]> {
        self.outcomes
            .get(id as usize - 1)?
            .as_ref()
            .map(|m| m.variables.as_slice())
    }

    pub fn content(&self, id: LineId) -> &str {
        &self.contents[id as usize - 1]
    }

    pub fn unmatched(&self) -> BTreeSet<LineId> {
        self.outcomes
            .iter()
            .enumerate()
            .filter(|(_, o)| o.is_none())
            .map(|(i, _)| (i + 1) as LineId)
            .collect()
    }

    pub fn matched_count(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_some()).count()
    }

    /// Builds a result from `(content, template)` rows where `None` marks an
    /// unmatched line. Used for externally produced predictions.
    pub fn from_templates<I>(rows: I) -> Self
    where
        I: IntoIterator<Item = (String, Option<String>)>,
    {
        let mut rules: Vec<(String, String)> = Vec::new();
        let mut index = std::collections::HashMap::new();
        let mut outcomes = Vec::new();
        let mut contents = Vec::new();
        for (content, template) in rows {
            let outcome = template.map(|t| {
                let next = rules.len();
                let rule = *index.entry(t.clone()).or_insert_with(|| {
                    rules.push((format!("t{next}"), t.clone()));
                    next
                });
                LineMatch {
                    rule,
                    variables: Vec::new(),
                }
            });
            outcomes.push(outcome);
            contents.push(content);
        }
        ParseResult {
            rules,
            outcomes,
            contents,
            budget_flags: BTreeSet::new(),
        }
    }

    /// Writes `LineId,Content,EventTemplate,Matched`. Unmatched lines carry
    /// their raw content as the template.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["LineId", "Content", "EventTemplate", "Matched"])?;
        for (i, outcome) in self.outcomes.iter().enumerate() {
            let id = (i + 1).to_string();
            let content = self.contents[i].as_str();
            let (template, matched) = match outcome {
                Some(m) => (self.rules[m.rule].1.as_str(), "true"),
                None => (content, "false"),
            };
            w.write_record([id.as_str(), content, template, matched])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `program` over every line of `log`.
///
/// Each line takes the first rule, in program order, that matches it in full.
/// A rule attempt costs the line's byte length in steps; a line whose
/// attempts would exceed `step_budget` is left unmatched and the rule whose
/// attempt crossed the budget is flagged. Lines are processed in parallel and
/// the output is identical to sequential evaluation.
pub fn execute(program: &ParserProgram, log: &LogFile, step_budget: usize) -> ParseResult {
    let rules: Vec<(String, String)> = program
        .rules
        .iter()
        .map(|r| (r.id.clone(), r.template.clone()))
        .collect();
    let per_line: Vec<(Option<LineMatch>, Option<usize>)> = log
        .lines()
        .par_iter()
        .with_min_len(4096)
        .map(|line| match_line(program, &line.content, step_budget))
        .collect();
    let mut budget_flags = BTreeSet::new();
    let mut outcomes = Vec::with_capacity(per_line.len());
    for (outcome, flag) in per_line {
        if let Some(rule) = flag {
            budget_flags.insert(program.rules[rule].id.clone());
        }
        outcomes.push(outcome);
    }
    ParseResult {
        rules,
        outcomes,
        contents: log.lines().iter().map(|l| l.content.clone()).collect(),
        budget_flags,
    }
}

fn match_line(program: &ParserProgram, line: &str, step_budget: usize) -> (Option<LineMatch>, Option<usize>) {
    let cost = line.len().max(1);
    let hit = if cost.saturating_mul(program.rules.len()) <= step_budget {
        program.first_match(line)
    } else {
        let mut spent = 0usize;
        let mut hit = None;
        for (i, rule) in program.rules.iter().enumerate() {
            spent = spent.saturating_add(cost);
            if spent > step_budget {
                return (None, Some(i));
            }
            if rule.is_full_match(line) {
                hit = Some(i);
                break;
            }
        }
        hit
    };
    let outcome = hit.map(|rule| LineMatch {
        rule,
        variables: program.rules[rule].capture(line).unwrap_or_default(),
    });
    (outcome, None)
}

/// Deterministic merge of several programs.
///
/// Rules are concatenated in part order, exact duplicates (same pattern and
/// template) are dropped, and the survivors are re-prioritized by specificity
/// (descending), then pattern length (descending), then pattern text, then
/// original position.
pub fn merge_programs(parts: &[ParserProgram]) -> ParserProgram {
    let mut merged: Vec<TemplateRule> = Vec::new();
    for part in parts {
        for rule in &part.rules {
            if !merged.iter().any(|r| r.same_rule(rule)) {
                merged.push(rule.clone());
            }
        }
    }
    let mut order: Vec<usize> = (0..merged.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&merged[a], &merged[b]);
        rb.specificity()
            .total_cmp(&ra.specificity())
            .then_with(|| rb.pattern.len().cmp(&ra.pattern.len()))
            .then_with(|| ra.pattern.cmp(&rb.pattern))
            .then_with(|| a.cmp(&b))
    });
    let mut used = HashSet::new();
    let rules: Vec<TemplateRule> = order
        .into_iter()
        .enumerate()
        .map(|(priority, i)| {
            let mut rule = merged[i].clone();
            rule.priority = priority as i64;
            let mut id = rule.id.clone();
            let mut n = 1;
            while !used.insert(id.clone()) {
                id = format!("{}~{n}", rule.id);
                n += 1;
            }
            rule.id = id;
            rule
        })
        .collect();
    let version = parts.iter().map(|p| p.version).max().unwrap_or(0) + 1;
    let parents = parts.iter().map(|p| p.version).collect();
    ParserProgram::from_rules(rules, version)
        .expect("ids deduplicated above")
        .with_lineage("merge", parents)
}

/// Concatenates rule lists as-is, renumbering priorities in sequence and
/// renaming colliding ids. Used where an explicit order is wanted.
pub fn concat_programs(parts: &[&ParserProgram], version: u64) -> ParserProgram {
    let mut used = HashSet::new();
    let mut rules = Vec::new();
    for part in parts {
        for rule in &part.rules {
            if rules.iter().any(|r: &TemplateRule| r.same_rule(rule)) {
                continue;
            }
            let mut rule = rule.clone();
            let base = rule.id.clone();
            let mut n = 1;
            while !used.insert(rule.id.clone()) {
                rule.id = format!("{base}~{n}");
                n += 1;
            }
            rule.priority = rules.len() as i64;
            rules.push(rule);
        }
    }
    ParserProgram::from_rules(rules, version).expect("ids deduplicated above")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(rules: &[(&str, &str, &str, i64)]) -> String {
        let rules: Vec<RuleSpec> = rules
            .iter()
            .map(|(id, p, t, pr)| RuleSpec {
                id: Some((*id).into()),
                pattern: (*p).into(),
                template: (*t).into(),
                priority: Some(*pr),
                provenance: Some(Provenance::QtreeBranch),
            })
            .collect();
        serde_json::to_string(&RuleDocument {
            version: 1,
            rules,
            lineage: vec![],
        })
        .unwrap()
    }

    #[test]
    fn single_rule_document_compiles() {
        let (p, diags) = compile_program(
            &doc(&[("a", r"^connected to (\S+)$", "connected to <*>", 0)]),
            CompileMode::Strict,
        )
        .unwrap();
        assert_eq!(p.len(), 1);
        assert!(diags.is_empty());
    }

    #[test]
    fn placeholder_mismatch_is_rule_error() {
        let err = compile_program(&doc(&[("a", r"^(\d+) (\d+)$", "<*> x", 0)]), CompileMode::Strict)
            .unwrap_err();
        match err {
            ProgramError::Rule { rule_id, reason } => {
                assert_eq!(rule_id, "a");
                assert!(reason.contains("placeholder mismatch"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unclosed_group_is_bad_pattern() {
        let err = compile_program(&doc(&[("a", "^a(", "a", 0)]), CompileMode::Strict).unwrap_err();
        assert!(matches!(err, ProgramError::Rule { ref reason, .. } if reason.contains("bad pattern")));
    }

    #[test]
    fn lenient_mode_keeps_valid_rules() {
        let (p, diags) = compile_program(
            &doc(&[("a", "^a(", "a", 0), ("b", "b", "b", 1), ("b", "c", "c", 2)]),
            CompileMode::Lenient,
        )
        .unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(diags.len(), 2);
        assert_eq!(p.rules()[1].id, "b~1");
    }

    #[test]
    fn missing_template_is_schema_error() {
        let err = compile_program(r#"{"version":1,"rules":[{"id":"a","pattern":"x"}]}"#, CompileMode::Strict)
            .unwrap_err();
        assert!(matches!(err, ProgramError::Schema(_)));
    }

    #[test]
    fn empty_program_leaves_everything_unmatched() {
        let log = LogFile::from_lines("x", ["a", "b", "c"]);
        let r = ParserProgram::empty().execute(&log);
        assert_eq!(r.unmatched().len(), 3);
    }

    #[test]
    fn single_capture_variables() {
        let p = ParserProgram::deserialize(&doc(&[("a", r"connected to (\S+)", "connected to <*>", 0)])).unwrap();
        let log = LogFile::from_lines("x", ["connected to 10.0.0.1", "connected to"]);
        let r = p.execute(&log);
        assert_eq!(r.variables(1).unwrap(), ["10.0.0.1"]);
        assert_eq!(r.template(1), Some("connected to <*>"));
        assert!(r.unmatched().contains(&2));
    }

    #[test]
    fn patterns_are_full_line_anchored() {
        let p = ParserProgram::deserialize(&doc(&[("a", "done", "done", 0)])).unwrap();
        let log = LogFile::from_lines("x", ["done", "not done", "done!"]);
        let r = p.execute(&log);
        assert_eq!(r.unmatched(), BTreeSet::from([2, 3]));
    }

    #[test]
    fn first_match_wins_by_priority() {
        // B is listed first but has the larger priority number.
        let p = ParserProgram::deserialize(&doc(&[
            ("B", r"job (\d+) (\S+)", "job <*> <*>", 2),
            ("A", r"job (\d+) done", "job <*> done", 1),
        ]))
        .unwrap();
        let lines = ["job 1 done", "job 2 failed", "job 3 done", "other", "job 4 done"];
        let log = LogFile::from_lines("x", lines);
        let r = p.execute(&log);
        let ra = Regex::new(r"^job (\d+) done$").unwrap();
        let rb = Regex::new(r"^job (\d+) (\S+)$").unwrap();
        for (i, line) in lines.iter().enumerate() {
            let id = (i + 1) as LineId;
            let a = ra.is_match(line);
            let b = rb.is_match(line);
            let expected = if a { Some("A") } else if b { Some("B") } else { None };
            assert_eq!(r.rule_id(id), expected, "line {line}");
        }
    }

    #[test]
    fn step_budget_leaves_long_lines_unmatched() {
        let p = ParserProgram::deserialize(&doc(&[("a", "x", "x", 0), ("b", "y+", "y", 1)])).unwrap();
        let long = "y".repeat(60);
        let log = LogFile::from_lines("x", [long.as_str(), "x"]);
        let r = execute(&p, &log, 100);
        assert!(r.unmatched().contains(&1));
        assert_eq!(r.budget_flags, BTreeSet::from(["b".to_owned()]));
        assert_eq!(r.template(2), Some("x"));
    }

    #[test]
    fn merge_dedups_identical_programs() {
        let p = ParserProgram::deserialize(&doc(&[("a", "x", "x", 0)])).unwrap();
        assert_eq!(merge_programs(&[p.clone(), p]).len(), 1);
    }

    #[test]
    fn merge_keeps_all_disjoint_rules() {
        let p1 = ParserProgram::deserialize(&doc(&[("a", "a", "a", 0), ("b", "b", "b", 1)])).unwrap();
        let p2 = ParserProgram::deserialize(&doc(&[("c", "c", "c", 0), ("d", "d", "d", 1), ("a", "e", "e", 2)]))
            .unwrap();
        let m = merge_programs(&[p1.clone(), p2.clone()]);
        assert_eq!(m.len(), 5);
        for part in [&p1, &p2] {
            for rule in part.rules() {
                assert!(m.rules().iter().any(|r| r.same_rule(rule)));
            }
        }
    }

    #[test]
    fn literal_outranks_wildcard() {
        assert_eq!(specificity("abc"), 1.0);
        assert_eq!(specificity(".*"), 0.0);
        let p = ParserProgram::deserialize(&doc(&[("w", ".*", "<*>x", 0)]));
        assert!(p.is_err());
        let w = ParserProgram::deserialize(&doc(&[("w", "(.*)", "<*>", 0)])).unwrap();
        let l = ParserProgram::deserialize(&doc(&[("l", "abc", "abc", 0)])).unwrap();
        let m = merge_programs(&[w, l]);
        assert_eq!(m.rules()[0].id, "l");
        assert_eq!(m.rules()[1].id, "w");
    }

    #[test]
    fn specificity_counts_escapes_and_classes() {
        // "a", "\." literal; "\d", "[0-9]", "+" not
        let s = specificity(r"a\.\d[0-9]+");
        assert!((s - 2.0 / 11.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn round_trip_preserves_version_and_lineage() {
        let p = ParserProgram::deserialize(&doc(&[
            ("a", r"a (\d+)", "a <*>", 0),
            ("b", "b", "b", 1),
            ("c", r"c (\S+) (\S+)", "c <*> <*>", 2),
        ]))
        .unwrap()
        .with_version(7)
        .with_lineage("mutate", vec![3, 5]);
        let text = p.serialize();
        let back = ParserProgram::deserialize(&text).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.serialize(), text);
        assert_eq!(back.version, 7);
        assert_eq!(back.lineage[0].parents, vec![3, 5]);
    }

    #[test]
    fn provenance_serialization_shape() {
        let s = serde_json::to_string(&Provenance::BoostIteration(3)).unwrap();
        assert_eq!(s, r#"{"boost_iteration":3}"#);
        let s = serde_json::to_string(&Provenance::QtreeBranch).unwrap();
        assert_eq!(s, r#""qtree_branch""#);
    }

    #[test]
    fn csv_export_marks_unmatched() {
        let p = ParserProgram::deserialize(&doc(&[("a", r"a (\d+)", "a <*>", 0)])).unwrap();
        let log = LogFile::from_lines("x", ["a 1", "zzz, \"q\""]);
        let mut out = Vec::new();
        p.execute(&log).write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "LineId,Content,EventTemplate,Matched\n1,a 1,a <*>,true\n2,\"zzz, \"\"q\"\"\",\"zzz, \"\"q\"\"\",false\n"
        );
    }

    #[test]
    fn literal_rule_matches_only_its_line() {
        let r = TemplateRule::literal("l", "job 42 done (ok)", 0, Provenance::Mutation(1));
        assert!(r.is_full_match("job 42 done (ok)"));
        assert!(!r.is_full_match("job 43 done (ok)"));
    }

    proptest! {
        #[test]
        fn parallel_execution_matches_sequential(lines in proptest::collection::vec("[ab0-9 ]{0,12}", 0..300)) {
            let p = ParserProgram::deserialize(&doc(&[
                ("d", r"(\d+)", "<*>", 0),
                ("a", r"a(.*)", "a<*>", 1),
                ("s", r" *", " ", 2),
            ])).unwrap();
            let log = LogFile::from_lines("x", lines.clone());
            let r = p.execute(&log);
            prop_assert_eq!(r.total_lines(), lines.len());
            for (i, line) in lines.iter().enumerate() {
                let expected = p.rules().iter().position(|rule| rule.is_full_match(line));
                prop_assert_eq!(r.outcomes[i].as_ref().map(|m| m.rule), expected);
            }
        }
    }
}
