//! Log files, ground-truth annotations and context-bounded chunking.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::count_tokens;

/// 1-based line identifier.
pub type LineId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed structured log {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("ground truth does not match log: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub id: LineId,
    pub content: String,
}

/// An in-memory log with dense 1-based line ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LogFile {
    pub source_path: String,
    lines: Vec<LogLine>,
}

impl LogFile {
    /// Builds a log from raw line contents. Ids are assigned 1..=n.
    pub fn from_lines<I, S>(source_path: impl Into<String>, lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let lines = lines
            .into_iter()
            .enumerate()
            .map(|(i, s)| LogLine {
                id: (i + 1) as LineId,
                content: strip_terminator(s.into()),
            })
            .collect();
        LogFile {
            source_path: source_path.into(),
            lines,
        }
    }

    /// Splits `text` on `\n`, dropping one trailing `\r` per line. A final
    /// terminator does not produce an extra empty line.
    pub fn from_text(source_path: impl Into<String>, text: &str) -> Self {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if text.is_empty() {
            return LogFile::from_lines(source_path, Vec::<String>::new());
        }
        LogFile::from_lines(source_path, body.split('\n').map(str::to_owned))
    }

    pub fn lines(&self) -> &[LogLine] {
        &self.lines
    }

    pub fn total_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn line(&self, id: LineId) -> Option<&LogLine> {
        if id == 0 {
            return None;
        }
        self.lines.get(id as usize - 1)
    }

    pub fn ids(&self) -> impl Iterator<Item = LineId> + '_ {
        self.lines.iter().map(|l| l.id)
    }
}

fn strip_terminator(mut s: String) -> String {
    if s.ends_with('\n') {
        s.pop();
    }
    if s.ends_with('\r') {
        s.pop();
    }
    s
}

/// Reads a plain-text log. Invalid UTF-8 is replaced, never rejected.
pub fn load_log(path: impl AsRef<Path>) -> Result<LogFile, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    Ok(LogFile::from_text(path.display().to_string(), &text))
}

/// Expected template per line, as annotated in a structured CSV.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    templates: BTreeMap<LineId, String>,
    contents: BTreeMap<LineId, String>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts an annotation, refusing duplicates and empty templates.
    pub fn insert(
        &mut self,
        id: LineId,
        content: impl Into<String>,
        template: impl Into<String>,
    ) -> Result<(), String> {
        let template = template.into();
        if template.is_empty() {
            return Err(format!("empty template for LineId {id}"));
        }
        if self.templates.contains_key(&id) {
            return Err(format!("duplicate LineId {id}"));
        }
        self.templates.insert(id, template);
        self.contents.insert(id, content.into());
        Ok(())
    }

    pub fn template(&self, id: LineId) -> Option<&str> {
        self.templates.get(&id).map(String::as_str)
    }

    pub fn content(&self, id: LineId) -> Option<&str> {
        self.contents.get(&id).map(String::as_str)
    }

    pub fn templates(&self) -> &BTreeMap<LineId, String> {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn distinct_templates(&self) -> usize {
        let mut seen: Vec<&str> = self.templates.values().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }

    /// Checks that the annotated ids are exactly the ids of `log`.
    pub fn bind(&self, log: &LogFile) -> Result<(), CorpusError> {
        if self.templates.len() != log.total_lines() {
            return Err(CorpusError::Mismatch(format!(
                "{} annotated lines, log has {}",
                self.templates.len(),
                log.total_lines()
            )));
        }
        for (expected, id) in log.ids().zip(self.templates.keys()) {
            if expected != *id {
                return Err(CorpusError::Mismatch(format!(
                    "log line {expected} has no annotation"
                )));
            }
        }
        Ok(())
    }

    /// Reconstructs a log from the `Content` column.
    pub fn to_log(&self, source_path: impl Into<String>) -> LogFile {
        LogFile::from_lines(source_path, self.contents.values().cloned())
    }
}

/// Reads a LogHub-style structured CSV (`LineId,Content,EventTemplate`, extra
/// columns ignored).
pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruth, CorpusError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_ground_truth(&bytes).map_err(|reason| CorpusError::Format {
        path: path.to_owned(),
        reason,
    })
}

pub fn parse_ground_truth(bytes: &[u8]) -> Result<GroundTruth, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader.byte_headers().map_err(|e| e.to_string())?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| String::from_utf8_lossy(h).trim() == name)
            .ok_or_else(|| format!("missing column {name}"))
    };
    let id_col = column("LineId")?;
    let content_col = column("Content")?;
    let template_col = column("EventTemplate")?;

    let mut truth = GroundTruth::new();
    for (row, record) in reader.byte_records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let field = |i: usize| String::from_utf8_lossy(record.get(i).unwrap_or_default()).into_owned();
        let id: LineId = field(id_col)
            .trim()
            .parse()
            .map_err(|_| format!("row {}: LineId is not a positive integer", row + 1))?;
        truth.insert(id, field(content_col), field(template_col))?;
    }
    Ok(truth)
}

/// Greedy chunking limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentConfig {
    pub max_tokens: usize,
    pub max_lines: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            max_tokens: 2048,
            max_lines: 50,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_tokens < 64 {
            return Err(format!("max_tokens must be >= 64, got {}", self.max_tokens));
        }
        if self.max_lines < 1 {
            return Err("max_lines must be >= 1".to_owned());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: usize,
    /// Inclusive `(first, last)` line ids.
    pub line_span: (LineId, LineId),
    pub text: String,
    /// Set when a single line alone exceeds the token budget.
    pub oversized: bool,
}

impl Chunk {
    pub fn line_count(&self) -> usize {
        (self.line_span.1 - self.line_span.0 + 1) as usize
    }

    pub fn tokens(&self) -> usize {
        count_tokens(&self.text)
    }
}

/// Builds a chunk from consecutive lines of `log`.
pub fn make_chunk(log: &LogFile, id: usize, first: LineId, last: LineId) -> Chunk {
    let lines = &log.lines()[(first - 1) as usize..last as usize];
    let text = join_lines(lines);
    Chunk {
        id,
        line_span: (first, last),
        text,
        oversized: false,
    }
}

fn join_lines(lines: &[LogLine]) -> String {
    let mut text = String::with_capacity(lines.iter().map(|l| l.content.len() + 1).sum());
    for (i, line) in lines.iter().enumerate() {
        if i > 0 {
            text.push('\n');
        }
        text.push_str(&line.content);
    }
    text
}

/// Partitions `log` into contiguous chunks bounded by `cfg`.
///
/// Lines are packed greedily. When a chunk fills up and a blank line sits in
/// its last 20%, the chunk is cut right after that blank line instead.
pub fn segment(log: &LogFile, cfg: &SegmentConfig) -> Vec<Chunk> {
    let lines = log.lines();
    let max_lines = cfg.max_lines.max(1);
    let mut chunks = Vec::new();
    let mut start = 0usize;

    while start < lines.len() {
        // bytes of the joined text so far
        let mut bytes = lines[start].content.len();
        let mut end = start + 1;
        if bytes.div_ceil(4) > cfg.max_tokens {
            chunks.push(Chunk {
                oversized: true,
                ..make_chunk(log, chunks.len(), lines[start].id, lines[start].id)
            });
            start = end;
            continue;
        }
        let mut full = false;
        while end < lines.len() {
            let next = bytes + 1 + lines[end].content.len();
            if end - start + 1 > max_lines || next.div_ceil(4) > cfg.max_tokens {
                full = true;
                break;
            }
            bytes = next;
            end += 1;
        }
        if full {
            end = prefer_blank_boundary(lines, start, end);
        }
        chunks.push(make_chunk(log, chunks.len(), lines[start].id, lines[end - 1].id));
        start = end;
    }
    chunks
}

/// Returns the exclusive end of the chunk `[start, end)`, pulled back to just
/// after the last blank line within the final 20% of the chunk.
fn prefer_blank_boundary(lines: &[LogLine], start: usize, end: usize) -> usize {
    let len = end - start;
    let window_start = start + (len * 4).div_ceil(5);
    (window_start..end)
        .rev()
        .find(|&i| lines[i].content.trim().is_empty())
        .map(|i| i + 1)
        .unwrap_or(end)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_file_has_no_lines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.flush().unwrap();
        let log = load_log(f.path()).unwrap();
        assert_eq!(log.total_lines(), 0);
        assert!(segment(&log, &SegmentConfig::default()).is_empty());
    }

    #[test]
    fn three_lines_keep_content() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "alpha\r\nbeta  \ngamma\n").unwrap();
        let log = load_log(f.path()).unwrap();
        let ids: Vec<_> = log.ids().collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(log.line(1).unwrap().content, "alpha");
        assert_eq!(log.line(2).unwrap().content, "beta  ");
        assert_eq!(log.line(3).unwrap().content, "gamma");
    }

    #[test]
    fn invalid_bytes_are_replaced() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"ok\n\xff\xfe bad\n").unwrap();
        let log = load_log(f.path()).unwrap();
        assert_eq!(log.total_lines(), 2);
        assert!(log.line(2).unwrap().content.contains('\u{FFFD}'));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_log("/nonexistent/definitely/missing.log").unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn ground_truth_transcribes_rows() {
        let csv = "LineId,Content,EventTemplate\n1,a b,a <*>\n2,\"a c\",a <*>\n";
        let truth = parse_ground_truth(csv.as_bytes()).unwrap();
        assert_eq!(truth.len(), 2);
        assert_eq!(truth.template(1), Some("a <*>"));
        assert_eq!(truth.template(2), Some("a <*>"));
        assert_eq!(truth.content(2), Some("a c"));
    }

    #[test]
    fn ground_truth_duplicate_id_rejected() {
        let csv = "LineId,Content,EventTemplate\n5,x,x\n5,y,y\n";
        let err = parse_ground_truth(csv.as_bytes()).unwrap_err();
        assert!(err.contains("duplicate LineId 5"), "{err}");
    }

    #[test]
    fn ground_truth_missing_column_rejected() {
        let csv = "LineId,Content\n1,x\n";
        let err = parse_ground_truth(csv.as_bytes()).unwrap_err();
        assert!(err.contains("EventTemplate"));
    }

    #[test]
    fn ground_truth_bind_detects_mismatch() {
        let csv = "LineId,Content,EventTemplate\n1,a,a\n3,b,b\n";
        let truth = parse_ground_truth(csv.as_bytes()).unwrap();
        let log = LogFile::from_lines("x", ["a", "b"]);
        assert!(matches!(truth.bind(&log), Err(CorpusError::Mismatch(_))));
    }

    #[test]
    fn identical_lines_split_by_max_lines() {
        let log = LogFile::from_lines("x", vec!["same short line"; 100]);
        let cfg = SegmentConfig {
            max_lines: 50,
            ..Default::default()
        };
        let chunks = segment(&log, &cfg);
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].line_span, (1, 50));
        assert_eq!(chunks[1].line_span, (51, 100));
    }

    #[test]
    fn blank_line_in_tail_is_preferred_boundary() {
        let mut lines = vec!["x"; 20];
        lines[17] = "";
        let log = LogFile::from_lines("x", lines);
        let cfg = SegmentConfig {
            max_lines: 19,
            max_tokens: 2048,
        };
        let chunks = segment(&log, &cfg);
        assert_eq!(chunks[0].line_span, (1, 18));
        assert_eq!(chunks[1].line_span, (19, 20));
    }

    #[test]
    fn blank_line_too_early_is_ignored() {
        let mut lines = vec!["x"; 20];
        lines[5] = "";
        let log = LogFile::from_lines("x", lines);
        let cfg = SegmentConfig {
            max_lines: 10,
            max_tokens: 2048,
        };
        let chunks = segment(&log, &cfg);
        assert_eq!(chunks[0].line_span, (1, 10));
    }

    #[test]
    fn oversized_line_is_its_own_flagged_chunk() {
        let long = "y".repeat(64 * 4 + 1);
        let log = LogFile::from_lines("x", vec!["a".to_owned(), long, "b".to_owned()]);
        let cfg = SegmentConfig {
            max_tokens: 64,
            max_lines: 50,
        };
        let chunks = segment(&log, &cfg);
        assert_eq!(chunks.len(), 3);
        assert!(chunks[1].oversized);
        assert_eq!(chunks[1].line_span, (2, 2));
        assert!(!chunks[0].oversized && !chunks[2].oversized);
    }

    #[test]
    fn thousand_line_log_respects_token_budget() {
        let lines: Vec<String> = (0..1000)
            .map(|i| format!("{i:05} worker-{} processed {} records", i % 7, i * 31 % 997))
            .collect();
        let log = LogFile::from_lines("x", lines);
        let cfg = SegmentConfig {
            max_tokens: 2048,
            max_lines: 1000,
        };
        let chunks = segment(&log, &cfg);
        let mut next = 1;
        for c in &chunks {
            assert!(c.tokens() <= 2048);
            assert_eq!(c.line_span.0, next);
            next = c.line_span.1 + 1;
        }
        assert_eq!(next, 1001);
    }
}
