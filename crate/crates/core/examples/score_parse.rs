//! Scores a parse against ground truth and lists what went wrong.

use schemacoder::corpus::{GroundTruth, LogFile};
use schemacoder::metrics::evaluate;
use schemacoder::program::ParserProgram;

fn main() {
    let rows = [
        ("open a.txt", "open <*>"),
        ("open b.txt", "open <*>"),
        ("close a.txt", "close <*>"),
        ("close b.txt", "close <*>"),
        ("sync", "sync"),
    ];
    let mut truth = GroundTruth::new();
    for (i, (content, template)) in rows.iter().enumerate() {
        truth.insert(i as u32 + 1, *content, *template).unwrap();
    }
    let log = LogFile::from_lines("demo", rows.iter().map(|r| r.0));

    // "close" lines get the wrong template; "sync" is never matched
    let program = ParserProgram::deserialize(
        r#"{"version":1,"rules":[
            {"pattern":"open (\\S+)","template":"open <*>"},
            {"pattern":"close a\\.txt","template":"close a.txt"},
            {"pattern":"close (\\S+)","template":"close <*>"}
        ]}"#,
    )
    .unwrap();
    let report = evaluate(&program.execute(&log), &truth).unwrap();
    println!("GA PA FGA FTA LOSS: {}", report.summary_line());
    println!("misgrouped:        {:?}", report.misgrouped_lines);
    println!("template mismatch: {:?}", report.template_mismatch_lines);
    println!("unmatched:         {:?}", report.unmatched_lines);
}
