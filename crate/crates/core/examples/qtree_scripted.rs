//! Runs the question tree against the scripted fixture backend and prints
//! each branch with the rules it produced.

use std::path::Path;
use std::sync::Arc;

use schemacoder::corpus::{load_log, segment, SegmentConfig};
use schemacoder::llm::{BackendProfile, LlmClient, ScriptedBackend};
use schemacoder::qtree::{run_qtree, QTreeConfig};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/e2e");
    let log = load_log(dir.join("app.log")).unwrap();
    let chunks = segment(&log, &SegmentConfig::default());
    let backend = ScriptedBackend::from_script_file(dir.join("script.json")).unwrap();
    let client = LlmClient::new(Arc::new(backend), BackendProfile::default());
    let cfg = QTreeConfig {
        breadth: 2,
        ..Default::default()
    };

    let outcome = run_qtree(&client, &chunks, "Application events.", &cfg).expect("scripted replies");
    for (t, tree) in outcome.trees.iter().enumerate() {
        for branch in &tree.branches {
            println!("tree {t}: {}", branch.question);
            for s in &branch.segments {
                println!("  selected {:?}", s.text);
            }
            for r in branch.fragment.rules() {
                println!("  rule {} => {}", r.pattern, r.template);
            }
        }
    }
    println!("\nmerged program ({} rules):\n{}", outcome.program.len(), outcome.program.serialize());
}
