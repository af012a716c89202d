//! Runs the whole pipeline on the scripted fixture: question tree, evolution
//! and residual boosting, then prints the loss history.

use std::path::Path;
use std::sync::Arc;

use schemacoder::boosting::{run_schemacoder, PipelineConfig};
use schemacoder::corpus::{load_ground_truth, load_log};
use schemacoder::llm::{BackendProfile, LlmClient, ScriptedBackend};
use schemacoder::qtree::QTreeConfig;

fn main() {
    env_logger::init();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/e2e");
    let log = load_log(dir.join("app.log")).unwrap();
    let truth = load_ground_truth(dir.join("app.log_structured.csv")).unwrap();
    let background = std::fs::read_to_string(dir.join("background.txt")).unwrap_or_default();
    let backend = ScriptedBackend::from_script_file(dir.join("script.json")).unwrap();
    let client = LlmClient::new(Arc::new(backend), BackendProfile::default());
    let cfg = PipelineConfig {
        boost_period: 2,
        seed: 7,
        qtree: QTreeConfig {
            breadth: 2,
            ..Default::default()
        },
        ..Default::default()
    };

    let out = run_schemacoder(&client, &log, &truth, &background, &cfg, &mut Vec::new()).expect("pipeline");
    println!("iteration phase  loss");
    for h in &out.history {
        println!("{:>9} {:<6} {:.4}", h.iteration, h.phase, h.loss);
    }
    for b in &out.boosts {
        println!(
            "boost {}: {} residual lines, {} fragment rules, {} ({}), {:.4} -> {:.4}",
            b.iteration, b.residual_lines, b.fragment_rules, b.variant, b.accepted, b.loss_before, b.loss_after
        );
    }
    println!("final: {}", out.report.summary_line());
}
