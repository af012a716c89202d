//! Writes the scripted end-to-end fixture: a 200-line log with five
//! templates, its ground truth, a reply script and a run config.
//!
//! ```text
//! cargo run --example generate_fixture -- crates/core/fixtures/e2e
//! ```

use std::fs;
use std::path::PathBuf;

use serde_json::json;

const CYCLE: [usize; 10] = [1, 3, 2, 4, 5, 3, 1, 4, 2, 3];

fn line(kind: usize, n: usize) -> (String, &'static str) {
    match kind {
        1 => (format!("session s{n} opened for user u{}", n % 7), "session <*> opened for user <*>"),
        2 => (format!("session s{n} closed"), "session <*> closed"),
        3 => (format!("job {n} finished in {} ms", (n * 37) % 1000), "job <*> finished in <*> ms"),
        4 => (format!("disk sda{} usage at {} percent", n % 4, (n * 13) % 100), "disk <*> usage at <*> percent"),
        _ => ("heartbeat ok".to_owned(), "heartbeat ok"),
    }
}

fn rules(pattern: &str, template: &str) -> String {
    json!({"version": 0, "rules": [{"pattern": pattern, "template": template}]}).to_string()
}

fn explore(questions: [&str; 2]) -> serde_json::Value {
    json!({
        "purpose": "explore",
        "reply": format!("1. {}\n2. {}", questions[0], questions[1]),
        "max_uses": 1,
    })
}

fn select(question: &str, line_regex: &str) -> serde_json::Value {
    json!({
        "purpose": "select",
        "trigger": format!("(?s)Question:\\n{}\\n.*?\\n({})\\n", regex::escape(question), line_regex),
        "reply": "{\"segments\":[{\"text\":\"{{1}}\"}]}",
    })
}

fn pattern(line_regex: &str, pattern: &str, template: &str) -> serde_json::Value {
    json!({
        "purpose": "pattern",
        "trigger": format!("Selected log lines:\\n(?:.*\\n)*?{line_regex}\\n"),
        "reply": rules(pattern, template),
    })
}

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/fixtures/e2e".into()));
    fs::create_dir_all(&dir)?;

    let mut log = String::new();
    let mut csv = csv::Writer::from_path(dir.join("app.log_structured.csv"))?;
    csv.write_record(["LineId", "Content", "EventTemplate"])?;
    for i in 0..200 {
        let (content, template) = line(CYCLE[i % CYCLE.len()], i + 1);
        log.push_str(&content);
        log.push('\n');
        csv.write_record([(i + 1).to_string().as_str(), &content, template])?;
    }
    csv.flush()?;
    fs::write(dir.join("app.log"), log)?;

    let q = [
        ("How are new sessions logged?", r"session s\d+ opened for user u\d+"),
        ("What do liveness messages look like?", r"heartbeat ok"),
        ("How are session endings logged?", r"session s\d+ closed"),
        ("Which lines report closed sessions?", r"session s\d+ closed"),
        ("How are job completions reported?", r"job \d+ finished in \d+ ms"),
        ("Which lines carry durations?", r"job \d+ finished in \d+ ms"),
        ("How is disk usage reported?", r"disk sda\d usage at \d+ percent"),
        ("Which lines carry percentages?", r"disk sda\d usage at \d+ percent"),
    ];
    let mut script_rules = vec![
        explore([q[0].0, q[1].0]),
        explore([q[2].0, q[3].0]),
        explore([q[4].0, q[5].0]),
        explore([q[6].0, q[7].0]),
    ];
    script_rules.extend(q.iter().map(|(question, re)| select(question, re)));
    script_rules.extend([
        pattern(q[0].1, r"session (\S+) opened for user (\S+)", "session <*> opened for user <*>"),
        pattern(q[1].1, r"heartbeat ok", "heartbeat ok"),
        pattern(q[2].1, r"session (\S+) closed", "session <*> closed"),
        pattern(q[4].1, r"job (\d+) finished in (\d+) ms", "job <*> finished in <*> ms"),
        pattern(q[6].1, r"disk (\S+) usage at (\d+) percent", "disk <*> usage at <*> percent"),
    ]);
    let script = json!({"replies": {}, "rules": script_rules});
    fs::write(dir.join("script.json"), serde_json::to_string_pretty(&script)? + "\n")?;

    fs::write(
        dir.join("background.txt"),
        "The log comes from a small job scheduler. Each line is one event without a timestamp.\n",
    )?;
    fs::write(
        dir.join("config.toml"),
        r#"log = "app.log"
truth = "app.log_structured.csv"
background = "background.txt"
output_dir = "out"

[backend]
kind = "scripted"
script = "script.json"

[backend.retry]
base_ms = 0
max_attempts = 1

[pipeline]
max_boosts = 3
boost_period = 2
seed = 7

[pipeline.qtree]
breadth = 2

[pipeline.optimizer]
islands = 2
"#,
    )?;
    println!("wrote fixture to {}", dir.display());
    Ok(())
}
