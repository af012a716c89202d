//! Compiles a hand-written rule document and runs it over a few lines.

use schemacoder::corpus::LogFile;
use schemacoder::program::ParserProgram;

const RULES: &str = r#"{
  "version": 1,
  "rules": [
    {"id": "login", "pattern": "user (\\w+) logged in from (\\S+)", "template": "user <*> logged in from <*>"},
    {"id": "gc", "pattern": "GC pause (\\d+)ms", "template": "GC pause <*>ms", "priority": 5},
    {"id": "any", "pattern": "(.*)", "template": "<*>", "priority": 100}
  ]
}"#;

fn main() {
    let program = ParserProgram::deserialize(RULES).expect("valid rules");
    let log = LogFile::from_text(
        "demo",
        "user alice logged in from 10.0.0.1\nGC pause 12ms\nsomething else entirely\nGC pause 7ms\n",
    );
    let parsed = program.execute(&log);
    for id in log.ids() {
        println!(
            "{id}: {:<6} {:<30} {:?}",
            parsed.rule_id(id).unwrap_or("-"),
            parsed.template(id).unwrap_or("(unmatched)"),
            parsed.variables(id).unwrap_or(&[])
        );
    }
    println!();
    parsed.write_csv(std::io::stdout()).expect("stdout");
}
