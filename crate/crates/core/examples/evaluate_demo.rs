//! Greedy pass@1 evaluation of the oracle and a constant policy on the demo set.
//!
//! `cargo run --example evaluate_demo`

use tir_sql::bench::{evaluate, filter_dataset, parse_dataset, render_markdown, EvalConfig};
use tir_sql::demo::{write_demo_databases, DEMO_DATASET_JSON};
use tir_sql::rollout::mock::{ConstantAnswerPolicy, OraclePolicy};
use tir_sql::sandbox::{Sandbox, SandboxConfig};

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_demo_databases(dir.path()).expect("demo databases");
    let sandbox = Sandbox::new(SandboxConfig::new(dir.path())).expect("sandbox");

    let samples = parse_dataset(DEMO_DATASET_JSON).expect("dataset");
    let filtered = filter_dataset(&samples, &sandbox);
    for d in &filtered.dropped {
        println!("dropped sample {}: {:?}", d.sample.sample_id, d.reason);
    }

    let mut oracle = OraclePolicy::new();
    for s in &filtered.kept {
        oracle.insert(s.question.clone(), s.db_name.clone(), s.gold_sql.clone());
    }
    let cfg = EvalConfig::default();
    let report = evaluate(&filtered.kept, dir.path(), &oracle, &sandbox, &cfg);
    print!("{}", render_markdown(&report));

    let constant = ConstantAnswerPolicy::new("SELECT COUNT(*) FROM t");
    let report = evaluate(&filtered.kept, dir.path(), &constant, &sandbox, &cfg);
    print!("{}", render_markdown(&report));
}
