//! Run read-only queries against the demo databases.
//!
//! `cargo run --example sandbox_query -- [db] [sql]`

use tir_sql::demo::write_demo_databases;
use tir_sql::sandbox::{render_tool_response, Sandbox, SandboxClient, SandboxConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let db = args.next().unwrap_or_else(|| "toy".into());
    let sql = args.next().unwrap_or_else(|| "SELECT a, a * a AS sq FROM t".into());

    let dir = tempfile::tempdir().expect("tempdir");
    write_demo_databases(dir.path()).expect("demo databases");
    let sandbox = Sandbox::new(SandboxConfig::new(dir.path()).with_row_limit(5)).expect("sandbox");

    let outcome = sandbox.execute(&db, &sql);
    println!("{}", render_tool_response(&outcome));
    if let Ok(r) = &outcome {
        println!("{} rows shown, truncated: {}", r.rows.len(), r.truncated);
    }
    println!("{}", render_tool_response(&sandbox.execute(&db, "DROP TABLE t")));
}
