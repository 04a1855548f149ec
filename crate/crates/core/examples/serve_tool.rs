//! Start the SQL tool service on a free port and call it over HTTP.
//!
//! `cargo run --example serve_tool`

use tir_sql::demo::write_demo_databases;
use tir_sql::sandbox::{spawn_tool_server, HttpToolClient, Sandbox, SandboxClient, SandboxConfig};

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_demo_databases(dir.path()).expect("demo databases");
    let sandbox = Sandbox::new(SandboxConfig::new(dir.path())).expect("sandbox");

    let server = spawn_tool_server(sandbox, "127.0.0.1:0".parse().unwrap()).expect("bind");
    println!("serving on {}", server.base_url());

    let client = HttpToolClient::new(server.base_url()).expect("client");
    let tools = client.tools().expect("GET /tools");
    println!("tools: {}", serde_json::to_string(&tools).unwrap());
    println!("{:?}", client.execute("toxicology", "SELECT element, COUNT(*) FROM atom GROUP BY element"));
    println!("{:?}", client.execute("nowhere", "SELECT 1"));
    server.shutdown().expect("clean shutdown");
}
