mod common;

use common::Demo;
use tir_sql::protocol::{extract_tool_call, parse_assistant_turn, SegmentKind, SQL_TOOL_NAME};
use tir_sql::rollout::mock::{answer_turn, tool_call_turn, ScriptedPolicy};
use tir_sql::rollout::{run_rollout, Prompt, RolloutConfig, Termination, ToolOutcome};
use tir_sql::sandbox::{spawn_tool_server, Cell, ExecErrorKind, HttpToolClient, SandboxClient, TOOL_SCHEMA_JSON};

fn server(demo: &Demo) -> (tir_sql::sandbox::ToolServerHandle, HttpToolClient) {
    let handle = spawn_tool_server(demo.sandbox(), "127.0.0.1:0".parse().unwrap()).expect("server starts");
    let client = HttpToolClient::new(handle.base_url()).unwrap();
    (handle, client)
}

#[test]
fn lists_the_tool_schema() {
    let demo = Demo::new();
    let (handle, client) = server(&demo);
    let tools = client.tools().unwrap();
    let expected: serde_json::Value = serde_json::from_str(TOOL_SCHEMA_JSON).unwrap();
    assert_eq!(tools, expected);
    handle.shutdown().unwrap();
}

#[test]
fn remote_results_match_local_ones() {
    let demo = Demo::new();
    let local = demo.sandbox();
    let (handle, client) = server(&demo);
    for (db, sql) in [
        ("toy", "SELECT a, a * 2 AS b FROM t WHERE a < 4"),
        ("toy", "SELECT COUNT(*) FROM t"),
        ("toxicology", "SELECT atom_id, element FROM atom ORDER BY atom_id"),
        ("california_schools", "SELECT CDSCode, Virtual FROM schools"),
    ] {
        let remote = client.execute(db, sql).unwrap();
        let here = local.execute(db, sql).unwrap();
        assert_eq!(remote.columns, here.columns, "{sql}");
        assert_eq!(remote.rows.len(), here.rows.len(), "{sql}");
        for (r, h) in remote.rows.iter().zip(&here.rows) {
            for (a, b) in r.iter().zip(h) {
                match (a, b) {
                    (Cell::Real(x), Cell::Integer(y)) | (Cell::Integer(y), Cell::Real(x)) => assert_eq!(*x, *y as f64),
                    _ => assert_eq!(a, b),
                }
            }
        }
    }
    handle.shutdown().unwrap();
}

#[test]
fn errors_cross_the_wire() {
    let demo = Demo::new();
    let (handle, client) = server(&demo);
    let e = client.execute("nowhere", "SELECT 1").unwrap_err();
    assert_eq!(e.kind, ExecErrorKind::UnknownDatabase);
    let e = client.execute("toy", "DELETE FROM t").unwrap_err();
    assert_eq!(e.kind, ExecErrorKind::Forbidden);
    let e = client.execute("toy", "SELECT * FROM missing").unwrap_err();
    assert_eq!(e.kind, ExecErrorKind::SqlError);
    handle.shutdown().unwrap();
}

#[test]
fn bad_request_is_400() {
    let demo = Demo::new();
    let (handle, _) = server(&demo);
    let resp = reqwest::blocking::Client::new()
        .post(format!("{}/tools/execute_sql_query", handle.base_url()))
        .body("{\"sql\": 1}")
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    handle.shutdown().unwrap();
}

#[test]
fn dead_service_reads_as_tool_error() {
    let demo = Demo::new();
    let (handle, client) = server(&demo);
    handle.shutdown().unwrap();
    assert!(client.execute("toy", "SELECT 1").is_err());
}

#[test]
fn rollout_over_http() {
    let demo = Demo::new();
    let (handle, client) = server(&demo);
    let turns = vec![tool_call_turn("toy", "SELECT MAX(a) FROM t"), answer_turn("SELECT MAX(a) FROM t")];
    let prompt = Prompt::new("http", "system", "user");
    let traj = run_rollout(&prompt, &ScriptedPolicy::new(turns.clone()), &client, &RolloutConfig::eval());
    assert_eq!(traj.termination, Termination::Answered);
    assert_eq!(traj.tool_records.len(), 1);
    match &traj.tool_records[0].outcome {
        ToolOutcome::Ok(r) => assert_eq!(r.rows, vec![vec![Cell::Integer(25)]]),
        other => panic!("unexpected outcome {other:?}"),
    }
    let call = parse_assistant_turn(&turns[0]);
    let inv = extract_tool_call(call.first(SegmentKind::ToolCall).unwrap(), SQL_TOOL_NAME).unwrap();
    assert_eq!(inv.sql, "SELECT MAX(a) FROM t");

    let local = run_rollout(&prompt, &ScriptedPolicy::new(turns), &demo.sandbox(), &RolloutConfig::eval());
    assert_eq!(local.messages, traj.messages);
    handle.shutdown().unwrap();
}
