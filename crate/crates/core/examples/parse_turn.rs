//! Parse assistant turns into tagged blocks and check their format.
//!
//! `cargo run --example parse_turn`

use tir_sql::protocol::{extract_answer_sql, extract_tool_call, parse_assistant_turn, SegmentKind, SQL_TOOL_NAME};

fn main() {
    let turns = [
        "<think>Count the rows first.</think>\n<tool_call>\n{\"name\": \"sql-execute_sql_query\", \"arguments\": {\"db_name\": \"toy\", \"sql\": \"SELECT COUNT(*) FROM t\"}}\n</tool_call>",
        "<think>25 rows.</think>\n<answer>\n```sql\nSELECT COUNT(*) FROM t\n```\n</answer>",
        "<think>Both at once.</think><tool_call>{}</tool_call><answer>SELECT 1</answer>",
        "I forgot the tags.",
    ];
    for text in turns {
        let p = parse_assistant_turn(text);
        println!("format_ok={} blocks={:?}", p.format_ok, p.blocks().map(|s| s.kind).collect::<Vec<_>>());
        for v in &p.violations {
            println!("  violation: {v}");
        }
        if let Some(seg) = p.first(SegmentKind::ToolCall) {
            println!("  tool call: {:?}", extract_tool_call(seg, SQL_TOOL_NAME));
        }
        if let Some(seg) = p.first(SegmentKind::Answer) {
            println!("  answer: {:?}", extract_answer_sql(seg));
        }
    }
}
