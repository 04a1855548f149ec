use std::io;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{ExecError, ExecOutcome, QueryResult};

/// JSON with `", "` and `": "` separators, the layout the tool responses use.
struct SpacedFormatter;

impl serde_json::ser::Formatter for SpacedFormatter {
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            writer.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            writer.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        writer.write_all(b": ")
    }
}

pub fn to_json_spaced<T: Serialize + ?Sized>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SpacedFormatter);
    value.serialize(&mut ser).expect("in-memory JSON serialization");
    String::from_utf8(out).expect("serde_json emits UTF-8")
}

/// Column names made unique: repeats get `_2`, `_3`, ... suffixes.
fn unique_keys(columns: &[String]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::with_capacity(columns.len());
    for name in columns {
        let mut candidate = name.clone();
        let mut n = 1;
        while keys.contains(&candidate) {
            n += 1;
            candidate = format!("{name}_{n}");
        }
        keys.push(candidate);
    }
    keys
}

fn result_value(result: &QueryResult) -> Value {
    let keys = unique_keys(&result.columns);
    let data: Vec<Value> = result
        .rows
        .iter()
        .map(|row| {
            let mut obj = Map::new();
            for (key, cell) in keys.iter().zip(row) {
                obj.insert(key.clone(), cell.to_json());
            }
            Value::Object(obj)
        })
        .collect();
    let mut obj = Map::new();
    obj.insert("columns".into(), Value::from(result.columns.clone()));
    obj.insert("data".into(), Value::Array(data));
    Value::Object(obj)
}

fn error_value(err: &ExecError) -> Value {
    let mut obj = Map::new();
    obj.insert("error".into(), Value::String(err.to_string()));
    Value::Object(obj)
}

/// The JSON payload alone, as served over HTTP.
pub fn render_payload(outcome: &ExecOutcome) -> String {
    let value = match outcome {
        Ok(r) => result_value(r),
        Err(e) => error_value(e),
    };
    to_json_spaced(&value)
}

/// Tool feedback text shown to the model.
pub fn render_tool_response(outcome: &ExecOutcome) -> String {
    format!("The result is: {}", render_payload(outcome))
}
