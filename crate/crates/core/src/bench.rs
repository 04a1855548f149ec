//! Dataset loading, gold-query filtering, prompt construction and pass@1
//! evaluation.
//!
//! Dataset records follow the BIRD/Spider JSON layout:
//!
//! | field | maps to |
//! |---|---|
//! | `question_id` (else the record index) | `sample_id` |
//! | `db_id` | `db_name` |
//! | `question` | `question` |
//! | `evidence` (optional) | `external_knowledge` |
//! | `SQL` or `query` | `gold_sql` |
//! | `difficulty` (optional) | `difficulty` |
//!
//! Any other field is kept in `extra`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::reward::{total_reward, RewardBreakdown, RewardConfig, RewardError};
use crate::rollout::{run_rollout, PolicyEndpoint, Prompt, RolloutConfig, Termination};
use crate::sandbox::{ExecErrorKind, SandboxClient};

/// The `<tools>` listing embedded in the system prompt, kept byte-for-byte.
pub const TOOLS_BLOCK: &str = include_str!("../data/tools_block.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub sample_id: String,
    pub db_name: String,
    pub question: String,
    #[serde(default)]
    pub external_knowledge: String,
    pub gold_sql: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub extra: Map<String, Value>,
}

impl TaskSample {
    /// Back to the benchmark record layout.
    pub fn to_record(&self) -> Value {
        let mut m = Map::new();
        m.insert("question_id".into(), Value::String(self.sample_id.clone()));
        m.insert("db_id".into(), Value::String(self.db_name.clone()));
        m.insert("question".into(), Value::String(self.question.clone()));
        m.insert("evidence".into(), Value::String(self.external_knowledge.clone()));
        m.insert("SQL".into(), Value::String(self.gold_sql.clone()));
        if let Some(d) = &self.difficulty {
            m.insert("difficulty".into(), Value::String(d.clone()));
        }
        for (k, v) in &self.extra {
            m.insert(k.clone(), v.clone());
        }
        Value::Object(m)
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset is not valid JSON: {0}")]
    Json(String),
    #[error("dataset records are missing fields: {}", format_missing(.0))]
    SchemaMismatch(Vec<(usize, Vec<&'static str>)>),
}

fn format_missing(missing: &[(usize, Vec<&'static str>)]) -> String {
    missing.iter().map(|(i, f)| format!("record {i}: {}", f.join(", "))).collect::<Vec<_>>().join("; ")
}

pub fn load_dataset(path: &Path) -> Result<Vec<TaskSample>, DatasetError> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

/// Accepts a JSON array or one JSON object per line.
pub fn parse_dataset(text: &str) -> Result<Vec<TaskSample>, DatasetError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    let records: Vec<Value> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| DatasetError::Json(e.to_string()))?
    } else {
        trimmed
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| DatasetError::Json(format!("line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?
    };

    let mut samples = Vec::with_capacity(records.len());
    let mut missing = Vec::new();
    for (i, record) in records.into_iter().enumerate() {
        match sample_from_record(i, record) {
            Ok(s) => samples.push(s),
            Err(fields) => missing.push((i, fields)),
        }
    }
    if missing.is_empty() {
        Ok(samples)
    } else {
        Err(DatasetError::SchemaMismatch(missing))
    }
}

fn sample_from_record(index: usize, record: Value) -> Result<TaskSample, Vec<&'static str>> {
    let Value::Object(mut m) = record else {
        return Err(vec!["<object>"]);
    };
    let mut take_str = |keys: &[&str]| -> Option<String> {
        for k in keys {
            if let Some(v) = m.remove(*k) {
                return match v {
                    Value::String(s) => Some(s),
                    Value::Null => None,
                    other => Some(other.to_string()),
                };
            }
        }
        None
    };
    let question = take_str(&["question"]);
    let db_name = take_str(&["db_id"]);
    let gold_sql = take_str(&["SQL", "query"]).filter(|s| !s.trim().is_empty());
    let external_knowledge = take_str(&["evidence"]).unwrap_or_default();
    let sample_id = take_str(&["question_id"]).unwrap_or_else(|| index.to_string());
    let difficulty = take_str(&["difficulty"]);

    let mut absent = Vec::new();
    if question.is_none() {
        absent.push("question");
    }
    if db_name.is_none() {
        absent.push("db_id");
    }
    if gold_sql.is_none() {
        absent.push("SQL");
    }
    if !absent.is_empty() {
        return Err(absent);
    }
    Ok(TaskSample {
        sample_id,
        db_name: db_name.unwrap(),
        question: question.unwrap(),
        external_knowledge,
        gold_sql: gold_sql.unwrap(),
        difficulty,
        extra: m,
    })
}

/// Write samples back out as a JSON array of benchmark records.
pub fn write_dataset(path: &Path, samples: &[TaskSample]) -> std::io::Result<()> {
    let records: Vec<Value> = samples.iter().map(TaskSample::to_record).collect();
    let mut text = serde_json::to_string_pretty(&records).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(path, text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "message")]
pub enum DropReason {
    EmptyResult,
    GoldError(String),
    Timeout,
    UnknownDatabase,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::EmptyResult => f.write_str("EmptyResult"),
            DropReason::GoldError(m) => write!(f, "GoldError: {m}"),
            DropReason::Timeout => f.write_str("Timeout"),
            DropReason::UnknownDatabase => f.write_str("UnknownDatabase"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedSample {
    pub sample: TaskSample,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilteredDataset {
    pub kept: Vec<TaskSample>,
    pub dropped: Vec<DroppedSample>,
}

/// Keep samples whose gold query runs and returns at least one row.
pub fn filter_dataset(samples: &[TaskSample], sandbox: &dyn SandboxClient) -> FilteredDataset {
    let verdicts: Vec<Option<DropReason>> = samples
        .par_iter()
        .map(|s| match sandbox.execute(&s.db_name, &s.gold_sql) {
            Ok(r) if r.rows.is_empty() => Some(DropReason::EmptyResult),
            Ok(_) => None,
            Err(e) => Some(match e.kind {
                ExecErrorKind::Timeout => DropReason::Timeout,
                ExecErrorKind::UnknownDatabase => DropReason::UnknownDatabase,
                ExecErrorKind::SqlError | ExecErrorKind::Forbidden => DropReason::GoldError(e.message),
            }),
        })
        .collect();
    let mut out = FilteredDataset::default();
    for (sample, verdict) in samples.iter().zip(verdicts) {
        match verdict {
            None => out.kept.push(sample.clone()),
            Some(reason) => out.dropped.push(DroppedSample { sample: sample.clone(), reason }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub decl_type: String,
    pub primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from: String,
    pub table: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnSchema>,
    pub foreign_keys: Vec<ForeignKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDescription {
    pub tables: Vec<TableSchema>,
    pub rendered: String,
}

fn quote_ident(name: &str) -> String {
    let plain = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if plain {
        name.to_string()
    } else {
        format!("\"{}\"", name.replace('"', "\"\""))
    }
}

/// Read the catalog of a database file (opened read-only).
pub fn describe_schema(db_path: &Path) -> rusqlite::Result<SchemaDescription> {
    let conn = Connection::open_with_flags(db_path, OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX)?;
    let names: Vec<String> = conn
        .prepare("SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid")?
        .query_map([], |r| r.get(0))?
        .collect::<Result<_, _>>()?;

    let mut tables = Vec::with_capacity(names.len());
    for name in names {
        let columns = conn
            .prepare("SELECT name, type, pk FROM pragma_table_info(?1) ORDER BY cid")?
            .query_map([&name], |r| {
                Ok(ColumnSchema { name: r.get(0)?, decl_type: r.get(1)?, primary_key: r.get::<_, i64>(2)? > 0 })
            })?
            .collect::<Result<Vec<_>, _>>()?;
        let foreign_keys = conn
            .prepare("SELECT \"from\", \"table\", COALESCE(\"to\", '') FROM pragma_foreign_key_list(?1) ORDER BY id, seq")?
            .query_map([&name], |r| Ok(ForeignKey { from: r.get(0)?, table: r.get(1)?, to: r.get(2)? }))?
            .collect::<Result<Vec<_>, _>>()?;
        tables.push(TableSchema { name, columns, foreign_keys });
    }
    let rendered = render_schema(&tables);
    Ok(SchemaDescription { tables, rendered })
}

/// `CREATE TABLE` text per table followed by one comment line per foreign key.
pub fn render_schema(tables: &[TableSchema]) -> String {
    let mut out = String::new();
    for t in tables {
        out.push_str(&format!("CREATE TABLE {} (\n", quote_ident(&t.name)));
        let cols: Vec<String> = t
            .columns
            .iter()
            .map(|c| {
                let mut line = format!("  {}", quote_ident(&c.name));
                if !c.decl_type.is_empty() {
                    line.push(' ');
                    line.push_str(&c.decl_type);
                }
                if c.primary_key {
                    line.push_str(" PRIMARY KEY");
                }
                line
            })
            .collect();
        out.push_str(&cols.join(",\n"));
        out.push_str("\n);\n");
        for fk in &t.foreign_keys {
            out.push_str(&format!("-- {}.{} references {}.{}\n", t.name, fk.from, fk.table, fk.to));
        }
    }
    out
}

/// Assemble the system prompt around a `<tools>` block.
pub fn system_prompt(tools_block: &str) -> String {
    format!(
        "##Tools\n\n\
         You may call one or more functions to assist with the user query.\n\n\
         You are provided with function signatures within <tools></tools> XML tags:\n\
         {tools_block}\n\n\
         For each function call, return a JSON object with function name and arguments within <tool_call></tool_call> XML tags:\n\
         <tool_call>\n  {{\"name\": <function-name>, \"arguments\": <args-json-object>}}\n</tool_call>"
    )
}

const USER_TEMPLATE: &str = "You are a helpful SQL expert assistant. You should first think about how to write the SQL query by analyzing the question, database schema, and external knowledge, then validate your SQL with the tool until it is correct. Finally, you provide the final SQL query in <answer> </answer>.

Task Configuration
Database Engine: SQLite
Database: {db_id}
Database Schema: {schema}
User Question: {question}

Requirements
1. Precision: Make sure you only output the information that is asked in the question. If the question asks for a specific column, make sure to only include that column in the SELECT clause, nothing more.
2. Completeness: The generated query should return all of the information asked in the question without any missing or extra information.
3. Correctness: Before generating the final SQL query, please think through the steps of how to write the query. Validate your SQL through tool testing.

Output Format:
Important: Use EITHER thinking + tool calls OR thinking + final answer. Do not mix the structures.

Option A (when validation needed):
<think> Your analysis... </think>
[Tool calls for validation]

Option B (final answer):
<think> Your final analysis... </think>
<answer> 
```sql
YOUR_SQL_QUERY
</answer>";

/// Knowledge and question joined by one space; the question alone when
/// there is no knowledge.
pub fn render_question(external_knowledge: &str, question: &str) -> String {
    let k = external_knowledge.trim();
    if k.is_empty() {
        question.to_string()
    } else {
        format!("{k} {question}")
    }
}

/// `(system, user)` for one sample. Pure: same inputs, same bytes.
pub fn build_prompt(sample: &TaskSample, schema: &SchemaDescription, tools_block: &str) -> (String, String) {
    let user = USER_TEMPLATE
        .replacen("{db_id}", &sample.db_name, 1)
        .replacen("{question}", &render_question(&sample.external_knowledge, &sample.question), 1)
        .replacen("{schema}", schema.rendered.trim_end(), 1);
    (system_prompt(tools_block), user)
}

/// Builds prompts for samples, describing each database once.
#[derive(Debug, Clone)]
pub struct PromptBuilder {
    db_root: PathBuf,
    tools_block: String,
    schemas: BTreeMap<String, SchemaDescription>,
}

impl PromptBuilder {
    pub fn new(db_root: impl Into<PathBuf>) -> Self {
        PromptBuilder { db_root: db_root.into(), tools_block: TOOLS_BLOCK.to_string(), schemas: BTreeMap::new() }
    }

    pub fn schema(&mut self, db_name: &str) -> Result<&SchemaDescription, String> {
        if !self.schemas.contains_key(db_name) {
            let path = self.db_root.join(format!("{db_name}.sqlite"));
            if db_name.contains(['/', '\\']) || !path.is_file() {
                return Err(format!("unknown database `{db_name}`"));
            }
            let schema = describe_schema(&path).map_err(|e| format!("cannot read schema of `{db_name}`: {e}"))?;
            self.schemas.insert(db_name.to_string(), schema);
        }
        Ok(&self.schemas[db_name])
    }

    pub fn prompt(&mut self, sample: &TaskSample) -> Result<Prompt, String> {
        let tools = self.tools_block.clone();
        let schema = self.schema(&sample.db_name)?;
        let (system, user) = build_prompt(sample, schema, &tools);
        Ok(Prompt::new(sample.sample_id.clone(), system, user))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rollout: RolloutConfig,
    pub reward: RewardConfig,
    /// Worker threads for per-sample rollouts; 0 uses all cores.
    pub parallelism: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { rollout: RolloutConfig::eval(), reward: RewardConfig::default(), parallelism: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub sample_id: String,
    pub db_name: String,
    pub correct: bool,
    pub predicted_sql: Option<String>,
    pub reward: Option<RewardBreakdown>,
    pub turns_used: usize,
    pub tool_calls: usize,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub paradigm: String,
    pub n_samples: usize,
    pub n_correct: usize,
    pub ex_percent: f64,
    pub verdicts: Vec<SampleVerdict>,
    /// SHA-256 over the effective config and the sample ids.
    pub fingerprint: String,
    pub config: Value,
}

impl EvalReport {
    pub fn policy_errors(&self) -> usize {
        self.verdicts.iter().filter(|v| v.termination == Some(Termination::PolicyError)).count()
    }
}

pub fn fingerprint(config: &Value, samples: &[TaskSample]) -> String {
    let mut h = Sha256::new();
    h.update(config.to_string().as_bytes());
    for s in samples {
        h.update([0u8]);
        h.update(s.sample_id.as_bytes());
        h.update([0u8]);
        h.update(s.gold_sql.as_bytes());
    }
    hex::encode(h.finalize())
}

fn evaluate_one(
    sample: &TaskSample,
    prompt: Result<Prompt, String>,
    policy: &dyn PolicyEndpoint,
    sandbox: &dyn SandboxClient,
    cfg: &EvalConfig,
) -> SampleVerdict {
    let mut verdict = SampleVerdict {
        sample_id: sample.sample_id.clone(),
        db_name: sample.db_name.clone(),
        correct: false,
        predicted_sql: None,
        reward: None,
        turns_used: 0,
        tool_calls: 0,
        termination: None,
        error: None,
    };
    let prompt = match prompt {
        Ok(p) => p,
        Err(e) => {
            verdict.error = Some(e);
            return verdict;
        }
    };
    let traj = run_rollout(&prompt, policy, sandbox, &cfg.rollout);
    verdict.turns_used = traj.turns_used;
    verdict.tool_calls = traj.tool_records.len();
    verdict.termination = Some(traj.termination);
    verdict.predicted_sql = crate::reward::final_answer_sql(&traj);
    if let Some(e) = &traj.policy_error {
        verdict.error = Some(format!("policy error: {e}"));
    }
    match total_reward(&traj, &sample.db_name, &sample.gold_sql, sandbox, &cfg.reward) {
        Ok(b) => {
            verdict.correct = b.correct;
            verdict.reward = Some(b);
        }
        Err(RewardError::GoldExecutionFailed(e)) => {
            verdict.error.get_or_insert(format!("gold query failed: {e}"));
        }
    }
    verdict
}

/// One greedy rollout per sample; correctness is the result-match check.
pub fn evaluate(
    samples: &[TaskSample],
    db_root: &Path,
    policy: &dyn PolicyEndpoint,
    sandbox: &dyn SandboxClient,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut builder = PromptBuilder::new(db_root);
    let prompts: Vec<Result<Prompt, String>> = samples.iter().map(|s| builder.prompt(s)).collect();
    let run = || -> Vec<SampleVerdict> {
        samples
            .par_iter()
            .zip(prompts.into_par_iter())
            .map(|(s, p)| evaluate_one(s, p, policy, sandbox, cfg))
            .collect()
    };
    let verdicts = match rayon::ThreadPoolBuilder::new().num_threads(cfg.parallelism).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    let config = serde_json::to_value(cfg).expect("config serializes");
    report_from_verdicts(verdicts, fingerprint(&config, samples), config)
}

pub fn report_from_verdicts(verdicts: Vec<SampleVerdict>, fingerprint: String, config: Value) -> EvalReport {
    let n_samples = verdicts.len();
    let n_correct = verdicts.iter().filter(|v| v.correct).count();
    let ex_percent = if n_samples == 0 { 0.0 } else { 100.0 * n_correct as f64 / n_samples as f64 };
    EvalReport {
        paradigm: "MTIR (pass@1)".into(),
        n_samples,
        n_correct,
        ex_percent,
        verdicts,
        fingerprint,
        config,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

pub fn render_markdown(report: &EvalReport) -> String {
    format!(
        "| Paradigm | Samples | Correct | EX (%) |\n|---|---:|---:|---:|\n| {} | {} | {} | {:.2} |\n",
        report.paradigm, report.n_samples, report.n_correct, report.ex_percent
    )
}

pub fn emit_report(report: &EvalReport, format: ReportFormat, path: &Path) -> std::io::Result<()> {
    let text = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).map_err(std::io::Error::other)?;
            s.push('\n');
            s
        }
        ReportFormat::Markdown => render_markdown(report),
    };
    std::fs::write(path, text)
}
