//! Sandboxed SQLite execution.
//!
//! Every call opens a fresh connection to `<db_root>/<db_name>.sqlite`,
//! read-only unless configured otherwise. Statements that would modify the
//! database are rejected up front, long-running statements are interrupted at
//! the configured deadline, and results are capped at `row_limit` rows.

mod render;
mod service;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use render::{render_payload, render_tool_response, to_json_spaced};
pub use service::{router, serve_tool, spawn_tool_server, HttpToolClient, ToolServerHandle, TOOL_SCHEMA_JSON};

/// Default number of rows fed back to the model.
pub const DEFAULT_ROW_LIMIT: usize = 10;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// A single result cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::Value;
        match self {
            Cell::Null => Value::Null,
            Cell::Integer(i) => Value::from(*i),
            Cell::Real(f) => serde_json::Number::from_f64(*f).map(Value::Number).unwrap_or(Value::Null),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Blob(b) => Value::String(hex::encode(b)),
        }
    }

    /// Inverse of [`Cell::to_json`]; blobs come back as their hex text.
    pub fn from_json(value: &serde_json::Value) -> Cell {
        use serde_json::Value;
        match value {
            Value::Null => Cell::Null,
            Value::Bool(b) => Cell::Integer(*b as i64),
            Value::Number(n) => match n.as_i64() {
                Some(i) => Cell::Integer(i),
                None => Cell::Real(n.as_f64().unwrap_or(f64::NAN)),
            },
            Value::String(s) => Cell::Text(s.clone()),
            other => Cell::Text(other.to_string()),
        }
    }
}

impl Serialize for Cell {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(deserializer)?;
        Ok(Cell::from_json(&v))
    }
}

/// Columns plus at most `row_limit` rows.
///
/// Equality ignores `elapsed_ms`, and `elapsed_ms` is not serialized, so
/// persisted trajectories are reproducible byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub truncated: bool,
    /// `None` when executed without a cap.
    pub row_limit: Option<usize>,
    #[serde(skip)]
    pub elapsed_ms: u64,
}

impl PartialEq for QueryResult {
    fn eq(&self, other: &Self) -> bool {
        self.columns == other.columns
            && self.rows == other.rows
            && self.truncated == other.truncated
            && self.row_limit == other.row_limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExecErrorKind {
    SqlError,
    Timeout,
    UnknownDatabase,
    Forbidden,
}

impl ExecErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecErrorKind::SqlError => "SqlError",
            ExecErrorKind::Timeout => "Timeout",
            ExecErrorKind::UnknownDatabase => "UnknownDatabase",
            ExecErrorKind::Forbidden => "Forbidden",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::SqlError, Self::Timeout, Self::UnknownDatabase, Self::Forbidden]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

impl fmt::Display for ExecErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{kind}: {message}")]
pub struct ExecError {
    pub kind: ExecErrorKind,
    pub message: String,
}

impl ExecError {
    pub fn new(kind: ExecErrorKind, message: impl Into<String>) -> Self {
        let message = message.into();
        let message = if message.trim().is_empty() { kind.as_str().to_string() } else { message };
        ExecError { kind, message }
    }
}

pub type ExecOutcome = Result<QueryResult, ExecError>;

#[derive(Debug, Error)]
pub enum SandboxConfigError {
    #[error("timeout must be positive")]
    ZeroTimeout,
    #[error("row_limit must be at least 1")]
    ZeroRowLimit,
    #[error("database root {0} is not a directory")]
    MissingRoot(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    pub db_root: PathBuf,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_row_limit")]
    pub row_limit: usize,
    #[serde(default = "default_read_only")]
    pub read_only: bool,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}
fn default_row_limit() -> usize {
    DEFAULT_ROW_LIMIT
}
fn default_read_only() -> bool {
    true
}

impl SandboxConfig {
    pub fn new(db_root: impl Into<PathBuf>) -> Self {
        SandboxConfig {
            db_root: db_root.into(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            row_limit: DEFAULT_ROW_LIMIT,
            read_only: true,
        }
    }

    pub fn with_timeout_ms(mut self, ms: u64) -> Self {
        self.timeout_ms = ms;
        self
    }

    pub fn with_row_limit(mut self, rows: usize) -> Self {
        self.row_limit = rows;
        self
    }

    pub fn with_read_only(mut self, read_only: bool) -> Self {
        self.read_only = read_only;
        self
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), SandboxConfigError> {
        if self.timeout_ms == 0 {
            return Err(SandboxConfigError::ZeroTimeout);
        }
        if self.row_limit == 0 {
            return Err(SandboxConfigError::ZeroRowLimit);
        }
        if !self.db_root.is_dir() {
            return Err(SandboxConfigError::MissingRoot(self.db_root.clone()));
        }
        Ok(())
    }
}

/// Anything that can run a query on behalf of a rollout.
pub trait SandboxClient: Send + Sync {
    /// Run `sql` with the configured row cap (tool feedback).
    fn execute(&self, db_name: &str, sql: &str) -> ExecOutcome;

    /// Run `sql` without the row cap (grading). Clients that cannot lift the
    /// cap fall back to [`SandboxClient::execute`].
    fn execute_unbounded(&self, db_name: &str, sql: &str) -> ExecOutcome {
        self.execute(db_name, sql)
    }
}

impl<S: SandboxClient + ?Sized> SandboxClient for &S {
    fn execute(&self, db_name: &str, sql: &str) -> ExecOutcome {
        (**self).execute(db_name, sql)
    }

    fn execute_unbounded(&self, db_name: &str, sql: &str) -> ExecOutcome {
        (**self).execute_unbounded(db_name, sql)
    }
}

/// In-process executor. Immutable and cheap to share across threads.
#[derive(Debug, Clone)]
pub struct Sandbox {
    cfg: SandboxConfig,
}

impl Sandbox {
    pub fn new(cfg: SandboxConfig) -> Result<Self, SandboxConfigError> {
        cfg.validate()?;
        Ok(Sandbox { cfg })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.cfg
    }

    /// Path of the database file for `db_name`, if it exists.
    pub fn database_path(&self, db_name: &str) -> Result<PathBuf, ExecError> {
        resolve_database(&self.cfg.db_root, db_name)
    }

    pub fn execute_query(&self, db_name: &str, sql: &str) -> ExecOutcome {
        self.execute_with_limit(db_name, sql, Some(self.cfg.row_limit))
    }

    /// Run without the row cap, used when grading results.
    pub fn execute_unbounded(&self, db_name: &str, sql: &str) -> ExecOutcome {
        self.execute_with_limit(db_name, sql, None)
    }

    pub fn execute_with_limit(&self, db_name: &str, sql: &str, row_limit: Option<usize>) -> ExecOutcome {
        let started = Instant::now();
        let deadline = started + self.cfg.timeout();
        let path = self.database_path(db_name)?;
        let flags = if self.cfg.read_only {
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX
        } else {
            OpenFlags::SQLITE_OPEN_READ_WRITE | OpenFlags::SQLITE_OPEN_NO_MUTEX
        };
        let conn = Connection::open_with_flags(&path, flags)
            .map_err(|e| ExecError::new(ExecErrorKind::SqlError, e.to_string()))?;
        let _ = conn.busy_timeout(self.cfg.timeout());
        conn.progress_handler(1_000, Some(move || Instant::now() >= deadline))
            .map_err(|e| ExecError::new(ExecErrorKind::SqlError, e.to_string()))?;

        let mut result = run_statement(&conn, sql, row_limit, self.cfg.read_only).map_err(|e| {
            if Instant::now() >= deadline || is_interrupt(&e) {
                ExecError::new(
                    ExecErrorKind::Timeout,
                    format!("query exceeded the {} ms timeout", self.cfg.timeout_ms),
                )
            } else {
                match e {
                    StatementError::Forbidden => ExecError::new(
                        ExecErrorKind::Forbidden,
                        "statement would modify the database; the sandbox is read-only",
                    ),
                    StatementError::Empty => ExecError::new(ExecErrorKind::SqlError, "empty query"),
                    StatementError::Sqlite(e) => ExecError::new(ExecErrorKind::SqlError, sqlite_message(&e)),
                }
            }
        })?;
        result.elapsed_ms = started.elapsed().as_millis() as u64;
        Ok(result)
    }
}

impl SandboxClient for Sandbox {
    fn execute(&self, db_name: &str, sql: &str) -> ExecOutcome {
        self.execute_query(db_name, sql)
    }

    fn execute_unbounded(&self, db_name: &str, sql: &str) -> ExecOutcome {
        Sandbox::execute_unbounded(self, db_name, sql)
    }
}

/// Free-function form: builds a throwaway [`Sandbox`] for one query.
pub fn execute_query(db_name: &str, sql: &str, cfg: &SandboxConfig) -> ExecOutcome {
    let sandbox = Sandbox::new(cfg.clone())
        .map_err(|e| ExecError::new(ExecErrorKind::UnknownDatabase, e.to_string()))?;
    sandbox.execute_query(db_name, sql)
}

fn resolve_database(root: &Path, db_name: &str) -> Result<PathBuf, ExecError> {
    let valid = !db_name.is_empty()
        && db_name != "."
        && db_name != ".."
        && db_name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if !valid {
        return Err(ExecError::new(ExecErrorKind::UnknownDatabase, format!("invalid database name `{db_name}`")));
    }
    let path = root.join(format!("{db_name}.sqlite"));
    if path.is_file() {
        Ok(path)
    } else {
        Err(ExecError::new(ExecErrorKind::UnknownDatabase, format!("no database named `{db_name}`")))
    }
}

enum StatementError {
    Empty,
    Forbidden,
    Sqlite(rusqlite::Error),
}

impl From<rusqlite::Error> for StatementError {
    fn from(e: rusqlite::Error) -> Self {
        StatementError::Sqlite(e)
    }
}

fn is_interrupt(e: &StatementError) -> bool {
    matches!(
        e,
        StatementError::Sqlite(rusqlite::Error::SqliteFailure(f, _))
            if f.code == rusqlite::ErrorCode::OperationInterrupted
    )
}

fn sqlite_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        other => other.to_string(),
    }
}

fn run_statement(
    conn: &Connection,
    sql: &str,
    row_limit: Option<usize>,
    read_only: bool,
) -> Result<QueryResult, StatementError> {
    if sql.trim().is_empty() {
        return Err(StatementError::Empty);
    }
    let mut stmt = conn.prepare(sql)?;
    if read_only && !stmt.readonly() {
        return Err(StatementError::Forbidden);
    }
    let columns: Vec<String> = stmt.column_names().into_iter().map(str::to_string).collect();
    let width = columns.len();
    let mut rows = Vec::new();
    let mut truncated = false;
    let mut cursor = stmt.query([])?;
    while let Some(row) = cursor.next()? {
        if row_limit.is_some_and(|limit| rows.len() >= limit) {
            truncated = true;
            break;
        }
        let mut cells = Vec::with_capacity(width);
        for i in 0..width {
            cells.push(match row.get_ref(i)? {
                ValueRef::Null => Cell::Null,
                ValueRef::Integer(v) => Cell::Integer(v),
                ValueRef::Real(v) => Cell::Real(v),
                ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
                ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
            });
        }
        rows.push(cells);
    }
    Ok(QueryResult { columns, rows, truncated, row_limit, elapsed_ms: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;

    fn sandbox() -> (tempfile::TempDir, Sandbox) {
        let dir = tempfile::tempdir().unwrap();
        demo::write_demo_databases(dir.path()).unwrap();
        let sb = Sandbox::new(SandboxConfig::new(dir.path())).unwrap();
        (dir, sb)
    }

    #[test]
    fn truncates_to_row_limit() {
        let (_d, sb) = sandbox();
        let r = sb.execute_query("toy", "SELECT a FROM t").unwrap();
        assert_eq!(r.rows.len(), 10);
        assert!(r.truncated);
        let all = sb.execute_unbounded("toy", "SELECT a FROM t").unwrap();
        assert_eq!(all.rows.len(), 25);
        assert!(!all.truncated);
        let exact = sb.execute_with_limit("toy", "SELECT a FROM t", Some(25)).unwrap();
        assert!(!exact.truncated);
    }

    #[test]
    fn scalar_select() {
        let (_d, sb) = sandbox();
        let r = sb.execute_query("toy", "SELECT 1 AS x").unwrap();
        assert_eq!(r.columns, vec!["x"]);
        assert_eq!(r.rows, vec![vec![Cell::Integer(1)]]);
        assert!(!r.truncated);
    }

    #[test]
    fn error_kinds() {
        let (_d, sb) = sandbox();
        assert_eq!(sb.execute_query("toy", "SELEC 1").unwrap_err().kind, ExecErrorKind::SqlError);
        assert_eq!(sb.execute_query("nope", "SELECT 1").unwrap_err().kind, ExecErrorKind::UnknownDatabase);
        assert_eq!(sb.execute_query("../toy", "SELECT 1").unwrap_err().kind, ExecErrorKind::UnknownDatabase);
        assert_eq!(sb.execute_query("toy", "DELETE FROM t").unwrap_err().kind, ExecErrorKind::Forbidden);
        assert_eq!(sb.execute_query("toy", "DROP TABLE t").unwrap_err().kind, ExecErrorKind::Forbidden);
        assert_eq!(sb.execute_query("toy", "   ").unwrap_err().kind, ExecErrorKind::SqlError);
        let missing = sb.execute_query("toy", "SELECT * FROM x").unwrap_err();
        assert_eq!(missing.to_string(), "SqlError: no such table: x");
    }

    #[test]
    fn writes_allowed_when_not_read_only() {
        let (dir, _) = sandbox();
        let sb = Sandbox::new(SandboxConfig::new(dir.path()).with_read_only(false)).unwrap();
        let r = sb.execute_query("toy", "INSERT INTO t(a) VALUES (100)").unwrap();
        assert!(r.columns.is_empty());
        let n = sb.execute_query("toy", "SELECT COUNT(*) FROM t").unwrap();
        assert_eq!(n.rows[0][0], Cell::Integer(26));
    }

    #[test]
    fn timeout_interrupts() {
        let (dir, _) = sandbox();
        let sb = Sandbox::new(SandboxConfig::new(dir.path()).with_timeout_ms(100)).unwrap();
        let start = Instant::now();
        let err = sb
            .execute_query(
                "toy",
                "WITH RECURSIVE c(x) AS (SELECT 1 UNION ALL SELECT x + 1 FROM c) SELECT COUNT(*) FROM c",
            )
            .unwrap_err();
        assert_eq!(err.kind, ExecErrorKind::Timeout);
        assert!(err.message.contains("100 ms"));
        assert!(start.elapsed() < Duration::from_millis(200));
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        assert!(SandboxConfig::new(dir.path()).with_row_limit(0).validate().is_err());
        assert!(SandboxConfig::new(dir.path()).with_timeout_ms(0).validate().is_err());
        assert!(SandboxConfig::new(dir.path().join("missing")).validate().is_err());
    }

    #[test]
    fn blob_cells_serialize_as_hex() {
        assert_eq!(Cell::Blob(vec![0xde, 0xad]).to_json(), serde_json::json!("dead"));
    }
}
