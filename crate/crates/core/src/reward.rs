//! Format, execution and result rewards.
//!
//! The three parts are gated: a bad format zeroes both the execution and the
//! result reward, and SQL that does not execute zeroes the result reward.
//! Only the final answer is scored; intermediate tool calls never are.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{extract_answer_sql, parse_assistant_turn, validate_trajectory_format, SegmentKind};
use crate::rollout::Trajectory;
use crate::sandbox::{Cell, ExecError, QueryResult, SandboxClient};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub format_magnitude: f64,
    pub exec_magnitude: f64,
    pub result_magnitude: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { format_magnitude: 0.1, exec_magnitude: 0.1, result_magnitude: 1.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("format_magnitude", self.format_magnitude),
            ("exec_magnitude", self.exec_magnitude),
            ("result_magnitude", self.result_magnitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Largest attainable total.
    pub fn max_total(&self) -> f64 {
        self.format_magnitude + self.exec_magnitude + self.result_magnitude
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_format: f64,
    pub r_exec: f64,
    pub r_result: f64,
    pub total: f64,
    pub format_ok: bool,
    pub executable: bool,
    pub correct: bool,
    pub details: Vec<String>,
}

/// The facts a reward is computed from. `executable` and `correct` are
/// ignored where the gating makes them irrelevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judgement {
    pub format_ok: bool,
    pub executable: bool,
    pub correct: bool,
}

/// Apply the gated reward table to a judgement.
pub fn compose(j: Judgement, cfg: &RewardConfig) -> RewardBreakdown {
    let executable = j.format_ok && j.executable;
    let correct = executable && j.correct;
    let r_format = if j.format_ok { cfg.format_magnitude } else { -cfg.format_magnitude };
    let r_exec = match (j.format_ok, j.executable) {
        (false, _) => 0.0,
        (true, true) => cfg.exec_magnitude,
        (true, false) => -cfg.exec_magnitude,
    };
    let r_result = match (j.format_ok && j.executable, j.correct) {
        (false, _) => 0.0,
        (true, true) => cfg.result_magnitude,
        (true, false) => -cfg.result_magnitude,
    };
    RewardBreakdown {
        r_format,
        r_exec,
        r_result,
        total: r_format + r_exec + r_result,
        format_ok: j.format_ok,
        executable,
        correct,
        details: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    /// The reference query itself fails; the dataset needs fixing.
    #[error("gold SQL failed to execute: {0}")]
    GoldExecutionFailed(ExecError),
}

/// SQL of the final assistant turn's answer, if there is one.
pub fn final_answer_sql(traj: &Trajectory) -> Option<String> {
    let last = traj.final_assistant()?;
    let parse = parse_assistant_turn(&last.text);
    extract_answer_sql(parse.first(SegmentKind::Answer)?).ok()
}

pub fn format_reward(traj: &Trajectory, cfg: &RewardConfig) -> f64 {
    if validate_trajectory_format(traj).format_ok {
        cfg.format_magnitude
    } else {
        -cfg.format_magnitude
    }
}

pub fn execution_reward(traj: &Trajectory, db_name: &str, sandbox: &dyn SandboxClient, cfg: &RewardConfig) -> f64 {
    if !validate_trajectory_format(traj).format_ok {
        return 0.0;
    }
    match final_answer_sql(traj).map(|sql| sandbox.execute(db_name, &sql)) {
        Some(Ok(_)) => cfg.exec_magnitude,
        _ => -cfg.exec_magnitude,
    }
}

pub fn result_reward(
    traj: &Trajectory,
    db_name: &str,
    gold_sql: &str,
    sandbox: &dyn SandboxClient,
    cfg: &RewardConfig,
) -> Result<f64, RewardError> {
    total_reward(traj, db_name, gold_sql, sandbox, cfg).map(|b| b.r_result)
}

pub fn total_reward(
    traj: &Trajectory,
    db_name: &str,
    gold_sql: &str,
    sandbox: &dyn SandboxClient,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let verdict = validate_trajectory_format(traj);
    let mut details: Vec<String> = verdict
        .violations
        .iter()
        .map(|v| match v.turn {
            Some(t) => format!("turn {t}: {}", v.code),
            None => format!("trajectory: {}", v.code),
        })
        .collect();

    let mut judgement = Judgement { format_ok: verdict.format_ok, executable: false, correct: false };
    if verdict.format_ok {
        let sql = final_answer_sql(traj).expect("valid format implies an answer");
        match sandbox.execute_unbounded(db_name, &sql) {
            Err(e) => details.push(format!("answer failed: {e}")),
            Ok(pred) => {
                judgement.executable = true;
                let gold = sandbox.execute_unbounded(db_name, gold_sql).map_err(RewardError::GoldExecutionFailed)?;
                judgement.correct = results_equal(&pred, &gold, is_order_sensitive(gold_sql));
                if !judgement.correct {
                    details.push("answer result differs from gold".to_string());
                }
            }
        }
    }
    let mut breakdown = compose(judgement, cfg);
    breakdown.details = details;
    Ok(breakdown)
}

/// Comparable form of a cell: integer-valued reals become integers.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Norm {
    Null,
    Int(i64),
    Real(OrdF64),
    Text(String),
    Blob(Vec<u8>),
}

#[derive(Debug, Clone, Copy)]
struct OrdF64(f64);

impl PartialEq for OrdF64 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn normalize(cell: &Cell) -> Norm {
    match cell {
        Cell::Null => Norm::Null,
        Cell::Integer(i) => Norm::Int(*i),
        Cell::Real(r) => {
            if r.fract() == 0.0 && *r >= i64::MIN as f64 && *r < i64::MAX as f64 {
                Norm::Int(*r as i64)
            } else {
                Norm::Real(OrdF64(*r))
            }
        }
        Cell::Text(s) => Norm::Text(s.clone()),
        Cell::Blob(b) => Norm::Blob(b.clone()),
    }
}

fn normalized_rows(r: &QueryResult) -> Vec<Vec<Norm>> {
    r.rows.iter().map(|row| row.iter().map(normalize).collect()).collect()
}

/// Execution-accuracy comparison. Rows are a multiset unless
/// `order_sensitive`; column names are ignored but the count must match.
pub fn results_equal(pred: &QueryResult, gold: &QueryResult, order_sensitive: bool) -> bool {
    if pred.columns.len() != gold.columns.len() || pred.rows.len() != gold.rows.len() {
        return false;
    }
    let mut a = normalized_rows(pred);
    let mut b = normalized_rows(gold);
    if !order_sensitive {
        a.sort();
        b.sort();
    }
    a == b
}

/// Whether the statement has an `ORDER BY` at the top level (outside
/// parentheses, string literals, quoted identifiers and comments).
pub fn is_order_sensitive(sql: &str) -> bool {
    let bytes = sql.as_bytes();
    let mut depth = 0i32;
    let mut words: Vec<String> = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\'' | b'"' | b'`' => {
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == c {
                        if bytes.get(i + 1) == Some(&c) {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
                i += 1;
                words.push(String::new());
            }
            b'[' => {
                while i < bytes.len() && bytes[i] != b']' {
                    i += 1;
                }
                i += 1;
                words.push(String::new());
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 2;
            }
            b'(' => {
                depth += 1;
                i += 1;
                words.push(String::new());
            }
            b')' => {
                depth -= 1;
                i += 1;
                words.push(String::new());
            }
            c if c.is_ascii_alphanumeric() || c == b'_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let word = sql[start..i].to_ascii_uppercase();
                if depth == 0 && word == "BY" && words.last().is_some_and(|w| w == "ORDER") {
                    return true;
                }
                words.push(if depth == 0 { word } else { String::new() });
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                i += 1;
                words.push(String::new());
            }
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qr(rows: Vec<Vec<Cell>>) -> QueryResult {
        let width = rows.first().map_or(1, |r| r.len());
        QueryResult {
            columns: (0..width).map(|i| format!("c{i}")).collect(),
            rows,
            truncated: false,
            row_limit: None,
            elapsed_ms: 0,
        }
    }

    fn ints(v: &[i64]) -> QueryResult {
        qr(v.iter().map(|&i| vec![Cell::Integer(i)]).collect())
    }

    #[test]
    fn compose_table() {
        let cfg = RewardConfig::default();
        let row = |f, e, c| {
            let b = compose(Judgement { format_ok: f, executable: e, correct: c }, &cfg);
            (b.r_format, b.r_exec, b.r_result)
        };
        assert_eq!(row(true, true, true), (0.1, 0.1, 1.0));
        assert_eq!(row(true, true, false), (0.1, 0.1, -1.0));
        assert_eq!(row(true, false, true), (0.1, -0.1, 0.0));
        assert_eq!(row(false, true, true), (-0.1, 0.0, 0.0));
        assert_eq!(row(false, false, false), (-0.1, 0.0, 0.0));
    }

    #[test]
    fn multiset_and_order() {
        assert!(results_equal(&ints(&[1, 2]), &ints(&[2, 1]), false));
        assert!(!results_equal(&ints(&[1, 2]), &ints(&[2, 1]), true));
        assert!(!results_equal(&ints(&[1, 1, 2]), &ints(&[1, 2, 2]), false));
        assert!(results_equal(&qr(vec![vec![Cell::Real(1.0)]]), &ints(&[1]), false));
        assert!(!results_equal(&qr(vec![vec![Cell::Real(1.5)]]), &ints(&[1]), false));
        assert!(!results_equal(&qr(vec![vec![Cell::Text("1".into())]]), &ints(&[1]), false));
        assert!(!results_equal(&qr(vec![vec![Cell::Integer(1), Cell::Null]]), &ints(&[1]), false));
        assert!(results_equal(&qr(vec![vec![Cell::Null]]), &qr(vec![vec![Cell::Null]]), true));
    }

    #[test]
    fn order_by_detection() {
        assert!(is_order_sensitive("SELECT a FROM t ORDER BY a"));
        assert!(is_order_sensitive("select a from t order\n  by a desc limit 3"));
        assert!(!is_order_sensitive("SELECT a FROM (SELECT a FROM t ORDER BY a) LIMIT 1"));
        assert!(!is_order_sensitive("SELECT 'ORDER BY' FROM t"));
        assert!(!is_order_sensitive("SELECT a FROM t -- ORDER BY a"));
        assert!(!is_order_sensitive("SELECT \"order\" FROM t /* ORDER BY */"));
        assert!(!is_order_sensitive("SELECT border, by FROM t"));
        assert!(is_order_sensitive("SELECT a FROM t ORDER /* c */ BY a"));
    }

    #[test]
    fn config_validation() {
        assert!(RewardConfig::default().validate().is_ok());
        assert!(RewardConfig { exec_magnitude: -0.1, ..Default::default() }.validate().is_err());
        assert!((RewardConfig::default().max_total() - 1.2).abs() < 1e-12);
    }
}
