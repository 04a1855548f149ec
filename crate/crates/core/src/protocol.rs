//! Tagged assistant-output format.
//!
//! An assistant turn is expected to look like
//!
//! ```text
//! <think> ... </think>
//! <tool_call> {"name": ..., "arguments": {"db_name": ..., "sql": ...}} </tool_call>
//! ```
//!
//! or the same `<think>` block followed by a single `<answer>` block. The
//! scanner here is a single left-to-right pass over the raw text: tags are
//! matched literally and case-sensitively, nesting is not supported, and any
//! non-whitespace text outside a recognised block is reported as stray.
//!
//! Parsing never fails. Malformed input produces a [`TurnParse`] with
//! `format_ok == false` and a list of [`Violation`] codes; the full code table
//! ships as `data/violation_codes.json`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{Message, Origin, Role, Trajectory};

/// Name of the only tool the environment exposes.
pub const SQL_TOOL_NAME: &str = "sql-execute_sql_query";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    Think,
    ToolCall,
    ToolResponse,
    Answer,
    Plain,
}

impl SegmentKind {
    /// Opening and closing tag for tagged kinds.
    pub fn tags(self) -> Option<(&'static str, &'static str)> {
        match self {
            SegmentKind::Think => Some(("<think>", "</think>")),
            SegmentKind::ToolCall => Some(("<tool_call>", "</tool_call>")),
            SegmentKind::ToolResponse => Some(("<tool_response>", "</tool_response>")),
            SegmentKind::Answer => Some(("<answer>", "</answer>")),
            SegmentKind::Plain => None,
        }
    }
}

const TAGGED: [SegmentKind; 4] = [
    SegmentKind::Think,
    SegmentKind::ToolCall,
    SegmentKind::ToolResponse,
    SegmentKind::Answer,
];

/// One region of an assistant turn.
///
/// `byte_span` covers the whole region in the source, tags included; `text`
/// is the content between the tags (untrimmed) or the raw text for `Plain`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub text: String,
    pub byte_span: (usize, usize),
}

impl Segment {
    pub fn is_blank(&self) -> bool {
        self.kind == SegmentKind::Plain && self.text.trim().is_empty()
    }

    /// The segment as it appeared in the source, tags included.
    pub fn to_source(&self) -> String {
        match self.kind.tags() {
            Some((open, close)) => format!("{open}{}{close}", self.text),
            None => self.text.clone(),
        }
    }
}

/// Machine-readable format violation codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    MissingThink,
    ThinkNotFirst,
    MultipleThink,
    BothCallAndAnswer,
    NoAction,
    MultipleToolCalls,
    MultipleAnswers,
    UnexpectedToolResponse,
    StrayText,
    UnclosedTag,
    UnmatchedCloseTag,
    NoFinalAnswer,
    EmptyAnswer,
    ToolCallWithoutResponse,
}

impl Violation {
    pub const ALL: [Violation; 14] = [
        Violation::MissingThink,
        Violation::ThinkNotFirst,
        Violation::MultipleThink,
        Violation::BothCallAndAnswer,
        Violation::NoAction,
        Violation::MultipleToolCalls,
        Violation::MultipleAnswers,
        Violation::UnexpectedToolResponse,
        Violation::StrayText,
        Violation::UnclosedTag,
        Violation::UnmatchedCloseTag,
        Violation::NoFinalAnswer,
        Violation::EmptyAnswer,
        Violation::ToolCallWithoutResponse,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Violation::MissingThink => "MISSING_THINK",
            Violation::ThinkNotFirst => "THINK_NOT_FIRST",
            Violation::MultipleThink => "MULTIPLE_THINK",
            Violation::BothCallAndAnswer => "BOTH_CALL_AND_ANSWER",
            Violation::NoAction => "NO_ACTION",
            Violation::MultipleToolCalls => "MULTIPLE_TOOL_CALLS",
            Violation::MultipleAnswers => "MULTIPLE_ANSWERS",
            Violation::UnexpectedToolResponse => "UNEXPECTED_TOOL_RESPONSE",
            Violation::StrayText => "STRAY_TEXT",
            Violation::UnclosedTag => "UNCLOSED_TAG",
            Violation::UnmatchedCloseTag => "UNMATCHED_CLOSE_TAG",
            Violation::NoFinalAnswer => "NO_FINAL_ANSWER",
            Violation::EmptyAnswer => "EMPTY_ANSWER",
            Violation::ToolCallWithoutResponse => "TOOL_CALL_WITHOUT_RESPONSE",
        }
    }

    /// Whether the code is raised on a single turn or on the whole trajectory.
    pub fn is_trajectory_level(self) -> bool {
        matches!(
            self,
            Violation::NoFinalAnswer | Violation::EmptyAnswer | Violation::ToolCallWithoutResponse
        )
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// Result of scanning one assistant turn. `format_ok` holds iff `violations`
/// is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnParse {
    pub segments: Vec<Segment>,
    pub format_ok: bool,
    pub violations: Vec<Violation>,
}

impl TurnParse {
    /// Segments other than whitespace-only gaps.
    pub fn blocks(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| !s.is_blank())
    }

    pub fn first(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn count(&self, kind: SegmentKind) -> usize {
        self.segments.iter().filter(|s| s.kind == kind).count()
    }

    /// Concatenation of every segment with its tags restored.
    pub fn reserialize(&self) -> String {
        self.segments.iter().map(Segment::to_source).collect()
    }
}

struct TagHit {
    at: usize,
    kind: SegmentKind,
    closing: bool,
    len: usize,
}

fn next_tag(text: &str, from: usize) -> Option<TagHit> {
    let bytes = text.as_bytes();
    let mut pos = from;
    while let Some(rel) = text[pos..].find('<') {
        let at = pos + rel;
        let rest = &text[at..];
        for kind in TAGGED {
            let (open, close) = kind.tags().expect("tagged kind");
            if rest.starts_with(open) {
                return Some(TagHit { at, kind, closing: false, len: open.len() });
            }
            if rest.starts_with(close) {
                return Some(TagHit { at, kind, closing: true, len: close.len() });
            }
        }
        pos = at + 1;
        if pos >= bytes.len() {
            break;
        }
    }
    None
}

fn push_unique(violations: &mut Vec<Violation>, v: Violation) {
    if !violations.contains(&v) {
        violations.push(v);
    }
}

fn flush_plain(text: &str, start: usize, end: usize, segments: &mut Vec<Segment>, violations: &mut Vec<Violation>) {
    if end > start {
        let chunk = &text[start..end];
        if !chunk.trim().is_empty() {
            push_unique(violations, Violation::StrayText);
        }
        segments.push(Segment { kind: SegmentKind::Plain, text: chunk.to_string(), byte_span: (start, end) });
    }
}

/// Scan one raw assistant generation.
pub fn parse_assistant_turn(text: &str) -> TurnParse {
    let mut segments = Vec::new();
    let mut violations = Vec::new();
    let mut plain_start = 0;
    let mut pos = 0;

    while let Some(hit) = next_tag(text, pos) {
        if hit.closing {
            push_unique(&mut violations, Violation::UnmatchedCloseTag);
            pos = hit.at + hit.len;
            continue;
        }
        let body_start = hit.at + hit.len;
        match next_tag(text, body_start) {
            Some(end) if end.closing && end.kind == hit.kind => {
                flush_plain(text, plain_start, hit.at, &mut segments, &mut violations);
                let region_end = end.at + end.len;
                segments.push(Segment {
                    kind: hit.kind,
                    text: text[body_start..end.at].to_string(),
                    byte_span: (hit.at, region_end),
                });
                pos = region_end;
                plain_start = region_end;
            }
            _ => {
                // Unterminated or interrupted by another tag: the opening tag
                // stays inside the surrounding plain text.
                push_unique(&mut violations, Violation::UnclosedTag);
                pos = body_start;
            }
        }
    }
    flush_plain(text, plain_start, text.len(), &mut segments, &mut violations);

    let mut parse = TurnParse { segments, format_ok: false, violations };
    let thinks = parse.count(SegmentKind::Think);
    let calls = parse.count(SegmentKind::ToolCall);
    let answers = parse.count(SegmentKind::Answer);

    let mut structural = Vec::new();
    if thinks == 0 {
        structural.push(Violation::MissingThink);
    } else if parse.blocks().next().map(|s| s.kind) != Some(SegmentKind::Think) {
        structural.push(Violation::ThinkNotFirst);
    }
    if thinks > 1 {
        structural.push(Violation::MultipleThink);
    }
    match (calls, answers) {
        (0, 0) => structural.push(Violation::NoAction),
        (c, a) if c > 0 && a > 0 => structural.push(Violation::BothCallAndAnswer),
        _ => {}
    }
    if calls > 1 {
        structural.push(Violation::MultipleToolCalls);
    }
    if answers > 1 {
        structural.push(Violation::MultipleAnswers);
    }
    if parse.count(SegmentKind::ToolResponse) > 0 {
        structural.push(Violation::UnexpectedToolResponse);
    }
    for v in structural {
        push_unique(&mut parse.violations, v);
    }
    parse.format_ok = parse.violations.is_empty();
    parse
}

/// A parsed call to the SQL tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub name: String,
    pub db_name: String,
    pub sql: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolCallError {
    #[error("segment is not a tool call")]
    NotAToolCall,
    #[error("tool call body is not valid JSON: {0}")]
    MalformedJson(String),
    #[error("tool call is missing argument `{0}`")]
    MissingArgument(&'static str),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
}

/// Parse the JSON body of a `<tool_call>` block and check it targets `tool_name`.
pub fn extract_tool_call(segment: &Segment, tool_name: &str) -> Result<ToolInvocation, ToolCallError> {
    if segment.kind != SegmentKind::ToolCall {
        return Err(ToolCallError::NotAToolCall);
    }
    let body: serde_json::Value = serde_json::from_str(segment.text.trim())
        .map_err(|e| ToolCallError::MalformedJson(e.to_string()))?;
    let obj = body
        .as_object()
        .ok_or_else(|| ToolCallError::MalformedJson("expected a JSON object".into()))?;
    let name = obj
        .get("name")
        .and_then(|v| v.as_str())
        .ok_or_else(|| ToolCallError::MalformedJson("missing string field `name`".into()))?;
    if name.is_empty() || name != tool_name {
        return Err(ToolCallError::UnknownTool(name.to_string()));
    }
    let arguments = match obj.get("arguments") {
        Some(serde_json::Value::String(encoded)) => serde_json::from_str::<serde_json::Value>(encoded)
            .map_err(|e| ToolCallError::MalformedJson(format!("arguments: {e}")))?,
        Some(v) => v.clone(),
        None => return Err(ToolCallError::MissingArgument("db_name")),
    };
    let arg = |key: &'static str| -> Result<String, ToolCallError> {
        arguments
            .get(key)
            .and_then(|v| v.as_str())
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string)
            .ok_or(ToolCallError::MissingArgument(key))
    };
    Ok(ToolInvocation { name: name.to_string(), db_name: arg("db_name")?, sql: arg("sql")? })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnswerError {
    #[error("segment is not an answer")]
    NotAnAnswer,
    #[error("answer contains no SQL")]
    EmptyAnswer,
}

/// SQL inside an `<answer>` block.
///
/// Takes the first ```` ```sql ```` fence (falling back to any fence), up to
/// the closing fence or the end of the block; without a fence the whole body
/// is used.
pub fn extract_answer_sql(segment: &Segment) -> Result<String, AnswerError> {
    if segment.kind != SegmentKind::Answer {
        return Err(AnswerError::NotAnAnswer);
    }
    let body = segment.text.as_str();
    let fenced = find_fence(body, true).or_else(|| find_fence(body, false));
    let sql = match fenced {
        Some(inner) => inner.trim(),
        None => body.trim(),
    };
    if sql.is_empty() {
        Err(AnswerError::EmptyAnswer)
    } else {
        Ok(sql.to_string())
    }
}

fn find_fence(body: &str, sql_only: bool) -> Option<&str> {
    let mut search = 0;
    while let Some(rel) = body[search..].find("```") {
        let start = search + rel;
        let after = &body[start + 3..];
        let lang_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '+' || c == '-'))
            .unwrap_or(after.len());
        let lang = &after[..lang_len];
        let is_sql = lang.eq_ignore_ascii_case("sql");
        if !sql_only || is_sql {
            // An info string is either `sql` or a word alone on the fence line.
            let info_line = after[lang_len..].starts_with('\n') || after[lang_len..].starts_with("\r\n");
            let content = if is_sql || info_line { &after[lang_len..] } else { after };
            let end = content.find("```").unwrap_or(content.len());
            return Some(&content[..end]);
        }
        search = start + 3;
    }
    None
}

/// A violation located in a trajectory; `turn` is the 0-based assistant turn
/// or `None` for trajectory-level codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocatedViolation {
    pub turn: Option<usize>,
    pub code: Violation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub format_ok: bool,
    pub violations: Vec<LocatedViolation>,
}

/// Text wrapped as an environment tool response.
pub fn wrap_tool_response(body: &str) -> String {
    format!("<tool_response>\n{body}\n</tool_response>")
}

fn is_tool_response(msg: &Message) -> bool {
    msg.role == Role::User && msg.origin == Origin::Environment && {
        let t = msg.text.trim();
        t.starts_with("<tool_response>") && t.ends_with("</tool_response>")
    }
}

/// Format check over a full transcript (the messages after the prompt).
pub fn validate_messages(messages: &[Message]) -> FormatVerdict {
    let mut violations = Vec::new();
    let assistant: Vec<usize> = messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.role == Role::Assistant)
        .map(|(i, _)| i)
        .collect();

    for (turn, &idx) in assistant.iter().enumerate() {
        let parse = parse_assistant_turn(&messages[idx].text);
        for code in &parse.violations {
            violations.push(LocatedViolation { turn: Some(turn), code: *code });
        }
        if parse.count(SegmentKind::ToolCall) > 0 {
            let answered = messages.get(idx + 1).is_some_and(is_tool_response);
            if !answered {
                violations.push(LocatedViolation {
                    turn: Some(turn),
                    code: Violation::ToolCallWithoutResponse,
                });
            }
        }
    }

    match assistant.last() {
        None => violations.push(LocatedViolation { turn: None, code: Violation::NoFinalAnswer }),
        Some(&last) => {
            let parse = parse_assistant_turn(&messages[last].text);
            match parse.first(SegmentKind::Answer) {
                None => violations.push(LocatedViolation { turn: None, code: Violation::NoFinalAnswer }),
                Some(seg) => {
                    if extract_answer_sql(seg).is_err() {
                        violations.push(LocatedViolation { turn: None, code: Violation::EmptyAnswer });
                    }
                }
            }
        }
    }

    FormatVerdict { format_ok: violations.is_empty(), violations }
}

/// Trajectory-level format verdict: every assistant turn well-formed and the
/// last one carries a usable answer.
pub fn validate_trajectory_format(traj: &Trajectory) -> FormatVerdict {
    validate_messages(&traj.messages)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE1_TURN1: &str = "<think>\n\nOkay, let's tackle this problem. So the query should be correct.\n\n</think>\n\n<tool_call>\n{\n  \"name\": \"sql-execute_sql_query\",\n  \"arguments\": {\n    \"db_name\": \"california_schools\",\n    \"sql\": \"SELECT COUNT(*) FROM satscores JOIN schools ON satscores.cds = schools.CDSCode WHERE schools.Virtual = 'F' AND satscores.AvgScrMath > 400;\"\n  }\n}\n</tool_call>";

    fn kinds(p: &TurnParse) -> Vec<SegmentKind> {
        p.blocks().map(|s| s.kind).collect()
    }

    #[test]
    fn minimal_answer_turn() {
        let p = parse_assistant_turn("<think>x</think><answer>```sql\nSELECT 1\n```</answer>");
        assert!(p.format_ok, "{:?}", p.violations);
        assert_eq!(kinds(&p), vec![SegmentKind::Think, SegmentKind::Answer]);
        assert_eq!(p.segments.len(), 2);
    }

    #[test]
    fn tool_call_turn_from_transcript() {
        let p = parse_assistant_turn(CASE1_TURN1);
        assert!(p.format_ok, "{:?}", p.violations);
        assert_eq!(kinds(&p), vec![SegmentKind::Think, SegmentKind::ToolCall]);
        let call = extract_tool_call(p.first(SegmentKind::ToolCall).unwrap(), SQL_TOOL_NAME).unwrap();
        assert_eq!(call.name, SQL_TOOL_NAME);
        assert_eq!(call.db_name, "california_schools");
        assert!(call.sql.starts_with("SELECT COUNT(*) FROM satscores"));
        assert_eq!(p.reserialize(), CASE1_TURN1);
    }

    #[test]
    fn missing_think_is_the_only_violation() {
        let p = parse_assistant_turn("<answer>SELECT 1</answer>");
        assert!(!p.format_ok);
        assert_eq!(p.violations, vec![Violation::MissingThink]);
    }

    #[test]
    fn structural_violations() {
        let both = parse_assistant_turn("<think>a</think><tool_call>{}</tool_call><answer>x</answer>");
        assert!(both.violations.contains(&Violation::BothCallAndAnswer));

        let stray = parse_assistant_turn("<think>a</think> so the answer is <answer>x</answer>");
        assert_eq!(stray.violations, vec![Violation::StrayText]);

        let none = parse_assistant_turn("<think>hmm</think>");
        assert_eq!(none.violations, vec![Violation::NoAction]);

        let late = parse_assistant_turn("<answer>x</answer><think>a</think>");
        assert_eq!(late.violations, vec![Violation::ThinkNotFirst]);

        let twice = parse_assistant_turn("<think>a</think><think>b</think><answer>x</answer>");
        assert_eq!(twice.violations, vec![Violation::MultipleThink]);

        let echo = parse_assistant_turn(
            "<think>a</think><tool_call>{}</tool_call><tool_response>fake</tool_response>",
        );
        assert!(echo.violations.contains(&Violation::UnexpectedToolResponse));
    }

    #[test]
    fn unclosed_and_nested_tags() {
        let p = parse_assistant_turn("<think>a</think><tool_call>{\"name\": 1}");
        assert!(p.violations.contains(&Violation::UnclosedTag));
        assert!(p.violations.contains(&Violation::NoAction));

        let nested = parse_assistant_turn("<think>a <answer>x</answer></think>");
        assert!(nested.violations.contains(&Violation::UnclosedTag));
        assert!(nested.violations.contains(&Violation::UnmatchedCloseTag));
        assert_eq!(nested.reserialize(), "<think>a <answer>x</answer></think>");
    }

    #[test]
    fn tags_are_case_sensitive() {
        let p = parse_assistant_turn("<THINK>a</THINK><answer>x</answer>");
        assert_eq!(p.violations, vec![Violation::StrayText, Violation::MissingThink]);
    }

    #[test]
    fn tool_call_errors_are_distinguishable() {
        let seg = |body: &str| Segment {
            kind: SegmentKind::ToolCall,
            text: body.to_string(),
            byte_span: (0, 0),
        };
        assert_eq!(
            extract_tool_call(&seg(r#"{"name":"sql-execute_sql_query","arguments":{"db_name":"d"}}"#), SQL_TOOL_NAME),
            Err(ToolCallError::MissingArgument("sql"))
        );
        assert!(matches!(extract_tool_call(&seg("not json"), SQL_TOOL_NAME), Err(ToolCallError::MalformedJson(_))));
        assert_eq!(
            extract_tool_call(&seg(r#"{"name":"shell","arguments":{"db_name":"d","sql":"x"}}"#), SQL_TOOL_NAME),
            Err(ToolCallError::UnknownTool("shell".into()))
        );
        let encoded = extract_tool_call(
            &seg(r#"{"name":"sql-execute_sql_query","arguments":"{\"db_name\":\"d\",\"sql\":\"SELECT 1\"}"}"#),
            SQL_TOOL_NAME,
        )
        .unwrap();
        assert_eq!(encoded.sql, "SELECT 1");
        assert_eq!(
            extract_tool_call(&seg(r#"{"name":"sql-execute_sql_query","arguments":{"db_name":"d","sql":"  "}}"#), SQL_TOOL_NAME),
            Err(ToolCallError::MissingArgument("sql"))
        );
    }

    #[test]
    fn answer_sql_extraction() {
        let ans = |body: &str| Segment { kind: SegmentKind::Answer, text: body.into(), byte_span: (0, 0) };
        assert_eq!(
            extract_answer_sql(&ans("\n\n```sql\nSELECT MAX(m.label) AS max_label FROM molecule m; \n```\n\n")).unwrap(),
            "SELECT MAX(m.label) AS max_label FROM molecule m;"
        );
        assert_eq!(extract_answer_sql(&ans("SELECT 1")).unwrap(), "SELECT 1");
        assert_eq!(extract_answer_sql(&ans("```sql\n\n```")), Err(AnswerError::EmptyAnswer));
        // Unterminated fence, as in the output-format template.
        assert_eq!(extract_answer_sql(&ans("\n```sql\nSELECT 2\n")).unwrap(), "SELECT 2");
        assert_eq!(extract_answer_sql(&ans("```\nSELECT 3\n```")).unwrap(), "SELECT 3");
        assert_eq!(extract_answer_sql(&ans("```sql SELECT 4```")).unwrap(), "SELECT 4");
    }

    #[test]
    fn violation_table_matches_enum() {
        let table: serde_json::Value =
            serde_json::from_str(include_str!("../data/violation_codes.json")).unwrap();
        let codes: Vec<&str> = table["codes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["code"].as_str().unwrap())
            .collect();
        let expected: Vec<&str> = Violation::ALL.iter().map(|v| v.code()).collect();
        assert_eq!(codes, expected);
        for v in Violation::ALL {
            assert_eq!(serde_json::to_value(v).unwrap(), serde_json::Value::String(v.code().into()));
        }
    }
}
