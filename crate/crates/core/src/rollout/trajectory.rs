use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocol::ToolInvocation;
use crate::reward::RewardBreakdown;
use crate::sandbox::{ExecError, ExecOutcome, QueryResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// Who produced a message: the prompt, the policy, or the environment
/// (tool feedback and rethink requests, both sent in the user role).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Prompt,
    Policy,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub origin: Origin,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message { role: Role::System, origin: Origin::Prompt, text: text.into() }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Message { role: Role::User, origin: Origin::Prompt, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Message { role: Role::Assistant, origin: Origin::Policy, text: text.into() }
    }

    /// Environment feedback, carried in the user role.
    pub fn environment(text: impl Into<String>) -> Self {
        Message { role: Role::User, origin: Origin::Environment, text: text.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    Answered,
    BudgetExhausted,
    PolicyError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToolOutcome {
    Ok(QueryResult),
    Error(ExecError),
}

impl From<ExecOutcome> for ToolOutcome {
    fn from(outcome: ExecOutcome) -> Self {
        match outcome {
            Ok(r) => ToolOutcome::Ok(r),
            Err(e) => ToolOutcome::Error(e),
        }
    }
}

impl ToolOutcome {
    pub fn as_result(&self) -> Result<&QueryResult, &ExecError> {
        match self {
            ToolOutcome::Ok(r) => Ok(r),
            ToolOutcome::Error(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    /// 0-based assistant turn that issued the call.
    pub turn: usize,
    pub invocation: ToolInvocation,
    pub outcome: ToolOutcome,
}

/// One token of the full transcript.
///
/// Policy tokens carry the endpoint-reported id (when available) and
/// logprob. Prompt and environment text has no model tokenization here; it
/// is recorded byte by byte with `logprob: None`, and trainers re-tokenize it
/// by `message_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub message_index: usize,
    pub token_id: Option<u32>,
    pub logprob: Option<f64>,
    pub loss_mask: u8,
}

/// A complete multi-turn rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    /// Index of this rollout inside its group.
    pub member: usize,
    /// System, user, then the alternating assistant/environment history.
    pub messages: Vec<Message>,
    pub tool_records: Vec<ToolRecord>,
    pub termination: Termination,
    pub turns_used: usize,
    /// Assistant turns with neither a usable tool call nor an answer.
    pub void_turns: Vec<usize>,
    /// The assembled context exceeded `max_sequence_tokens` at some turn.
    pub context_overflow: bool,
    pub policy_error: Option<String>,
    pub token_log: Option<Vec<TokenEntry>>,
    pub reward: Option<RewardBreakdown>,
}

impl Trajectory {
    pub fn assistant_turns(&self) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(|m| m.role == Role::Assistant)
    }

    pub fn final_assistant(&self) -> Option<&Message> {
        self.assistant_turns().last()
    }

    pub fn rethink_count(&self, rethink_text: &str) -> usize {
        self.messages
            .iter()
            .filter(|m| m.origin == Origin::Environment && m.text == rethink_text)
            .count()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

/// Write trajectories as JSON lines, one per line, in the given order.
pub fn write_jsonl<'a>(mut out: impl Write, trajs: impl IntoIterator<Item = &'a Trajectory>) -> std::io::Result<()> {
    for t in trajs {
        writeln!(out, "{}", t.to_json_line())?;
    }
    out.flush()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>, TrajectoryFileError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| TrajectoryFileError::Parse { line: i + 1, source: e })?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryFileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}
