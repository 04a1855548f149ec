//! Multi-turn rollouts: generate, parse, execute the tool, feed back, repeat.

pub mod mock;
mod policy;
mod trajectory;

use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{extract_answer_sql, extract_tool_call, parse_assistant_turn, wrap_tool_response, SegmentKind, SQL_TOOL_NAME};
use crate::sandbox::{render_tool_response, SandboxClient};

pub use policy::{
    parse_chat_completion, ChatCompletionsClient, FinishReason, GeneratedToken, PolicyEndpoint, PolicyError,
    PolicyReply, PolicyRequest, Sampling,
};
pub use trajectory::{
    read_jsonl, write_jsonl, Message, Origin, Role, TokenEntry, ToolOutcome, ToolRecord, Trajectory,
    TrajectoryFileError, Termination,
};

pub const RETHINK_TEXT: &str = "My action is not correct. Let me rethink.";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";
pub const DEFAULT_EOS: &str = "<|im_end|>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Maximum assistant generations per trajectory.
    pub max_turns: usize,
    pub group_size: usize,
    pub temperature: f64,
    /// Context budget in (estimated) tokens.
    pub max_sequence_tokens: usize,
    /// Per-generation token cap sent to the endpoint.
    pub max_response_tokens: usize,
    pub rethink_text: String,
    pub eos: String,
    pub tool_name: String,
    /// Extra attempts after a retryable endpoint failure.
    pub retries: u32,
    pub retry_backoff_ms: u64,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_turns: 6,
            group_size: 5,
            temperature: 0.6,
            max_sequence_tokens: 8192,
            max_response_tokens: 2048,
            rethink_text: RETHINK_TEXT.to_string(),
            eos: DEFAULT_EOS.to_string(),
            tool_name: SQL_TOOL_NAME.to_string(),
            retries: 2,
            retry_backoff_ms: 250,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    /// Greedy, single-sample settings used for evaluation.
    pub fn eval() -> Self {
        RolloutConfig { temperature: 0.0, group_size: 1, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), RolloutConfigError> {
        if self.max_turns == 0 {
            return Err(RolloutConfigError("max_turns must be at least 1".into()));
        }
        if self.group_size == 0 {
            return Err(RolloutConfigError("group_size must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(RolloutConfigError(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.max_sequence_tokens == 0 || self.max_response_tokens == 0 {
            return Err(RolloutConfigError("token budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn stop_sequences(&self) -> Vec<String> {
        vec![TOOL_CALL_CLOSE.to_string(), self.eos.clone()]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid rollout config: {0}")]
pub struct RolloutConfigError(pub String);

/// The prompt a rollout starts from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub system: String,
    pub user: String,
}

impl Prompt {
    pub fn new(id: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        Prompt { id: id.into(), system: system.into(), user: user.into() }
    }
}

/// System and user messages followed by the history, unchanged.
pub fn build_context(system: &str, user: &str, history: &[Message]) -> Vec<Message> {
    let mut out = Vec::with_capacity(history.len() + 2);
    out.push(Message::system(system));
    out.push(Message::user(user));
    out.extend_from_slice(history);
    out
}

/// Rough token count used for the context budget: one token per four bytes,
/// plus a few tokens of chat-template overhead per message.
pub fn estimate_tokens(messages: &[Message]) -> usize {
    messages.iter().map(|m| m.text.len().div_ceil(4) + 4).sum()
}

pub fn exceeds_budget(messages: &[Message], cfg: &RolloutConfig) -> bool {
    estimate_tokens(messages) > cfg.max_sequence_tokens
}

/// How an assistant turn is acted on.
#[derive(Debug, Clone, PartialEq)]
pub enum TurnAction {
    Call(crate::protocol::ToolInvocation),
    Answer(String),
    Void,
}

/// Decide what the environment does with one assistant turn.
///
/// A single well-formed tool call is executed. Otherwise an answer with
/// extractable SQL ends the rollout. Everything else (malformed calls,
/// several calls, model-written tool responses, no action) is void.
pub fn classify_turn(text: &str, tool_name: &str) -> TurnAction {
    let parse = parse_assistant_turn(text);
    if parse.count(SegmentKind::ToolResponse) > 0 {
        return TurnAction::Void;
    }
    match parse.count(SegmentKind::ToolCall) {
        0 => {}
        1 => {
            let seg = parse.first(SegmentKind::ToolCall).expect("counted");
            return match extract_tool_call(seg, tool_name) {
                Ok(inv) => TurnAction::Call(inv),
                Err(_) => TurnAction::Void,
            };
        }
        _ => return TurnAction::Void,
    }
    match parse.first(SegmentKind::Answer).map(extract_answer_sql) {
        Some(Ok(sql)) => TurnAction::Answer(sql),
        _ => TurnAction::Void,
    }
}

/// Endpoints strip the matched stop string; put the closing tag back so the
/// transcript stays well-formed. A trailing EOS marker is dropped.
fn normalize_reply(text: &str, eos: &str) -> String {
    let mut out = text.strip_suffix(eos).unwrap_or(text).to_string();
    let opens = out.matches("<tool_call>").count();
    let closes = out.matches(TOOL_CALL_CLOSE).count();
    if opens > closes {
        out.push_str(TOOL_CALL_CLOSE);
    }
    out
}

fn generate_with_retries(
    policy: &dyn PolicyEndpoint,
    request: &PolicyRequest,
    cfg: &RolloutConfig,
) -> Result<PolicyReply, PolicyError> {
    let mut attempt = 0;
    loop {
        match policy.generate(request) {
            Ok(reply) => return Ok(reply),
            Err(e) if e.is_retryable() && attempt < cfg.retries => {
                let wait = cfg.retry_backoff_ms.saturating_mul(1 << attempt);
                tracing::warn!(attempt, error = %e, "policy call failed, retrying");
                std::thread::sleep(Duration::from_millis(wait));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Token ids for text the policy did not generate: one entry per byte.
fn byte_entries(message_index: usize, text: &str) -> impl Iterator<Item = TokenEntry> + '_ {
    text.bytes().map(move |b| TokenEntry { message_index, token_id: Some(b as u32), logprob: None, loss_mask: 0 })
}

/// Run one trajectory with the given sampling seed.
pub fn run_rollout(
    prompt: &Prompt,
    policy: &dyn PolicyEndpoint,
    sandbox: &dyn SandboxClient,
    cfg: &RolloutConfig,
) -> Trajectory {
    run_member(prompt, 0, cfg.seed, policy, sandbox, cfg)
}

fn run_member(
    prompt: &Prompt,
    member: usize,
    seed: u64,
    policy: &dyn PolicyEndpoint,
    sandbox: &dyn SandboxClient,
    cfg: &RolloutConfig,
) -> Trajectory {
    let mut messages = build_context(&prompt.system, &prompt.user, &[]);
    let mut tool_records = Vec::new();
    let mut void_turns = Vec::new();
    let mut context_overflow = false;
    let mut policy_error = None;
    // Per-message policy tokens; None once any reply lacks token data.
    let mut policy_tokens: Option<Vec<(usize, Vec<GeneratedToken>)>> = Some(Vec::new());
    let mut termination = Termination::BudgetExhausted;
    let mut turns_used = 0;

    for turn in 0..cfg.max_turns {
        if exceeds_budget(&messages, cfg) {
            context_overflow = true;
        }
        let request = PolicyRequest {
            messages: messages.clone(),
            sampling: Sampling {
                temperature: cfg.temperature,
                max_tokens: cfg.max_response_tokens,
                stop_sequences: cfg.stop_sequences(),
                seed: Some(seed),
            },
        };
        let reply = match generate_with_retries(policy, &request, cfg) {
            Ok(r) => r,
            Err(PolicyError::ContextOverflow(msg)) => {
                context_overflow = true;
                policy_error = Some(PolicyError::ContextOverflow(msg).to_string());
                termination = Termination::BudgetExhausted;
                break;
            }
            Err(e) => {
                policy_error = Some(e.to_string());
                termination = Termination::PolicyError;
                break;
            }
        };
        turns_used += 1;
        let text = normalize_reply(&reply.text, &cfg.eos);
        let message_index = messages.len();
        match (&mut policy_tokens, reply.tokens) {
            (Some(acc), Some(tokens)) => acc.push((message_index, tokens)),
            (slot, _) => *slot = None,
        }
        messages.push(Message::assistant(text.clone()));

        match classify_turn(&text, &cfg.tool_name) {
            TurnAction::Call(invocation) => {
                let outcome = sandbox.execute(&invocation.db_name, &invocation.sql);
                messages.push(Message::environment(wrap_tool_response(&render_tool_response(&outcome))));
                tool_records.push(ToolRecord { turn, invocation, outcome: outcome.into() });
            }
            TurnAction::Answer(_) => {
                termination = Termination::Answered;
                break;
            }
            TurnAction::Void => {
                void_turns.push(turn);
                if turn + 1 < cfg.max_turns {
                    messages.push(Message::environment(cfg.rethink_text.clone()));
                }
            }
        }
    }

    let token_log = policy_tokens.map(|generated| {
        let mut log = Vec::new();
        let mut gen = generated.into_iter().peekable();
        for (i, m) in messages.iter().enumerate() {
            match gen.peek() {
                Some((idx, _)) if *idx == i => {
                    let (_, tokens) = gen.next().expect("peeked");
                    log.extend(tokens.into_iter().map(|t| TokenEntry {
                        message_index: i,
                        token_id: t.token_id,
                        logprob: Some(t.logprob),
                        loss_mask: 0,
                    }));
                }
                _ => log.extend(byte_entries(i, &m.text)),
            }
        }
        log
    });

    let mut traj = Trajectory {
        prompt_id: prompt.id.clone(),
        member,
        messages,
        tool_records,
        termination,
        turns_used,
        void_turns,
        context_overflow,
        policy_error,
        token_log,
        reward: None,
    };
    if traj.token_log.is_some() {
        traj = mask_tokens(traj).expect("token log present");
    }
    traj
}

/// `group_size` independent rollouts of one prompt, member `i` sampled with
/// seed `cfg.seed + i`. Members run in parallel; output order is by member.
pub fn run_group(
    prompt: &Prompt,
    policy: &dyn PolicyEndpoint,
    sandbox: &dyn SandboxClient,
    cfg: &RolloutConfig,
) -> Vec<Trajectory> {
    (0..cfg.group_size)
        .into_par_iter()
        .map(|i| run_member(prompt, i, cfg.seed.wrapping_add(i as u64), policy, sandbox, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trajectory `{0}` has no token data; the endpoint did not report logprobs")]
pub struct MissingTokenData(pub String);

/// Set `loss_mask` to 1 on tokens the policy generated and 0 everywhere else.
pub fn mask_tokens(mut traj: Trajectory) -> Result<Trajectory, MissingTokenData> {
    let Some(log) = traj.token_log.as_mut() else {
        return Err(MissingTokenData(traj.prompt_id.clone()));
    };
    for entry in log.iter_mut() {
        let origin = traj.messages.get(entry.message_index).map(|m| m.origin);
        entry.loss_mask = u8::from(origin == Some(Origin::Policy));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::mock::ScriptedPolicy;
    use super::*;
    use crate::sandbox::{Sandbox, SandboxConfig};

    fn sandbox() -> (tempfile::TempDir, Sandbox) {
        let dir = tempfile::tempdir().unwrap();
        crate::demo::write_demo_databases(dir.path()).unwrap();
        let sb = Sandbox::new(SandboxConfig::new(dir.path())).unwrap();
        (dir, sb)
    }

    fn prompt() -> Prompt {
        Prompt::new("p0", "sys", "question")
    }

    const CALL: &str = "<think>check</think>\n<tool_call>\n{\"name\": \"sql-execute_sql_query\", \"arguments\": {\"db_name\": \"toy\", \"sql\": \"SELECT COUNT(*) FROM t\"}}\n</tool_call>";
    const ANSWER: &str = "<think>done</think>\n<answer>```sql\nSELECT COUNT(*) FROM t\n```</answer>";

    #[test]
    fn context_is_plain_concatenation() {
        assert_eq!(build_context("s", "u", &[]).len(), 2);
        let hist = vec![Message::assistant("a"), Message::environment("e")];
        let ctx = build_context("s", "u", &hist);
        assert_eq!(ctx[2..], hist[..]);
        assert_eq!(ctx[0].role, Role::System);
        assert_eq!(ctx[1].origin, Origin::Prompt);
    }

    #[test]
    fn call_then_answer() {
        let (_d, sb) = sandbox();
        let policy = ScriptedPolicy::new([CALL, ANSWER]);
        let t = run_rollout(&prompt(), &policy, &sb, &RolloutConfig::default());
        assert_eq!(t.termination, Termination::Answered);
        assert_eq!(t.turns_used, 2);
        assert_eq!(t.tool_records.len(), 1);
        assert_eq!(
            t.messages[3].text,
            "<tool_response>\nThe result is: {\"columns\": [\"COUNT(*)\"], \"data\": [{\"COUNT(*)\": 25}]}\n</tool_response>"
        );
        assert!(t.void_turns.is_empty());
    }

    #[test]
    fn void_turns_get_rethink_except_last() {
        let (_d, sb) = sandbox();
        let policy = ScriptedPolicy::repeating("<think>hmm</think>");
        let cfg = RolloutConfig { max_turns: 3, ..Default::default() };
        let t = run_rollout(&prompt(), &policy, &sb, &cfg);
        assert_eq!(t.termination, Termination::BudgetExhausted);
        assert_eq!(t.turns_used, 3);
        assert_eq!(t.rethink_count(RETHINK_TEXT), 2);
        assert_eq!(t.void_turns, vec![0, 1, 2]);
    }

    #[test]
    fn malformed_call_takes_rethink_branch() {
        let (_d, sb) = sandbox();
        let bad = "<think>x</think><tool_call>{not json</tool_call>";
        let policy = ScriptedPolicy::new([bad, ANSWER]);
        let t = run_rollout(&prompt(), &policy, &sb, &RolloutConfig::default());
        assert!(t.tool_records.is_empty());
        assert_eq!(t.messages[3].text, RETHINK_TEXT);
        assert_eq!(t.termination, Termination::Answered);
    }

    #[test]
    fn unclosed_call_is_closed() {
        let (_d, sb) = sandbox();
        let stripped = CALL.strip_suffix("</tool_call>").unwrap();
        let policy = ScriptedPolicy::new([stripped, ANSWER]);
        let t = run_rollout(&prompt(), &policy, &sb, &RolloutConfig::default());
        assert_eq!(t.messages[2].text, CALL);
        assert_eq!(t.tool_records.len(), 1);
    }

    #[test]
    fn sql_errors_are_fed_back_not_fatal() {
        let (_d, sb) = sandbox();
        let call = CALL.replace("FROM t", "FROM nope");
        let policy = ScriptedPolicy::new([call.as_str(), ANSWER]);
        let t = run_rollout(&prompt(), &policy, &sb, &RolloutConfig::default());
        assert!(t.messages[3].text.contains("\"error\": \"SqlError: no such table: nope\""));
        assert_eq!(t.termination, Termination::Answered);
    }

    struct Failing;
    impl PolicyEndpoint for Failing {
        fn generate(&self, _: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
            Err(PolicyError::Unreachable("down".into()))
        }
    }

    #[test]
    fn endpoint_failure_becomes_policy_error() {
        let (_d, sb) = sandbox();
        let cfg = RolloutConfig { retry_backoff_ms: 0, ..Default::default() };
        let t = run_rollout(&prompt(), &Failing, &sb, &cfg);
        assert_eq!(t.termination, Termination::PolicyError);
        assert_eq!(t.turns_used, 0);
        assert!(t.policy_error.unwrap().contains("down"));
    }

    #[test]
    fn mask_needs_token_data() {
        let (_d, sb) = sandbox();
        let t = run_rollout(&prompt(), &ScriptedPolicy::new([ANSWER]), &sb, &RolloutConfig::default());
        assert!(t.token_log.is_none());
        assert!(mask_tokens(t).is_err());
    }

    #[test]
    fn normalize_reply_cases() {
        assert_eq!(normalize_reply("<tool_call>{}", "<|im_end|>"), "<tool_call>{}</tool_call>");
        assert_eq!(normalize_reply("<answer>x</answer><|im_end|>", "<|im_end|>"), "<answer>x</answer>");
        assert_eq!(normalize_reply("<tool_call>{}</tool_call>", "<|im_end|>"), "<tool_call>{}</tool_call>");
    }

    #[test]
    fn config_validation() {
        assert!(RolloutConfig::default().validate().is_ok());
        assert!(RolloutConfig { max_turns: 0, ..Default::default() }.validate().is_err());
        assert!(RolloutConfig { group_size: 0, ..Default::default() }.validate().is_err());
        assert_eq!(RolloutConfig::eval().temperature, 0.0);
        assert_eq!(RolloutConfig::default().stop_sequences(), vec!["</tool_call>", "<|im_end|>"]);
    }
}
