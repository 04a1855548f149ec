//! Deterministic stand-ins for a policy endpoint.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GeneratedToken, Message, PolicyEndpoint, PolicyError, PolicyReply, PolicyRequest, Role};

fn assistant_turns(messages: &[Message]) -> usize {
    messages.iter().filter(|m| m.role == Role::Assistant).count()
}

/// One token per byte with a fixed logprob.
pub fn byte_tokens(text: &str, logprob: f64) -> Vec<GeneratedToken> {
    text.bytes().map(|b| GeneratedToken { token_id: Some(b as u32), logprob }).collect()
}

fn reply(text: &str, token_logprob: Option<f64>) -> PolicyReply {
    let mut r = PolicyReply::text(text);
    r.tokens = token_logprob.map(|lp| byte_tokens(text, lp));
    r
}

/// Replays fixed turns: the n-th assistant turn gets `turns[n]`.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    turns: Vec<String>,
    repeat_last: bool,
    token_logprob: Option<f64>,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(turns: impl IntoIterator<Item = S>) -> Self {
        ScriptedPolicy { turns: turns.into_iter().map(Into::into).collect(), repeat_last: false, token_logprob: None }
    }

    /// Emit the same text on every turn.
    pub fn repeating(text: impl Into<String>) -> Self {
        ScriptedPolicy { turns: vec![text.into()], repeat_last: true, token_logprob: None }
    }

    /// Report byte-level token data with the given logprob.
    pub fn with_token_data(mut self, logprob: f64) -> Self {
        self.token_logprob = Some(logprob);
        self
    }
}

impl PolicyEndpoint for ScriptedPolicy {
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        let n = assistant_turns(&request.messages);
        let text = match self.turns.get(n) {
            Some(t) => t,
            None if self.repeat_last && !self.turns.is_empty() => self.turns.last().expect("non-empty"),
            None => return Err(PolicyError::Malformed(format!("script has no turn {n}"))),
        };
        Ok(reply(text, self.token_logprob))
    }
}

/// Picks one of several scripts per rollout from the sampling seed. At
/// temperature 0 it always plays the first script.
#[derive(Debug, Clone)]
pub struct SampledScriptPolicy {
    scripts: Vec<ScriptedPolicy>,
}

impl SampledScriptPolicy {
    pub fn new(scripts: Vec<ScriptedPolicy>) -> Self {
        assert!(!scripts.is_empty(), "at least one script");
        SampledScriptPolicy { scripts }
    }

    pub fn pick(&self, request: &PolicyRequest) -> usize {
        if request.sampling.temperature == 0.0 {
            return 0;
        }
        let seed = request.sampling.seed.unwrap_or(0);
        ChaCha8Rng::seed_from_u64(seed).random_range(0..self.scripts.len())
    }
}

impl PolicyEndpoint for SampledScriptPolicy {
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        self.scripts[self.pick(request)].generate(request)
    }
}

/// Wraps a closure.
pub struct FnPolicy<F>(pub F);

impl<F> PolicyEndpoint for FnPolicy<F>
where
    F: Fn(&PolicyRequest) -> Result<PolicyReply, PolicyError> + Send + Sync,
{
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        (self.0)(request)
    }
}

pub fn answer_turn(sql: &str) -> String {
    format!("<think>\nThe query is ready.\n</think>\n<answer>\n```sql\n{sql}\n```\n</answer>")
}

pub fn tool_call_turn(db_name: &str, sql: &str) -> String {
    let call = serde_json::json!({
        "name": crate::protocol::SQL_TOOL_NAME,
        "arguments": { "db_name": db_name, "sql": sql },
    });
    format!("<think>\nLet me check the query against the database.\n</think>\n<tool_call>\n{call}\n</tool_call>")
}

/// Knows the gold query for each question. It validates the query with one
/// tool call, then answers with it.
#[derive(Debug, Clone, Default)]
pub struct OraclePolicy {
    gold: HashMap<String, (String, String)>,
}

impl OraclePolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, question: impl Into<String>, db_name: impl Into<String>, sql: impl Into<String>) {
        self.gold.insert(question.into(), (db_name.into(), sql.into()));
    }

    fn lookup(&self, user: &str) -> Option<&(String, String)> {
        // Longest match first so that one question being a prefix of another is harmless.
        self.gold
            .iter()
            .filter(|(q, _)| user.contains(q.as_str()))
            .max_by_key(|(q, _)| q.len())
            .map(|(_, v)| v)
    }
}

impl PolicyEndpoint for OraclePolicy {
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        let user = request
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.text.as_str())
            .unwrap_or_default();
        let (db, sql) = self.lookup(user).ok_or_else(|| PolicyError::Malformed("question not in oracle".into()))?;
        let text = match assistant_turns(&request.messages) {
            0 => tool_call_turn(db, sql),
            _ => answer_turn(sql),
        };
        Ok(PolicyReply::text(text))
    }
}

/// Answers every question with the same SQL on the first turn.
#[derive(Debug, Clone)]
pub struct ConstantAnswerPolicy {
    pub sql: String,
}

impl ConstantAnswerPolicy {
    pub fn new(sql: impl Into<String>) -> Self {
        ConstantAnswerPolicy { sql: sql.into() }
    }
}

impl PolicyEndpoint for ConstantAnswerPolicy {
    fn generate(&self, _: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        Ok(PolicyReply::text(answer_turn(&self.sql)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::Sampling;

    fn request(n_assistant: usize, temperature: f64, seed: u64) -> PolicyRequest {
        let mut messages = vec![Message::system("s"), Message::user("How many rows are in t?")];
        for _ in 0..n_assistant {
            messages.push(Message::assistant("a"));
            messages.push(Message::environment("e"));
        }
        PolicyRequest {
            messages,
            sampling: Sampling { temperature, max_tokens: 10, stop_sequences: vec![], seed: Some(seed) },
        }
    }

    #[test]
    fn scripted_indexes_by_turn() {
        let p = ScriptedPolicy::new(["a", "b"]);
        assert_eq!(p.generate(&request(1, 0.6, 0)).unwrap().text, "b");
        assert!(p.generate(&request(2, 0.6, 0)).is_err());
        let r = ScriptedPolicy::repeating("x").generate(&request(5, 0.6, 0)).unwrap();
        assert_eq!(r.text, "x");
    }

    #[test]
    fn sampled_script_depends_on_seed_only() {
        let p = SampledScriptPolicy::new((0..4).map(|i| ScriptedPolicy::repeating(format!("s{i}"))).collect());
        assert_eq!(p.pick(&request(0, 0.0, 99)), 0);
        let picks: Vec<usize> = (0..32).map(|s| p.pick(&request(0, 0.6, s))).collect();
        assert!(picks.iter().any(|&i| i != picks[0]));
        for s in 0..8 {
            assert_eq!(p.pick(&request(0, 0.6, s)), p.pick(&request(3, 0.6, s)));
        }
    }

    #[test]
    fn oracle_calls_then_answers() {
        let mut o = OraclePolicy::new();
        o.insert("How many rows are in t?", "toy", "SELECT COUNT(*) FROM t");
        assert!(o.generate(&request(0, 0.0, 0)).unwrap().text.contains("<tool_call>"));
        assert!(o.generate(&request(1, 0.0, 0)).unwrap().text.contains("<answer>"));
    }

    #[test]
    fn token_data_is_bytewise() {
        let r = ScriptedPolicy::new(["ab"]).with_token_data(-0.5).generate(&request(0, 0.6, 0)).unwrap();
        assert_eq!(r.tokens.unwrap().len(), 2);
    }
}
