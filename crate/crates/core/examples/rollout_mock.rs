//! A multi-turn rollout with a scripted policy, including a void turn.
//!
//! `cargo run --example rollout_mock`

use tir_sql::demo::write_demo_databases;
use tir_sql::reward::{total_reward, RewardConfig};
use tir_sql::rollout::mock::{answer_turn, tool_call_turn, ScriptedPolicy};
use tir_sql::rollout::{run_rollout, Prompt, RolloutConfig};
use tir_sql::sandbox::{Sandbox, SandboxConfig};

fn main() {
    let dir = tempfile::tempdir().expect("tempdir");
    write_demo_databases(dir.path()).expect("demo databases");
    let sandbox = Sandbox::new(SandboxConfig::new(dir.path())).expect("sandbox");

    let policy = ScriptedPolicy::new([
        "<think>Not sure yet.</think>".to_string(),
        tool_call_turn("toy", "SELECT MAX(a) FROM t"),
        answer_turn("SELECT MAX(a) FROM t"),
    ])
    .with_token_data(-0.1);
    let prompt = Prompt::new("demo", "You are a SQL assistant.", "What is the largest value of a in t?");
    let traj = run_rollout(&prompt, &policy, &sandbox, &RolloutConfig::default());

    for m in &traj.messages[2..] {
        println!("--- {:?}/{:?}\n{}", m.role, m.origin, m.text);
    }
    println!("termination: {:?}, void turns: {:?}", traj.termination, traj.void_turns);
    let trained = traj.token_log.as_ref().map_or(0, |l| l.iter().filter(|e| e.loss_mask == 1).count());
    println!("tokens with loss: {trained} of {}", traj.token_log.as_ref().map_or(0, Vec::len));
    let reward = total_reward(&traj, "toy", "SELECT MAX(a) FROM t", &sandbox, &RewardConfig::default()).unwrap();
    println!("reward: {reward:?}");
}
