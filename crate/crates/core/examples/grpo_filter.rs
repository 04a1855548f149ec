//! Group advantages, quality filtering and the surrogate loss on one group.
//!
//! `cargo run --example grpo_filter`

use tir_sql::grpo::{
    filter_trajectories, quality_score, surrogate_loss, FilterPolicy, LossInputs, QualityCriteria, RolloutGroup,
    Scored, SequenceInputs,
};

#[derive(Debug, Clone)]
struct Rollout {
    reward: f64,
    criteria: QualityCriteria,
}

impl Scored for Rollout {
    fn reward(&self) -> f64 {
        self.reward
    }
    fn criteria(&self) -> QualityCriteria {
        self.criteria
    }
}

fn rollout(reward: f64, format_valid: bool, answered: bool, no_void_turns: bool, executable_answer: bool) -> Rollout {
    Rollout { reward, criteria: QualityCriteria { format_valid, answered, no_void_turns, executable_answer } }
}

fn main() {
    let fp = FilterPolicy::default();
    let group = RolloutGroup::new(
        "q0",
        vec![
            rollout(1.2, true, true, true, true),
            rollout(-1.0, true, true, true, true),
            rollout(1.2, true, true, false, true),
            rollout(0.0, true, true, false, false),
            rollout(-0.1, false, false, false, false),
        ],
        fp.epsilon_std,
    );
    println!("rewards:    {:?}", group.rewards);
    println!("advantages: {:?}", group.advantages.iter().map(|a| (a * 1e3).round() / 1e3).collect::<Vec<_>>());
    for t in &group.trajectories {
        print!("{:.2} ", quality_score(&t.criteria, &fp.weights));
    }
    println!("<- quality scores, tau = {}", fp.tau);

    let kept = filter_trajectories(group, &fp).expect("something survives");
    println!("kept:       {:?}", kept.kept);
    println!("advantages: {:?}", kept.advantages.iter().map(|a| (a * 1e3).round() / 1e3).collect::<Vec<_>>());

    let sequences = kept
        .advantages
        .iter()
        .map(|&advantage| SequenceInputs {
            new_logprobs: vec![-1.0 + 0.1 * advantage, -1.0 + 0.05 * advantage, -0.2],
            old_logprobs: vec![-1.0, -1.0, -0.2],
            mask: vec![1, 1, 0],
            advantage,
            ref_logprobs: None,
        })
        .collect();
    let out = surrogate_loss(&LossInputs { sequences, clip_epsilon: None }).expect("loss");
    println!("loss {:.5} over {} tokens", out.loss, out.unmasked_tokens);
}
