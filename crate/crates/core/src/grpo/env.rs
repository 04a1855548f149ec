//! A scripted miniature text-to-SQL task for exercising the training loop.
//!
//! Each episode hides one of `n_values` answers. The question comes with a
//! hint that is right with probability `hint_accuracy`. The policy can answer
//! directly, probe the database (which reveals the answer), emit a void turn,
//! or answer with SQL that does not execute. Rewards follow the same gated
//! table as real trajectories. With probability `noise` an episode has its
//! first turn forced void, whatever the policy generated.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::toy::{analytic_gradient, toy_loss, ToyBatch, ToyPolicy, ToySequence, ToyStep};
use super::{filter_trajectories, FilterPolicy, QualityCriteria, RolloutGroup, Scored};
use crate::reward::{compose, Judgement, RewardBreakdown, RewardConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToyAction {
    Answer(usize),
    Probe,
    Void,
    /// An answer whose SQL fails to execute.
    BadSql,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiniSqlEnv {
    pub n_values: usize,
    pub max_turns: usize,
    pub hint_accuracy: f64,
    pub noise: f64,
}

impl Default for MiniSqlEnv {
    fn default() -> Self {
        MiniSqlEnv { n_values: 4, max_turns: 6, hint_accuracy: 0.75, noise: 0.0 }
    }
}

impl MiniSqlEnv {
    /// Hint states `0..n`, then revealed states `n..2n`.
    pub fn n_states(&self) -> usize {
        2 * self.n_values
    }

    pub fn n_actions(&self) -> usize {
        self.n_values + 3
    }

    pub fn hint_state(&self, hint: usize) -> usize {
        hint
    }

    pub fn revealed_state(&self, value: usize) -> usize {
        self.n_values + value
    }

    pub fn action(&self, index: usize) -> ToyAction {
        let k = self.n_values;
        match index {
            i if i < k => ToyAction::Answer(i),
            i if i == k => ToyAction::Probe,
            i if i == k + 1 => ToyAction::Void,
            _ => ToyAction::BadSql,
        }
    }

    pub fn action_index(&self, action: ToyAction) -> usize {
        let k = self.n_values;
        match action {
            ToyAction::Answer(i) => i,
            ToyAction::Probe => k,
            ToyAction::Void => k + 1,
            ToyAction::BadSql => k + 2,
        }
    }

    /// Starting point resembling an instruction-tuned model: void turns and
    /// broken SQL are unlikely, and after a probe the revealed value is the
    /// most likely answer. Everything else is uniform.
    pub fn initial_policy(&self) -> ToyPolicy {
        let mut p = ToyPolicy::uniform(self.n_states(), self.n_actions());
        for s in 0..self.n_states() {
            p.set(s, self.action_index(ToyAction::Void), -2.0);
            p.set(s, self.action_index(ToyAction::BadSql), -2.0);
        }
        for v in 0..self.n_values {
            p.set(self.revealed_state(v), self.action_index(ToyAction::Answer(v)), 2.0);
        }
        p
    }

    /// Draw the hidden value and the hint shown with the question.
    pub fn draw_task(&self, rng: &mut impl RngCore) -> (usize, usize) {
        let hidden = rng.random_range(0..self.n_values);
        let hint = if self.n_values == 1 || rng.random_bool(self.hint_accuracy) {
            hidden
        } else {
            let other = rng.random_range(0..self.n_values - 1);
            if other >= hidden {
                other + 1
            } else {
                other
            }
        };
        (hidden, hint)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_values == 0 || self.max_turns == 0 {
            return Err("n_values and max_turns must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hint_accuracy) || !(0.0..=1.0).contains(&self.noise) {
            return Err("hint_accuracy and noise must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// One rollout in the toy environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<ToyStep>,
    pub void_turns: Vec<usize>,
    pub final_action: Option<ToyAction>,
    pub hidden: usize,
    pub reward: RewardBreakdown,
}

impl Episode {
    pub fn run(
        env: &MiniSqlEnv,
        policy: &ToyPolicy,
        hidden: usize,
        hint: usize,
        noisy: bool,
        reward_cfg: &RewardConfig,
        rng: &mut impl RngCore,
    ) -> Episode {
        let mut state = env.hint_state(hint);
        let mut steps = Vec::new();
        let mut void_turns = Vec::new();
        let mut final_action = None;
        for turn in 0..env.max_turns {
            let (a, lp) = policy.sample(state, rng);
            steps.push(ToyStep { state, action: a, old_logprob: lp, mask: 1 });
            if noisy && turn == 0 {
                void_turns.push(turn);
                continue;
            }
            match env.action(a) {
                ToyAction::Probe => state = env.revealed_state(hidden),
                ToyAction::Void => void_turns.push(turn),
                answer @ (ToyAction::Answer(_) | ToyAction::BadSql) => {
                    final_action = Some(answer);
                    break;
                }
            }
        }
        let judgement = Judgement {
            format_ok: void_turns.is_empty() && final_action.is_some(),
            executable: matches!(final_action, Some(ToyAction::Answer(_))),
            correct: final_action == Some(ToyAction::Answer(hidden)),
        };
        Episode { steps, void_turns, final_action, hidden, reward: compose(judgement, reward_cfg) }
    }
}

impl Scored for Episode {
    fn reward(&self) -> f64 {
        self.reward.total
    }

    fn criteria(&self) -> QualityCriteria {
        QualityCriteria {
            format_valid: self.void_turns.is_empty(),
            answered: self.final_action.is_some(),
            no_void_turns: self.void_turns.is_empty(),
            executable_answer: self.reward.executable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub group_size: usize,
    pub prompts_per_step: usize,
    /// Drop low-quality rollouts before the update.
    pub filter: bool,
    pub filter_policy: FilterPolicy,
    pub clip_epsilon: Option<f64>,
    pub seed: u64,
    pub env: MiniSqlEnv,
    pub reward: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 0.5,
            group_size: 5,
            prompts_per_step: 8,
            filter: true,
            filter_policy: FilterPolicy::default(),
            clip_epsilon: None,
            seed: 0,
            env: MiniSqlEnv::default(),
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean total reward of every rollout sampled at this step.
    pub mean_reward: f64,
    pub kept_fraction: f64,
    /// NaN when nothing survived the filter.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub curve: Vec<CurvePoint>,
    pub policy: ToyPolicy,
}

impl TrainSummary {
    /// Mean reward over the last `window` steps.
    pub fn final_reward(&self, window: usize) -> f64 {
        let tail = &self.curve[self.curve.len().saturating_sub(window)..];
        tail.iter().map(|p| p.mean_reward).sum::<f64>() / tail.len().max(1) as f64
    }

    /// Moving average of the reward curve.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let r: Vec<f64> = self.curve.iter().map(|p| p.mean_reward).collect();
        if window == 0 || r.len() < window {
            return Vec::new();
        }
        r.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }

    /// The last moving-average value sits at least `margin` below the peak.
    pub fn has_declining_tail(&self, window: usize, margin: f64) -> bool {
        let ma = self.moving_average(window);
        match (ma.iter().cloned().reduce(f64::max), ma.last()) {
            (Some(peak), Some(last)) => peak - last >= margin,
            _ => false,
        }
    }
}

/// Group rollouts, optional filtering, group-relative advantages and plain
/// gradient descent on the surrogate loss, repeated `cfg.steps` times.
pub fn train_toy(cfg: &TrainConfig) -> TrainSummary {
    let env = &cfg.env;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = env.initial_policy();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut batch = ToyBatch { sequences: Vec::new(), clip_epsilon: cfg.clip_epsilon };
        let mut reward_sum = 0.0;
        let mut sampled = 0usize;
        let mut kept = 0usize;
        for prompt in 0..cfg.prompts_per_step {
            let (hidden, hint) = env.draw_task(&mut rng);
            let episodes: Vec<Episode> = (0..cfg.group_size)
                .map(|_| {
                    let noisy = rng.random_bool(env.noise);
                    Episode::run(env, &policy, hidden, hint, noisy, &cfg.reward, &mut rng)
                })
                .collect();
            reward_sum += episodes.iter().map(|e| e.reward.total).sum::<f64>();
            sampled += episodes.len();
            let group = RolloutGroup::new(format!("{step}-{prompt}"), episodes, cfg.filter_policy.epsilon_std);
            let group = if cfg.filter {
                match filter_trajectories(group, &cfg.filter_policy) {
                    Ok(g) => g,
                    Err(_) => continue,
                }
            } else {
                group
            };
            for ((ep, adv), k) in group.trajectories.into_iter().zip(group.advantages).zip(group.kept) {
                if k {
                    kept += 1;
                    batch.sequences.push(ToySequence { steps: ep.steps, advantage: adv });
                }
            }
        }
        let loss = if batch.sequences.is_empty() {
            f64::NAN
        } else {
            let loss = toy_loss(&policy, &batch).expect("unmasked steps present");
            let grad = analytic_gradient(&policy, &batch).expect("unmasked steps present");
            for (l, g) in policy.logits.iter_mut().zip(grad) {
                *l -= cfg.lr * g;
            }
            loss
        };
        curve.push(CurvePoint {
            step,
            mean_reward: reward_sum / sampled.max(1) as f64,
            kept_fraction: kept as f64 / sampled.max(1) as f64,
            loss,
        });
    }
    TrainSummary { curve, policy }
}

/// CSV with header `step,mean_reward,kept_fraction,loss`.
pub fn write_curve_csv(mut out: impl Write, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "step,mean_reward,kept_fraction,loss")?;
    for p in curve {
        writeln!(out, "{},{},{},{}", p.step, p.mean_reward, p.kept_fraction, p.loss)?;
    }
    out.flush()
}
