//! Group-relative advantages, quality filtering and the KL-free surrogate loss.

mod env;
mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::parse_assistant_turn;
use crate::rollout::{Termination, TokenEntry, Trajectory};

pub use env::{train_toy, write_curve_csv, CurvePoint, Episode, MiniSqlEnv, ToyAction, TrainConfig, TrainSummary};
pub use toy::{
    analytic_gradient, finite_difference_gradient, loss_gradient_check, random_batch, toy_loss, ToyBatch, ToyPolicy,
    ToySequence, ToyStep,
};

pub const DEFAULT_EPSILON_STD: f64 = 1e-6;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn std_dev(xs: &[f64], mean: f64) -> f64 {
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// `(r - mean) / (std + eps)` with the population std. A group whose rewards
/// are all equal gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], epsilon_std: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return vec![0.0; rewards.len()];
    }
    let m = mean(rewards);
    let sd = std_dev(rewards, m);
    rewards.iter().map(|r| (r - m) / (sd + epsilon_std)).collect()
}

/// Binary facts a trajectory is scored on before it may enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityCriteria {
    /// Every assistant turn is well-formed on its own.
    pub format_valid: bool,
    pub answered: bool,
    /// No turn needed a rethink.
    pub no_void_turns: bool,
    /// The final answer executed, as judged by the (gated) reward.
    pub executable_answer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterWeights {
    pub format_valid: f64,
    pub answered: f64,
    pub no_void_turns: f64,
    pub executable_answer: f64,
}

impl Default for FilterWeights {
    fn default() -> Self {
        FilterWeights { format_valid: 0.25, answered: 0.25, no_void_turns: 0.25, executable_answer: 0.25 }
    }
}

impl FilterWeights {
    fn as_array(&self) -> [f64; 4] {
        [self.format_valid, self.answered, self.no_void_turns, self.executable_answer]
    }
}

/// Weighted sum of the satisfied criteria, in `[0, 1]`.
pub fn quality_score(c: &QualityCriteria, w: &FilterWeights) -> f64 {
    let flags = [c.format_valid, c.answered, c.no_void_turns, c.executable_answer];
    flags.iter().zip(w.as_array()).filter(|(f, _)| **f).fold(0.0, |acc, (_, w)| acc + w)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    /// A trajectory is kept iff its score is strictly greater than `tau`.
    pub tau: f64,
    pub weights: FilterWeights,
    /// Normalize advantages over the kept members only (otherwise the
    /// pre-filter advantages of the survivors are used unchanged).
    pub recompute_advantages: bool,
    pub epsilon_std: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            tau: 0.5,
            weights: FilterWeights::default(),
            recompute_advantages: true,
            epsilon_std: DEFAULT_EPSILON_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid filter policy: {0}")]
pub struct FilterPolicyError(pub String);

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), FilterPolicyError> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(FilterPolicyError(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        let w = self.weights.as_array();
        if w.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(FilterPolicyError("weights must be >= 0".into()));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(FilterPolicyError(format!("weights must sum to 1, got {sum}")));
        }
        if self.epsilon_std.is_nan() || self.epsilon_std <= 0.0 {
            return Err(FilterPolicyError("epsilon_std must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that can be grouped, scored and filtered.
pub trait Scored {
    fn reward(&self) -> f64;
    fn criteria(&self) -> QualityCriteria;
}

impl Scored for Trajectory {
    /// Total reward; unscored trajectories count as 0.
    fn reward(&self) -> f64 {
        self.reward.as_ref().map_or(0.0, |r| r.total)
    }

    fn criteria(&self) -> QualityCriteria {
        QualityCriteria {
            format_valid: self.assistant_turns().all(|m| parse_assistant_turn(&m.text).format_ok),
            answered: self.termination == Termination::Answered,
            no_void_turns: self.void_turns.is_empty(),
            executable_answer: self.reward.as_ref().is_some_and(|r| r.executable),
        }
    }
}

/// The rollouts of one prompt with their rewards, advantages and verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup<T> {
    pub prompt_id: String,
    pub trajectories: Vec<T>,
    pub rewards: Vec<f64>,
    /// Zero for members that are not kept.
    pub advantages: Vec<f64>,
    pub kept: Vec<bool>,
}

impl<T: Scored> RolloutGroup<T> {
    /// All members kept, advantages over the whole group.
    pub fn new(prompt_id: impl Into<String>, trajectories: Vec<T>, epsilon_std: f64) -> Self {
        let rewards: Vec<f64> = trajectories.iter().map(Scored::reward).collect();
        let advantages = group_advantages(&rewards, epsilon_std);
        let kept = vec![true; trajectories.len()];
        RolloutGroup { prompt_id: prompt_id.into(), trajectories, rewards, advantages, kept }
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|k| **k).count()
    }

    pub fn scores(&self, weights: &FilterWeights) -> Vec<f64> {
        self.trajectories.iter().map(|t| quality_score(&t.criteria(), weights)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no trajectory of group `{prompt_id}` passed the filter")]
pub struct EmptyAfterFilter {
    pub prompt_id: String,
}

/// Keep members whose quality score is strictly above `tau`. Members already
/// dropped stay dropped, so filtering twice changes nothing.
pub fn filter_trajectories<T: Scored>(
    mut group: RolloutGroup<T>,
    fp: &FilterPolicy,
) -> Result<RolloutGroup<T>, EmptyAfterFilter> {
    let scores = group.scores(&fp.weights);
    for (k, s) in group.kept.iter_mut().zip(&scores) {
        *k = *k && *s > fp.tau;
    }
    if group.kept_count() == 0 {
        return Err(EmptyAfterFilter { prompt_id: group.prompt_id });
    }
    if fp.recompute_advantages {
        let kept_rewards: Vec<f64> =
            group.rewards.iter().zip(&group.kept).filter(|(_, k)| **k).map(|(r, _)| *r).collect();
        let mut adv = group_advantages(&kept_rewards, fp.epsilon_std).into_iter();
        for (a, k) in group.advantages.iter_mut().zip(&group.kept) {
            *a = if *k { adv.next().expect("one per kept member") } else { 0.0 };
        }
    } else {
        for (a, k) in group.advantages.iter_mut().zip(&group.kept) {
            if !*k {
                *a = 0.0;
            }
        }
    }
    Ok(group)
}

/// Token data of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceInputs {
    /// Log-probabilities under the policy being optimized.
    pub new_logprobs: Vec<f64>,
    /// Log-probabilities recorded at rollout time.
    pub old_logprobs: Vec<f64>,
    pub mask: Vec<u8>,
    pub advantage: f64,
    /// Optional frozen reference model logprobs, for a reported KL only.
    pub ref_logprobs: Option<Vec<f64>>,
}

impl SequenceInputs {
    /// Policy tokens of a trajectory with `new = old`, ready for a first update.
    pub fn from_token_log(log: &[TokenEntry], advantage: f64) -> Self {
        let old: Vec<f64> = log.iter().map(|e| e.logprob.unwrap_or(0.0)).collect();
        SequenceInputs {
            new_logprobs: old.clone(),
            old_logprobs: old,
            mask: log.iter().map(|e| e.loss_mask).collect(),
            advantage,
            ref_logprobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossInputs {
    pub sequences: Vec<SequenceInputs>,
    /// PPO-style ratio clipping; off unless set.
    pub clip_epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossOutput {
    pub loss: f64,
    /// `ratio * advantage` (or its clipped form) per token; 0 where masked.
    pub per_token_terms: Vec<Vec<f64>>,
    pub unmasked_tokens: usize,
    /// Mean `exp(r) - r - 1` with `r = ref - new` over unmasked tokens.
    /// Reported only; it never enters `loss`.
    pub kl_to_reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("every token is masked; nothing to optimize")]
    DegenerateBatch,
    #[error("sequence {0}: logprob and mask lengths differ")]
    Misaligned(usize),
    #[error("sequence {0}: mask values must be 0 or 1")]
    BadMask(usize),
}

fn check_inputs(inputs: &LossInputs) -> Result<usize, LossError> {
    let mut unmasked = 0;
    for (i, s) in inputs.sequences.iter().enumerate() {
        let n = s.mask.len();
        if s.new_logprobs.len() != n
            || s.old_logprobs.len() != n
            || s.ref_logprobs.as_ref().is_some_and(|r| r.len() != n)
        {
            return Err(LossError::Misaligned(i));
        }
        if s.mask.iter().any(|m| *m > 1) {
            return Err(LossError::BadMask(i));
        }
        unmasked += s.mask.iter().filter(|m| **m == 1).count();
    }
    if unmasked == 0 {
        return Err(LossError::DegenerateBatch);
    }
    Ok(unmasked)
}

/// Per-token objective and its derivative with respect to the new logprob.
fn token_term(new: f64, old: f64, advantage: f64, clip: Option<f64>) -> (f64, f64) {
    let ratio = (new - old).exp();
    let unclipped = ratio * advantage;
    match clip {
        None => (unclipped, unclipped),
        Some(eps) => {
            let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
            if unclipped <= clipped {
                (unclipped, unclipped)
            } else {
                (clipped, 0.0)
            }
        }
    }
}

/// `-mean over unmasked tokens of exp(new - old) * A`. There is no KL term.
pub fn surrogate_loss(inputs: &LossInputs) -> Result<LossOutput, LossError> {
    let unmasked = check_inputs(inputs)?;
    let mut total = 0.0;
    let mut kl_total = 0.0;
    let mut have_ref = false;
    let mut per_token_terms = Vec::with_capacity(inputs.sequences.len());
    for s in &inputs.sequences {
        let mut terms = vec![0.0; s.mask.len()];
        for t in 0..s.mask.len() {
            if s.mask[t] == 0 {
                continue;
            }
            let (term, _) = token_term(s.new_logprobs[t], s.old_logprobs[t], s.advantage, inputs.clip_epsilon);
            terms[t] = term;
            total += term;
            if let Some(r) = &s.ref_logprobs {
                have_ref = true;
                let d = r[t] - s.new_logprobs[t];
                kl_total += d.exp() - d - 1.0;
            }
        }
        per_token_terms.push(terms);
    }
    let n = unmasked as f64;
    Ok(LossOutput {
        loss: -total / n,
        per_token_terms,
        unmasked_tokens: unmasked,
        kl_to_reference: have_ref.then_some(kl_total / n),
    })
}

/// Derivative of the loss with respect to every new logprob (0 where masked).
pub fn surrogate_loss_grad(inputs: &LossInputs) -> Result<Vec<Vec<f64>>, LossError> {
    let n = check_inputs(inputs)? as f64;
    Ok(inputs
        .sequences
        .iter()
        .map(|s| {
            (0..s.mask.len())
                .map(|t| {
                    if s.mask[t] == 0 {
                        0.0
                    } else {
                        let (_, d) = token_term(s.new_logprobs[t], s.old_logprobs[t], s.advantage, inputs.clip_epsilon);
                        -d / n
                    }
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone)]
    struct Item(f64, QualityCriteria);

    impl Scored for Item {
        fn reward(&self) -> f64 {
            self.0
        }
        fn criteria(&self) -> QualityCriteria {
            self.1
        }
    }

    const ALL: QualityCriteria =
        QualityCriteria { format_valid: true, answered: true, no_void_turns: true, executable_answer: true };
    const ONLY_FORMAT: QualityCriteria =
        QualityCriteria { format_valid: true, answered: false, no_void_turns: false, executable_answer: false };
    const TWO: QualityCriteria =
        QualityCriteria { format_valid: true, answered: true, no_void_turns: false, executable_answer: false };

    #[test]
    fn advantages_basic() {
        let a = group_advantages(&[1.0, -1.0], DEFAULT_EPSILON_STD);
        assert!((a[0] - 1.0).abs() < 1e-5 && (a[1] + 1.0).abs() < 1e-5);
        assert_eq!(group_advantages(&[0.5, 0.5, 0.5], DEFAULT_EPSILON_STD), vec![0.0; 3]);
        assert_eq!(group_advantages(&[0.7], DEFAULT_EPSILON_STD), vec![0.0]);
    }

    #[test]
    fn scores() {
        let w = FilterWeights::default();
        assert_eq!(quality_score(&ALL, &w), 1.0);
        assert_eq!(quality_score(&ONLY_FORMAT, &w), 0.25);
        let none = QualityCriteria { format_valid: false, ..ONLY_FORMAT };
        assert_eq!(quality_score(&none, &w), 0.0);
    }

    #[test]
    fn strict_threshold() {
        let fp = FilterPolicy::default();
        let g = RolloutGroup::new("p", vec![Item(1.2, ALL), Item(-0.1, ONLY_FORMAT), Item(0.0, ALL)], 1e-6);
        let f = filter_trajectories(g, &fp).unwrap();
        assert_eq!(f.kept, vec![true, false, true]);
        assert_eq!(f.advantages[1], 0.0);
        assert!((f.advantages[0] - 1.0).abs() < 1e-5);

        let boundary = RolloutGroup::new("b", vec![Item(1.0, TWO), Item(0.0, TWO)], 1e-6);
        assert_eq!(filter_trajectories(boundary, &fp).unwrap_err().prompt_id, "b");

        let zero = FilterPolicy { tau: 0.0, ..Default::default() };
        let g = RolloutGroup::new("z", vec![Item(1.0, ONLY_FORMAT), Item(0.0, ALL)], 1e-6);
        assert_eq!(filter_trajectories(g, &zero).unwrap().kept, vec![true, true]);
    }

    #[test]
    fn advantages_without_recompute() {
        let fp = FilterPolicy { recompute_advantages: false, ..Default::default() };
        let g = RolloutGroup::new("p", vec![Item(1.0, ALL), Item(0.0, ONLY_FORMAT), Item(0.5, ALL)], 1e-6);
        let before = g.advantages.clone();
        let f = filter_trajectories(g, &fp).unwrap();
        assert_eq!(f.advantages, vec![before[0], 0.0, before[2]]);
    }

    #[test]
    fn loss_closed_forms() {
        let seq = |new: Vec<f64>, old: Vec<f64>, a: f64| SequenceInputs {
            mask: vec![1; new.len()],
            new_logprobs: new,
            old_logprobs: old,
            advantage: a,
            ref_logprobs: None,
        };
        let equal = LossInputs {
            sequences: vec![seq(vec![-1.0, -2.0], vec![-1.0, -2.0], 1.0), seq(vec![-0.5, -0.1], vec![-0.5, -0.1], -1.0)],
            clip_epsilon: None,
        };
        assert_eq!(surrogate_loss(&equal).unwrap().loss, 0.0);

        let one = LossInputs { sequences: vec![seq(vec![2f64.ln() - 1.0], vec![-1.0], 1.0)], clip_epsilon: None };
        assert!((surrogate_loss(&one).unwrap().loss + 2.0).abs() < 1e-12);

        let masked = LossInputs {
            sequences: vec![SequenceInputs { mask: vec![0, 0], ..seq(vec![0.0, 0.0], vec![0.0, 0.0], 1.0) }],
            clip_epsilon: None,
        };
        assert_eq!(surrogate_loss(&masked).unwrap_err(), LossError::DegenerateBatch);
    }

    #[test]
    fn clipping_caps_the_ratio() {
        let inputs = LossInputs {
            sequences: vec![SequenceInputs {
                new_logprobs: vec![0.0],
                old_logprobs: vec![-1.0],
                mask: vec![1],
                advantage: 1.0,
                ref_logprobs: None,
            }],
            clip_epsilon: Some(0.2),
        };
        let out = surrogate_loss(&inputs).unwrap();
        assert!((out.loss + 1.2).abs() < 1e-12);
        assert_eq!(surrogate_loss_grad(&inputs).unwrap()[0][0], 0.0);
    }

    #[test]
    fn reference_kl_is_reported_not_used() {
        let mk = |r: Option<Vec<f64>>| LossInputs {
            sequences: vec![SequenceInputs {
                new_logprobs: vec![-0.3, -1.0],
                old_logprobs: vec![-0.5, -1.1],
                mask: vec![1, 1],
                advantage: 0.7,
                ref_logprobs: r,
            }],
            clip_epsilon: None,
        };
        let a = surrogate_loss(&mk(None)).unwrap();
        let b = surrogate_loss(&mk(Some(vec![-5.0, -0.01]))).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert!(a.kl_to_reference.is_none());
        assert!(b.kl_to_reference.unwrap() > 0.0);
    }

    #[test]
    fn policy_validation() {
        assert!(FilterPolicy::default().validate().is_ok());
        assert!(FilterPolicy { tau: 1.5, ..Default::default() }.validate().is_err());
        let w = FilterWeights { format_valid: 0.5, ..Default::default() };
        assert!(FilterPolicy { weights: w, ..Default::default() }.validate().is_err());
    }
}
