//! Tabular softmax policy with an analytic gradient of the surrogate loss.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{surrogate_loss, surrogate_loss_grad, LossError, LossInputs, SequenceInputs};

/// One logit per (state, action); `pi(a | s) = softmax(logits[s])[a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    pub logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        assert!(n_states > 0 && n_actions > 0);
        ToyPolicy { n_states, n_actions, logits: vec![0.0; n_states * n_actions] }
    }

    pub fn random(n_states: usize, n_actions: usize, scale: f64, rng: &mut impl RngCore) -> Self {
        let mut p = Self::uniform(n_states, n_actions);
        for l in &mut p.logits {
            *l = rng.random_range(-scale..scale);
        }
        p
    }

    pub fn index(&self, state: usize, action: usize) -> usize {
        state * self.n_actions + action
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn set(&mut self, state: usize, action: usize, logit: f64) {
        let i = self.index(state, action);
        self.logits[i] = logit;
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let row = self.row(state);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn logprob(&self, state: usize, action: usize) -> f64 {
        let row = self.row(state);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        row[action] - lse
    }

    /// Inverse-CDF sample; returns the action and its logprob.
    pub fn sample(&self, state: usize, rng: &mut impl RngCore) -> (usize, f64) {
        let probs = self.probs(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut action = probs.len() - 1;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                action = a;
                break;
            }
        }
        (action, self.logprob(state, action))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyStep {
    pub state: usize,
    pub action: usize,
    /// Logprob under the policy that produced the step.
    pub old_logprob: f64,
    pub mask: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySequence {
    pub steps: Vec<ToyStep>,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyBatch {
    pub sequences: Vec<ToySequence>,
    pub clip_epsilon: Option<f64>,
}

impl ToyBatch {
    /// Surrogate-loss inputs with the new logprobs taken from `policy`.
    pub fn loss_inputs(&self, policy: &ToyPolicy) -> LossInputs {
        LossInputs {
            sequences: self
                .sequences
                .iter()
                .map(|s| SequenceInputs {
                    new_logprobs: s.steps.iter().map(|st| policy.logprob(st.state, st.action)).collect(),
                    old_logprobs: s.steps.iter().map(|st| st.old_logprob).collect(),
                    mask: s.steps.iter().map(|st| st.mask).collect(),
                    advantage: s.advantage,
                    ref_logprobs: None,
                })
                .collect(),
            clip_epsilon: self.clip_epsilon,
        }
    }
}

pub fn toy_loss(policy: &ToyPolicy, batch: &ToyBatch) -> Result<f64, LossError> {
    surrogate_loss(&batch.loss_inputs(policy)).map(|o| o.loss)
}

/// d loss / d logits via `d log pi(a|s) / d logit[s][b] = [a == b] - pi(b|s)`.
pub fn analytic_gradient(policy: &ToyPolicy, batch: &ToyBatch) -> Result<Vec<f64>, LossError> {
    let dlp = surrogate_loss_grad(&batch.loss_inputs(policy))?;
    let mut grad = vec![0.0; policy.logits.len()];
    let probs: Vec<Vec<f64>> = (0..policy.n_states).map(|s| policy.probs(s)).collect();
    for (seq, d_seq) in batch.sequences.iter().zip(&dlp) {
        for (step, d) in seq.steps.iter().zip(d_seq) {
            if *d == 0.0 {
                continue;
            }
            for (b, p) in probs[step.state].iter().enumerate() {
                let indicator = if b == step.action { 1.0 } else { 0.0 };
                grad[policy.index(step.state, b)] += d * (indicator - p);
            }
        }
    }
    Ok(grad)
}

/// Central differences with step `h` on every logit.
pub fn finite_difference_gradient(policy: &ToyPolicy, batch: &ToyBatch, h: f64) -> Result<Vec<f64>, LossError> {
    let mut p = policy.clone();
    let mut grad = Vec::with_capacity(policy.logits.len());
    for i in 0..policy.logits.len() {
        let orig = p.logits[i];
        p.logits[i] = orig + h;
        let up = toy_loss(&p, batch)?;
        p.logits[i] = orig - h;
        let down = toy_loss(&p, batch)?;
        p.logits[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest absolute gap between the analytic and finite-difference gradients.
pub fn loss_gradient_check(policy: &ToyPolicy, batch: &ToyBatch) -> Result<f64, LossError> {
    let a = analytic_gradient(policy, batch)?;
    let f = finite_difference_gradient(policy, batch, 1e-5)?;
    Ok(a.iter().zip(&f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// A batch of random sequences sampled from `behavior` (so old logprobs are
/// genuine), with random advantages and a few masked steps.
pub fn random_batch(behavior: &ToyPolicy, n_sequences: usize, max_len: usize, rng: &mut impl RngCore) -> ToyBatch {
    let sequences = (0..n_sequences)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let steps = (0..len)
                .map(|_| {
                    let state = rng.random_range(0..behavior.n_states);
                    let (action, old_logprob) = behavior.sample(state, rng);
                    let mask = u8::from(rng.random_bool(0.8));
                    ToyStep { state, action, old_logprob, mask }
                })
                .collect();
            ToySequence { steps, advantage: rng.random_range(-2.0..2.0) }
        })
        .collect();
    let mut batch = ToyBatch { sequences, clip_epsilon: None };
    // At least one unmasked step.
    batch.sequences[0].steps[0].mask = 1;
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ToyPolicy::random(3, 4, 3.0, &mut rng);
        for s in 0..3 {
            let probs = p.probs(s);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for a in 0..4 {
                assert!((p.logprob(s, a) - probs[a].ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_advantage_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ToyPolicy::random(3, 4, 1.0, &mut rng);
        let mut batch = random_batch(&p, 4, 5, &mut rng);
        for s in &mut batch.sequences {
            s.advantage = 0.0;
        }
        assert!(analytic_gradient(&p, &batch).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_token_matches_hand_derivation() {
        // loss = -A * pi(a)/pi_old(a); d/dlogit_b = -A * ratio * ([a==b] - p_b)
        let mut p = ToyPolicy::uniform(1, 3);
        p.logits = vec![0.2, -0.4, 1.0];
        let probs = p.probs(0);
        let old = -1.3;
        let batch = ToyBatch {
            sequences: vec![ToySequence {
                steps: vec![ToyStep { state: 0, action: 1, old_logprob: old, mask: 1 }],
                advantage: 0.8,
            }],
            clip_epsilon: None,
        };
        let ratio = (probs[1].ln() - old).exp();
        let expected: Vec<f64> = (0..3)
            .map(|b| -0.8 * ratio * (if b == 1 { 1.0 } else { 0.0 } - probs[b]))
            .collect();
        let got = analytic_gradient(&p, &batch).unwrap();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_check_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let behavior = ToyPolicy::random(3, 4, 1.0, &mut rng);
        let mut current = behavior.clone();
        for l in &mut current.logits {
            *l += rng.random_range(-0.3..0.3);
        }
        let batch = random_batch(&behavior, 6, 5, &mut rng);
        assert!(loss_gradient_check(&current, &batch).unwrap() < 1e-5);
    }
}
