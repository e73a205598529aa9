//! Advantages, duration weights and the clipped policy-gradient update.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::attempt::TrajectoryBatch;
use crate::config::{AdvantageEstimator, RunConfig};
use crate::error::{Error, Result};
use crate::policy::{LibraryPolicy, PolicySnapshot, StateKey};

/// Per-state scalar baseline fitted by squared-error regression.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    values: BTreeMap<String, f64>,
}

impl ValueTable {
    pub fn get(&self, key: &StateKey) -> f64 {
        self.values.get(&key.to_string()).copied().unwrap_or(0.0)
    }

    /// One gradient step on `0.5 * mean (R - V)^2` per state.
    fn fit(&mut self, groups: &HashMap<StateKey, Vec<f64>>, lr: f64) {
        for (key, rewards) in groups {
            let v = self.get(key);
            let err = rewards.iter().map(|r| r - v).sum::<f64>() / rewards.len() as f64;
            self.values.insert(key.to_string(), v + lr * err);
        }
    }
}

fn state_of(batch: &TrajectoryBatch, i: usize) -> StateKey {
    let a = &batch.entries[i].attempt;
    StateKey::new(&a.task_id, a.mode)
}

/// Advantages for single-step episodes. `BatchMean` subtracts the mean reward
/// of entries sharing the state; `LearnedValue` subtracts the value table and
/// then refits it; `MonteCarlo` uses the return itself.
pub fn estimate_advantages(
    batch: &TrajectoryBatch,
    estimator: AdvantageEstimator,
    values: &mut ValueTable,
    critic_lr: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let rewards = batch.rewards();
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Batch(format!("non-finite reward {r}")));
    }
    let mut groups: HashMap<StateKey, Vec<f64>> = HashMap::new();
    for (i, r) in rewards.iter().enumerate() {
        groups.entry(state_of(batch, i)).or_default().push(*r);
    }
    let adv = match estimator {
        AdvantageEstimator::MonteCarlo => rewards.clone(),
        AdvantageEstimator::BatchMean => {
            let means: HashMap<&StateKey, f64> = groups
                .iter()
                .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
                .collect();
            (0..rewards.len())
                .map(|i| rewards[i] - means[&state_of(batch, i)])
                .collect()
        }
        AdvantageEstimator::LearnedValue => {
            let adv = (0..rewards.len())
                .map(|i| rewards[i] - values.get(&state_of(batch, i)))
                .collect();
            values.fit(&groups, critic_lr);
            adv
        }
    };
    Ok(adv)
}

/// `w_i = max(dt_i, floor) / mean(max(dt, floor))`, then clamped; all ones
/// when disabled. No renormalisation follows the clamp.
pub fn duration_weights(
    durations: &[f64],
    enabled: bool,
    floor: f64,
    clamp: Option<(f64, f64)>,
) -> Vec<f64> {
    if !enabled || durations.is_empty() {
        return vec![1.0; durations.len()];
    }
    let dt: Vec<f64> = durations
        .iter()
        .map(|d| if d.is_finite() { d.max(floor) } else { floor })
        .collect();
    let mean = dt.iter().sum::<f64>() / dt.len() as f64;
    dt.iter()
        .map(|d| {
            let w = d / mean;
            match clamp {
                Some((lo, hi)) => w.clamp(lo, hi),
                None => w,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub entropy_coeff: f64,
    pub kl_coeff: f64,
    /// Entries may have been sampled from versions
    /// `[old.version - max_staleness, old.version]`.
    pub max_staleness: u64,
}

impl PpoConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            clip_ratio: cfg.clip_ratio,
            entropy_coeff: cfg.entropy_coeff,
            kl_coeff: cfg.kl_coeff,
            max_staleness: cfg.max_staleness,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total_loss: f64,
    pub policy_loss: f64,
    /// Mean policy entropy over the batch's states (nats).
    pub entropy_term: f64,
    /// Mean KL(current || reference) over the batch's states.
    pub kl_term: f64,
    pub clip_fraction: f64,
    pub grad_norm_preclip: f64,
}

/// Loss and its exact gradient with respect to all policy parameters.
///
/// `policy_loss = -mean_i w_i min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i)`
/// with `r_i = exp(log pi(a_i|s_i) - behavior log-prob)`;
/// `total = policy_loss - c_ent mean H + c_kl mean KL(pi || ref)`.
/// At equality of the two branches the unclipped one is differentiated.
pub fn ppo_loss_and_grad(
    batch: &TrajectoryBatch,
    policy: &LibraryPolicy,
    old: &PolicySnapshot,
    reference: &PolicySnapshot,
    cfg: &PpoConfig,
) -> Result<(LossReport, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Batch("empty batch".into()));
    }
    let max = old.version();
    let min = max.saturating_sub(cfg.max_staleness);
    for e in &batch.entries {
        let v = e.attempt.policy_version;
        if v < min || v > max {
            return Err(Error::Staleness { entry: v, min, max });
        }
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; policy.params().len()];
    let mut policy_loss = 0.0;
    let mut clipped = 0usize;
    let mut entropy = 0.0;
    let mut kl = 0.0;
    for e in &batch.entries {
        let key = StateKey::new(&e.attempt.task_id, e.attempt.mode);
        let s = policy.state_index(&key)?;
        let lp = policy.log_prob_at(s, &e.attempt.action, 1.0)?;
        let ratio = (lp - e.attempt.behavior_logprob()).exp();
        let a = e.advantage;
        let w = e.duration_weight;
        let unclipped = ratio * a;
        let clipped_obj = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * a;
        if clipped_obj < unclipped {
            clipped += 1;
            policy_loss -= w * clipped_obj / n;
        } else {
            policy_loss -= w * unclipped / n;
            policy.accumulate_grad_log_prob(s, &e.attempt.action, -w * ratio * a / n, &mut grad)?;
        }
        entropy += policy.entropy_at(s) / n;
        if cfg.entropy_coeff != 0.0 {
            policy.accumulate_entropy_grad(s, -cfg.entropy_coeff / n, &mut grad);
        }
        kl += policy.kl_at(reference, s)? / n;
        if cfg.kl_coeff != 0.0 {
            policy.accumulate_kl_grad(reference, s, cfg.kl_coeff / n, &mut grad)?;
        }
    }
    let total = policy_loss - cfg.entropy_coeff * entropy + cfg.kl_coeff * kl;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((
        LossReport {
            total_loss: total,
            policy_loss,
            entropy_term: entropy,
            kl_term: kl,
            clip_fraction: clipped as f64 / n,
            grad_norm_preclip: norm,
        },
        grad,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateReport {
    pub grad_norm: f64,
    pub applied_norm: f64,
    pub version: u64,
}

/// Global-norm clip at `grad_clip`, then `theta -= lr * g`. The version is
/// incremented on success, including for a zero gradient.
pub fn apply_update(
    policy: &mut LibraryPolicy,
    grad: &[f64],
    lr: f64,
    grad_clip: f64,
) -> Result<UpdateReport> {
    if grad.len() != policy.params().len() {
        return Err(Error::Shape(format!(
            "gradient has {} components, policy has {}",
            grad.len(),
            policy.params().len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        log::warn!("skipping update: non-finite gradient");
        return Err(Error::Update("non-finite gradient".into()));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if grad_clip > 0.0 && norm > grad_clip {
        grad_clip / norm
    } else {
        1.0
    };
    for (p, g) in policy.params_mut().iter_mut().zip(grad) {
        *p -= lr * scale * g;
    }
    policy.bump_version();
    Ok(UpdateReport {
        grad_norm: norm,
        applied_norm: norm * scale,
        version: policy.version(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attempt::{
        ExecutionRecord, ExitStatus, Mode, RewardBreakdown, SolutionAttempt, TrajectoryEntry,
    };
    use crate::policy::{Fragment, SolutionLibrary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn entry(
        task: &str,
        action: Vec<usize>,
        behavior: f64,
        reward: f64,
        version: u64,
    ) -> TrajectoryEntry {
        let attempt = SolutionAttempt {
            attempt_id: 0,
            task_id: task.into(),
            mode: Mode::Scratch,
            prompt: String::new(),
            response: String::new(),
            plan: String::new(),
            code: String::new(),
            logprob_data: vec![behavior],
            parent: None,
            action,
            policy_version: version,
            extra_blocks: false,
        };
        let exec = ExecutionRecord {
            attempt_id: 0,
            instrumented_code: String::new(),
            exit_status: ExitStatus::Ok,
            stdout: String::new(),
            stderr: String::new(),
            stdout_truncated: false,
            stderr_truncated: false,
            duration: 1.0,
            submission_present: false,
            workdir: PathBuf::new(),
            sandbox_violation: None,
        };
        let reward = RewardBreakdown {
            valid: true,
            matched_stages: Default::default(),
            partial_credit: 0.0,
            raw_score: None,
            final_reward: reward,
            invalid_reason: None,
        };
        TrajectoryEntry::new(attempt, exec, reward)
    }

    fn cfg(eps: f64, ent: f64, kl: f64) -> PpoConfig {
        PpoConfig {
            clip_ratio: eps,
            entropy_coeff: ent,
            kl_coeff: kl,
            max_staleness: 0,
        }
    }

    #[test]
    fn batch_mean_examples() {
        let mut v = ValueTable::default();
        let b = TrajectoryBatch::new(vec![
            entry("s", vec![0], 0.0, -10.0, 0),
            entry("s", vec![0], 0.0, -10.0, 0),
            entry("s", vec![0], 0.0, -10.0, 0),
        ]);
        assert_eq!(
            estimate_advantages(&b, AdvantageEstimator::BatchMean, &mut v, 0.1).unwrap(),
            vec![0.0; 3]
        );
        let b = TrajectoryBatch::new(vec![
            entry("s", vec![0], 0.0, 1.0, 0),
            entry("s", vec![0], 0.0, 0.0, 0),
        ]);
        assert_eq!(
            estimate_advantages(&b, AdvantageEstimator::BatchMean, &mut v, 0.1).unwrap(),
            vec![0.5, -0.5]
        );
        let b = TrajectoryBatch::new(vec![
            entry("s1", vec![0], 0.0, 2.0, 0),
            entry("s1", vec![0], 0.0, 0.0, 0),
            entry("s2", vec![0], 0.0, -10.0, 0),
        ]);
        assert_eq!(
            estimate_advantages(&b, AdvantageEstimator::BatchMean, &mut v, 0.1).unwrap(),
            vec![1.0, -1.0, 0.0]
        );
        assert!(matches!(
            estimate_advantages(
                &TrajectoryBatch::default(),
                AdvantageEstimator::BatchMean,
                &mut v,
                0.1
            ),
            Err(Error::Batch(_))
        ));
    }

    #[test]
    fn learned_value_regresses_to_mean() {
        let mut v = ValueTable::default();
        let b = TrajectoryBatch::new(vec![
            entry("s", vec![0], 0.0, 1.0, 0),
            entry("s", vec![0], 0.0, 3.0, 0),
        ]);
        let a = estimate_advantages(&b, AdvantageEstimator::LearnedValue, &mut v, 0.5).unwrap();
        assert_eq!(a, vec![1.0, 3.0]);
        assert_eq!(v.get(&StateKey::new("s", Mode::Scratch)), 1.0);
        for _ in 0..60 {
            estimate_advantages(&b, AdvantageEstimator::LearnedValue, &mut v, 0.5).unwrap();
        }
        assert!((v.get(&StateKey::new("s", Mode::Scratch)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn duration_weight_examples() {
        assert_eq!(
            duration_weights(&[2.0, 4.0, 6.0], true, 0.001, None),
            vec![0.5, 1.0, 1.5]
        );
        assert_eq!(
            duration_weights(&[2.0, 40.0], false, 0.001, Some((0.1, 10.0))),
            vec![1.0, 1.0]
        );
        // 0.001 / 50.0005 and 100 / 50.0005, then clamped.
        let w = duration_weights(&[0.001, 100.0], true, 0.001, Some((0.1, 10.0)));
        assert_eq!(w[0], 0.1);
        assert!((w[1] - 100.0 / 50.0005).abs() < 1e-15);
        let w = duration_weights(&[0.0, 1.0], true, 0.001, None);
        assert!((w[0] - 0.001 / 0.5005).abs() < 1e-15);
    }

    #[test]
    fn reinforce_direction_at_ratio_one() {
        let p = LibraryPolicy::with_logits(&[0.0, 0.0]);
        let snap = p.snapshot();
        let mut e = entry("task", vec![0], 0.5f64.ln(), 1.0, 0);
        e.advantage = 1.0;
        let b = TrajectoryBatch::new(vec![e]);
        let (rep, g) = ppo_loss_and_grad(&b, &p, &snap, &snap, &cfg(0.2, 0.0, 0.0)).unwrap();
        assert!((rep.policy_loss + 1.0).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        assert_eq!(rep.clip_fraction, 0.0);
    }

    #[test]
    fn clipped_entry_counted() {
        let p = LibraryPolicy::with_logits(&[0.0, 0.0]);
        let snap = p.snapshot();
        // Behavior log-prob chosen so that r = 2.
        let mut e = entry("task", vec![0], 0.5f64.ln() - 2f64.ln(), 1.0, 0);
        e.advantage = 1.0;
        let b = TrajectoryBatch::new(vec![e]);
        let (rep, g) = ppo_loss_and_grad(&b, &p, &snap, &snap, &cfg(0.2, 0.0, 0.0)).unwrap();
        assert!((rep.policy_loss + 1.2).abs() < 1e-12);
        assert_eq!(rep.clip_fraction, 1.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn staleness_rejected() {
        let p = LibraryPolicy::with_logits(&[0.0, 0.0]);
        let snap = p.snapshot();
        let b = TrajectoryBatch::new(vec![entry("task", vec![0], 0.0, 1.0, 3)]);
        assert!(matches!(
            ppo_loss_and_grad(&b, &p, &snap, &snap, &cfg(0.2, 0.0, 0.0)),
            Err(Error::Staleness { .. })
        ));
    }

    fn multi_state_policy(rng: &mut ChaCha8Rng) -> LibraryPolicy {
        let lib = |n: usize| {
            SolutionLibrary::flat(
                (0..n)
                    .map(|i| Fragment {
                        label: String::new(),
                        plan: String::new(),
                        code: format!("print({i})"),
                    })
                    .collect(),
            )
        };
        let mut p = LibraryPolicy::new(
            (0..3)
                .map(|s| (StateKey::new(format!("s{s}"), Mode::Scratch), lib(3)))
                .collect(),
        )
        .unwrap();
        for x in p.params_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = multi_state_policy(&mut rng);
        let reference = multi_state_policy(&mut rng).snapshot();
        let old = p.snapshot();
        let entries: Vec<TrajectoryEntry> = (0..8)
            .map(|i| {
                let s = i % 3;
                let a = rng.gen_range(0..3);
                let key = StateKey::new(format!("s{s}"), Mode::Scratch);
                // Behavior log-probs perturbed so ratios sit inside the clip range.
                let behavior = p.log_prob(&key, &[a]).unwrap() + rng.gen_range(-0.1..0.1);
                let mut e = entry(&format!("s{s}"), vec![a], behavior, 0.0, 0);
                e.advantage = rng.gen_range(-2.0..2.0);
                e.duration_weight = rng.gen_range(0.2..3.0);
                e
            })
            .collect();
        let b = TrajectoryBatch::new(entries);
        let c = cfg(0.3, 0.05, 0.1);
        let (_, g) = ppo_loss_and_grad(&b, &p, &old, &reference, &c).unwrap();
        let h = 1e-6;
        for j in 0..p.params().len() {
            let mut plus = p.clone();
            plus.params_mut()[j] += h;
            let mut minus = p.clone();
            minus.params_mut()[j] -= h;
            let lp = ppo_loss_and_grad(&b, &plus, &old, &reference, &c)
                .unwrap()
                .0
                .total_loss;
            let lm = ppo_loss_and_grad(&b, &minus, &old, &reference, &c)
                .unwrap()
                .0
                .total_loss;
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(g[j].abs()).max(1e-3);
            assert!(
                (fd - g[j]).abs() < tol,
                "param {j}: fd {fd} vs analytic {}",
                g[j]
            );
        }
    }

    #[test]
    fn weighting_disabled_equal_durations_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = multi_state_policy(&mut rng);
        let snap = p.snapshot();
        let mk = |w: &[f64]| {
            let mut b = TrajectoryBatch::new(
                (0..4)
                    .map(|i| {
                        let mut e = entry(&format!("s{}", i % 3), vec![i % 3], -1.0, 0.0, 0);
                        e.advantage = i as f64 - 1.5;
                        e
                    })
                    .collect(),
            );
            b.set_weights(w);
            b
        };
        let on = duration_weights(&[3.0; 4], true, 0.001, Some((0.1, 10.0)));
        let off = duration_weights(&[3.0; 4], false, 0.001, Some((0.1, 10.0)));
        let a = ppo_loss_and_grad(&mk(&on), &p, &snap, &snap, &cfg(0.2, 0.01, 0.01)).unwrap();
        let b = ppo_loss_and_grad(&mk(&off), &p, &snap, &snap, &cfg(0.2, 0.01, 0.01)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn kl_zero_at_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = multi_state_policy(&mut rng);
        let snap = p.snapshot();
        let b = TrajectoryBatch::new(vec![entry("s0", vec![1], -1.0, 0.0, 0)]);
        let (rep, g) = ppo_loss_and_grad(&b, &p, &snap, &snap, &cfg(0.2, 0.0, 1.0)).unwrap();
        assert_eq!(rep.kl_term, 0.0);
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn update_examples() {
        let mut p = LibraryPolicy::with_logits(&[0.3, -0.2]);
        let before = p.params().to_vec();
        let r = apply_update(&mut p, &[0.0, 0.0], 0.1, 1.0).unwrap();
        assert_eq!(p.params(), &before[..]);
        assert_eq!(r.version, 1);
        let r = apply_update(&mut p, &[3.0, 4.0], 1.0, 1.0).unwrap();
        assert_eq!(r.grad_norm, 5.0);
        assert!((r.applied_norm - 1.0).abs() < 1e-15);
        let delta: Vec<f64> = p.params().iter().zip(&before).map(|(a, b)| b - a).collect();
        assert!(((delta[0] * delta[0] + delta[1] * delta[1]).sqrt() - 1.0).abs() < 1e-12);
        assert!(matches!(
            apply_update(&mut p, &[f64::NAN, 0.0], 1.0, 1.0),
            Err(Error::Update(_))
        ));
        assert_eq!(p.version(), 2);
    }

    #[test]
    fn positive_advantage_increases_probability() {
        let mut p = LibraryPolicy::with_logits(&[0.0, 0.0]);
        let mut prev = p.probs(0, 1.0)[0][0];
        for _ in 0..20 {
            let snap = p.snapshot();
            let lp = p
                .log_prob(&StateKey::new("task", Mode::Scratch), &[0])
                .unwrap();
            let mut e = entry("task", vec![0], lp, 1.0, p.version());
            e.advantage = 1.0;
            let b = TrajectoryBatch::new(vec![e]);
            let (_, g) = ppo_loss_and_grad(&b, &p, &snap, &snap, &cfg(0.2, 0.0, 0.0)).unwrap();
            apply_update(&mut p, &g, 0.5, 1.0).unwrap();
            let now = p.probs(0, 1.0)[0][0];
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn entropy_coefficient_monotone_on_symmetric_batch() {
        let base = LibraryPolicy::with_logits(&[0.4, -0.1, 0.2]);
        let mut prev = f64::NEG_INFINITY;
        for c in [0.0, 0.01, 0.1, 0.5, 1.0] {
            let mut p = base.clone();
            let snap = p.snapshot();
            let key = StateKey::new("task", Mode::Scratch);
            let b = TrajectoryBatch::new(
                (0..3)
                    .map(|a| {
                        let lp = base.log_prob(&key, &[a]).unwrap();
                        let mut e = entry("task", vec![a], lp, 0.0, 0);
                        e.advantage = 0.0;
                        e
                    })
                    .collect(),
            );
            let (_, g) = ppo_loss_and_grad(&b, &p, &snap, &snap, &cfg(0.2, c, 0.0)).unwrap();
            apply_update(&mut p, &g, 0.5, 0.0).unwrap();
            let h = p.entropy(&key).unwrap();
            assert!(h >= prev - 1e-15);
            prev = h;
        }
    }
}
