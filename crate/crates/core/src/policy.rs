//! Exact-gradient softmax policy over a solution library.
//!
//! Each policy state (task x prompt mode) owns a library split into slots.
//! A solution picks one fragment per slot; slots are independent softmaxes,
//! so a single-slot library is an ordinary categorical policy and a
//! multi-slot library is a factored one whose log-probability, entropy and
//! KL are sums over slots.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attempt::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub plan: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub fragments: Vec<Fragment>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolutionLibrary {
    pub slots: Vec<Slot>,
}

impl SolutionLibrary {
    /// One slot holding complete programs.
    pub fn flat(fragments: Vec<Fragment>) -> Self {
        Self {
            slots: vec![Slot {
                name: "solution".into(),
                fragments,
            }],
        }
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.fragments.len()).collect()
    }

    /// Renders a choice into `(response, plan, code)`.
    pub fn render(&self, action: &[usize]) -> Result<(String, String, String)> {
        if action.len() != self.slots.len() {
            return Err(Error::Shape(format!(
                "action has {} choices, library has {} slots",
                action.len(),
                self.slots.len()
            )));
        }
        let mut plans = Vec::new();
        let mut code = Vec::new();
        for (slot, &i) in self.slots.iter().zip(action) {
            let frag = slot.fragments.get(i).ok_or(Error::Index {
                index: i,
                len: slot.fragments.len(),
            })?;
            if !frag.plan.trim().is_empty() {
                plans.push(frag.plan.trim());
            }
            code.push(frag.code.trim_end_matches('\n'));
        }
        let plan = plans.join(" ");
        let code = code.join("\n");
        let response = format!("{plan}\n\n```python\n{code}\n```\n");
        Ok((response, plan, code))
    }
}

/// The library file stored next to a task (`library.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLibrary {
    pub task_id: String,
    pub scratch: SolutionLibrary,
    /// Candidates for the improve prompt; the scratch library when absent.
    #[serde(default)]
    pub improve: Option<SolutionLibrary>,
}

impl TaskLibrary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::path(path, e))
    }

    pub fn for_mode(&self, mode: Mode) -> &SolutionLibrary {
        match mode {
            Mode::Scratch => &self.scratch,
            Mode::Improve => self.improve.as_ref().unwrap_or(&self.scratch),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateKey {
    pub task_id: String,
    pub mode: Mode,
}

impl StateKey {
    pub fn new(task_id: impl Into<String>, mode: Mode) -> Self {
        Self {
            task_id: task_id.into(),
            mode,
        }
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.task_id, self.mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StateLayout {
    key: StateKey,
    library: SolutionLibrary,
    offset: usize,
    /// `(offset, len)` of each slot inside the global parameter vector.
    slots: Vec<(usize, usize)>,
}

impl StateLayout {
    fn len(&self) -> usize {
        self.slots.iter().map(|s| s.1).sum()
    }
}

/// Result of drawing one solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub action: Vec<usize>,
    /// Temperature-adjusted log-probability of each slot choice.
    pub logprobs: Vec<f64>,
    pub response: String,
    pub plan: String,
    pub code: String,
}

impl Sample {
    pub fn logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

fn softmax_into(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &l in logits {
        let e = ((l - max) / temperature).exp();
        out.push(e);
        z += e;
    }
    for p in out.iter_mut() {
        *p /= z;
    }
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|l| (l - max) / temperature).collect();
    let lse = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.iter().map(|s| s - lse).collect()
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    softmax_into(logits, temperature, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub version: u64,
    pub states: Vec<(StateKey, SolutionLibrary)>,
    pub num_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryPolicy {
    states: Vec<StateLayout>,
    index: HashMap<StateKey, usize>,
    params: Vec<f64>,
    version: u64,
}

impl LibraryPolicy {
    /// Zero-initialised (uniform) policy over the given states.
    pub fn new(states: Vec<(StateKey, SolutionLibrary)>) -> Result<Self> {
        let mut layouts = Vec::with_capacity(states.len());
        let mut index = HashMap::new();
        let mut offset = 0;
        for (key, library) in states {
            if index.contains_key(&key) {
                return Err(Error::Shape(format!("duplicate state {key}")));
            }
            let start = offset;
            let mut slots = Vec::new();
            for slot in &library.slots {
                if slot.fragments.is_empty() {
                    return Err(Error::Shape(format!(
                        "{key}: slot `{}` is empty",
                        slot.name
                    )));
                }
                slots.push((offset, slot.fragments.len()));
                offset += slot.fragments.len();
            }
            if slots.is_empty() {
                return Err(Error::Shape(format!("{key}: library has no slots")));
            }
            index.insert(key.clone(), layouts.len());
            layouts.push(StateLayout {
                key,
                library,
                offset: start,
                slots,
            });
        }
        Ok(Self {
            states: layouts,
            index,
            params: vec![0.0; offset],
            version: 0,
        })
    }

    /// Scratch and improve states for every task library.
    pub fn from_task_libraries(libs: &[TaskLibrary]) -> Result<Self> {
        let mut states = Vec::new();
        for lib in libs {
            for mode in [Mode::Scratch, Mode::Improve] {
                states.push((
                    StateKey::new(&lib.task_id, mode),
                    lib.for_mode(mode).clone(),
                ));
            }
        }
        Self::new(states)
    }

    /// A single-state, single-slot policy with the given logits. Fragments are
    /// numbered placeholder programs.
    pub fn with_logits(logits: &[f64]) -> Self {
        let frags = (0..logits.len())
            .map(|i| Fragment {
                label: format!("a{i}"),
                plan: format!("Action {i}."),
                code: format!("print({i})"),
            })
            .collect();
        let mut p = Self::new(vec![(
            StateKey::new("task", Mode::Scratch),
            SolutionLibrary::flat(frags),
        )])
        .expect("non-empty");
        p.params.copy_from_slice(logits);
        p
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn set_version(&mut self, v: u64) {
        self.version = v;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_keys(&self) -> impl Iterator<Item = &StateKey> {
        self.states.iter().map(|s| &s.key)
    }

    pub fn state_index(&self, key: &StateKey) -> Result<usize> {
        self.index
            .get(key)
            .copied()
            .ok_or_else(|| Error::State(key.to_string()))
    }

    pub fn library(&self, state: usize) -> &SolutionLibrary {
        &self.states[state].library
    }

    /// `(offset, len)` of a state's parameter row.
    pub fn state_range(&self, state: usize) -> (usize, usize) {
        let s = &self.states[state];
        (s.offset, s.len())
    }

    pub fn slot_sizes(&self, state: usize) -> Vec<usize> {
        self.states[state].slots.iter().map(|s| s.1).collect()
    }

    fn slot_logits(&self, state: usize, slot: usize) -> &[f64] {
        let (o, n) = self.states[state].slots[slot];
        &self.params[o..o + n]
    }

    fn check_action(&self, state: usize, action: &[usize]) -> Result<()> {
        let slots = &self.states[state].slots;
        if action.len() != slots.len() {
            return Err(Error::Shape(format!(
                "action has {} choices, state has {} slots",
                action.len(),
                slots.len()
            )));
        }
        for (&a, &(_, n)) in action.iter().zip(slots) {
            if a >= n {
                return Err(Error::Index { index: a, len: n });
            }
        }
        Ok(())
    }

    /// Per-slot probabilities at temperature `t`.
    pub fn probs(&self, state: usize, temperature: f64) -> Vec<Vec<f64>> {
        (0..self.states[state].slots.len())
            .map(|k| softmax(self.slot_logits(state, k), temperature))
            .collect()
    }

    /// Draws a solution from `softmax(theta[state] / temperature)`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        key: &StateKey,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Sample> {
        if !(temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        let state = self.state_index(key)?;
        let mut action = Vec::new();
        let mut logprobs = Vec::new();
        let mut probs = Vec::new();
        for k in 0..self.states[state].slots.len() {
            softmax_into(self.slot_logits(state, k), temperature, &mut probs);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            action.push(pick);
            logprobs.push(log_softmax(self.slot_logits(state, k), temperature)[pick]);
        }
        let (response, plan, code) = self.states[state].library.render(&action)?;
        Ok(Sample {
            action,
            logprobs,
            response,
            plan,
            code,
        })
    }

    pub fn log_prob_at(&self, state: usize, action: &[usize], temperature: f64) -> Result<f64> {
        self.check_action(state, action)?;
        Ok(action
            .iter()
            .enumerate()
            .map(|(k, &a)| log_softmax(self.slot_logits(state, k), temperature)[a])
            .sum())
    }

    /// Learning log-probability (temperature 1).
    pub fn log_prob(&self, key: &StateKey, action: &[usize]) -> Result<f64> {
        self.log_prob_at(self.state_index(key)?, action, 1.0)
    }

    /// Gradient of `log_prob` over the state's parameter row:
    /// `1{j = a_k} - softmax_j` per slot `k`.
    pub fn grad_log_prob(&self, key: &StateKey, action: &[usize]) -> Result<Vec<f64>> {
        let state = self.state_index(key)?;
        let (offset, len) = self.state_range(state);
        let mut full = vec![0.0; self.params.len()];
        self.accumulate_grad_log_prob(state, action, 1.0, &mut full)?;
        Ok(full[offset..offset + len].to_vec())
    }

    /// `grad += scale * d log_prob / d theta` in global coordinates.
    pub fn accumulate_grad_log_prob(
        &self,
        state: usize,
        action: &[usize],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_action(state, action)?;
        let mut probs = Vec::new();
        for (k, &a) in action.iter().enumerate() {
            let (o, n) = self.states[state].slots[k];
            softmax_into(&self.params[o..o + n], 1.0, &mut probs);
            for j in 0..n {
                let ind = if j == a { 1.0 } else { 0.0 };
                grad[o + j] += scale * (ind - probs[j]);
            }
        }
        Ok(())
    }

    /// Shannon entropy in nats, summed over slots.
    pub fn entropy_at(&self, state: usize) -> f64 {
        self.probs(state, 1.0)
            .iter()
            .map(|p| {
                -p.iter()
                    .filter(|&&x| x > 0.0)
                    .map(|&x| x * x.ln())
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn entropy(&self, key: &StateKey) -> Result<f64> {
        Ok(self.entropy_at(self.state_index(key)?))
    }

    /// `grad += scale * dH / d theta`, with `dH/dz_j = -p_j (ln p_j + H)` per slot.
    pub fn accumulate_entropy_grad(&self, state: usize, scale: f64, grad: &mut [f64]) {
        for (k, &(o, n)) in self.states[state].slots.iter().enumerate() {
            let lp = log_softmax(self.slot_logits(state, k), 1.0);
            let h: f64 = -lp.iter().map(|l| l.exp() * l).sum::<f64>();
            for j in 0..n {
                let p = lp[j].exp();
                grad[o + j] += scale * (-p * (lp[j] + h));
            }
        }
    }

    fn check_compatible(&self, other: &LibraryPolicy, state: usize) -> Result<usize> {
        let key = &self.states[state].key;
        let other_state = other
            .state_index(key)
            .map_err(|_| Error::Shape(format!("{key} missing in snapshot")))?;
        if self.slot_sizes(state) != other.slot_sizes(other_state) {
            return Err(Error::Shape(format!("{key}: action sets differ")));
        }
        Ok(other_state)
    }

    /// KL(self || other) at one state, summed over slots.
    pub fn kl_at(&self, other: &LibraryPolicy, state: usize) -> Result<f64> {
        let os = self.check_compatible(other, state)?;
        let mut kl = 0.0;
        for k in 0..self.states[state].slots.len() {
            let lp = log_softmax(self.slot_logits(state, k), 1.0);
            let lq = log_softmax(other.slot_logits(os, k), 1.0);
            kl += lp
                .iter()
                .zip(&lq)
                .map(|(a, b)| a.exp() * (a - b))
                .sum::<f64>();
        }
        Ok(kl.max(0.0))
    }

    pub fn kl_divergence(&self, snapshot: &PolicySnapshot, key: &StateKey) -> Result<f64> {
        self.kl_at(snapshot, self.state_index(key)?)
    }

    /// `grad += scale * dKL(self || other) / d theta`, with
    /// `dKL/dz_j = p_j ((ln p_j - ln q_j) - KL)` per slot.
    pub fn accumulate_kl_grad(
        &self,
        other: &LibraryPolicy,
        state: usize,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let os = self.check_compatible(other, state)?;
        for (k, &(o, n)) in self.states[state].slots.iter().enumerate() {
            let lp = log_softmax(self.slot_logits(state, k), 1.0);
            let lq = log_softmax(other.slot_logits(os, k), 1.0);
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            for j in 0..n {
                let p = lp[j].exp();
                grad[o + j] += scale * p * ((lp[j] - lq[j]) - kl);
            }
        }
        Ok(())
    }

    /// Frozen copy carrying the current version.
    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            inner: Arc::new(self.clone()),
        }
    }

    pub fn header(&self) -> PolicyHeader {
        PolicyHeader {
            version: self.version,
            states: self
                .states
                .iter()
                .map(|s| (s.key.clone(), s.library.clone()))
                .collect(),
            num_params: self.params.len(),
        }
    }

    pub fn from_header(header: PolicyHeader, params: Vec<f64>) -> Result<Self> {
        let mut p = Self::new(header.states)?;
        if params.len() != p.params.len() || params.len() != header.num_params {
            return Err(Error::Shape(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                p.params.len()
            )));
        }
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("non-finite parameters".into()));
        }
        p.params = params;
        p.version = header.version;
        Ok(p)
    }
}

/// Immutable, shareable copy of a policy at a given version.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    inner: Arc<LibraryPolicy>,
}

impl PolicySnapshot {
    pub fn version(&self) -> u64 {
        self.inner.version
    }
}

impl Deref for PolicySnapshot {
    type Target = LibraryPolicy;

    fn deref(&self) -> &LibraryPolicy {
        &self.inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key() -> StateKey {
        StateKey::new("task", Mode::Scratch)
    }

    #[test]
    fn sample_symmetric_logits() {
        let p = LibraryPolicy::with_logits(&[0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = p.sample(&key(), 1.0, &mut rng).unwrap();
        assert!((s.logprob() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn closed_form_probabilities() {
        let p = LibraryPolicy::with_logits(&[3f64.ln(), 0.0]);
        let probs = p.probs(0, 1.0);
        assert!((probs[0][0] - 0.75).abs() < 1e-15);
        assert!((probs[0][1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sampling_frequencies_match_tempered_softmax() {
        let logits = [1.0, 2.0, 3.0];
        let p = LibraryPolicy::with_logits(&logits);
        let target = softmax(&logits, 0.7);
        let n = 100_000;
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..n {
            counts[p.sample(&key(), 0.7, &mut rng).unwrap().action[0]] += 1;
        }
        for i in 0..3 {
            let sd = (target[i] * (1.0 - target[i]) / n as f64).sqrt();
            let f = counts[i] as f64 / n as f64;
            assert!(
                (f - target[i]).abs() < 3.0 * sd,
                "action {i}: {f} vs {}",
                target[i]
            );
        }
    }

    #[test]
    fn sampled_logprob_is_temperature_adjusted() {
        let p = LibraryPolicy::with_logits(&[1.0, 2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = p.sample(&key(), 0.7, &mut rng).unwrap();
        let expect = softmax(&[1.0, 2.0, 3.0], 0.7)[s.action[0]].ln();
        assert!((s.logprob() - expect).abs() < 1e-12);
        assert!(p.sample(&key(), 0.0, &mut rng).is_err());
    }

    #[test]
    fn log_prob_examples() {
        let p = LibraryPolicy::with_logits(&[0.0, 0.0]);
        assert!((p.log_prob(&key(), &[0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let p = LibraryPolicy::with_logits(&[10.0, 0.0]);
        let expect = (10f64.exp() / (10f64.exp() + 1.0)).ln();
        let got = p.log_prob(&key(), &[0]).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got + 4.54e-5).abs() < 1e-7);
        assert!(matches!(p.log_prob(&key(), &[2]), Err(Error::Index { .. })));
        assert!(matches!(
            p.log_prob(&StateKey::new("nope", Mode::Scratch), &[0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn grad_log_prob_closed_form_and_fd() {
        let p = LibraryPolicy::with_logits(&[0.0, 0.0]);
        assert_eq!(p.grad_log_prob(&key(), &[0]).unwrap(), vec![0.5, -0.5]);

        let logits = [1.0, 2.0, -1.0];
        let p = LibraryPolicy::with_logits(&logits);
        let g = p.grad_log_prob(&key(), &[1]).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut plus = p.clone();
            plus.params_mut()[j] += h;
            let mut minus = p.clone();
            minus.params_mut()[j] -= h;
            let fd = (plus.log_prob(&key(), &[1]).unwrap() - minus.log_prob(&key(), &[1]).unwrap())
                / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6, "component {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn kl_examples() {
        let cur = LibraryPolicy::with_logits(&[3f64.ln(), 0.0]);
        let snap = LibraryPolicy::with_logits(&[0.0, 0.0]).snapshot();
        let kl = cur.kl_divergence(&snap, &key()).unwrap();
        // Independent numeric summation of sum p ln(p/q).
        let (p, q): ([f64; 2], [f64; 2]) = ([0.75, 0.25], [0.5, 0.5]);
        let oracle: f64 = p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((kl - oracle).abs() < 1e-14);
        assert!((kl - 0.1308).abs() < 1e-4);
        assert_eq!(cur.kl_divergence(&cur.snapshot(), &key()).unwrap(), 0.0);

        let other = LibraryPolicy::with_logits(&[0.0, 0.0, 0.0]).snapshot();
        assert!(matches!(
            cur.kl_divergence(&other, &key()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn kl_nonnegative_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = LibraryPolicy::with_logits(&a);
            let q = LibraryPolicy::with_logits(&b).snapshot();
            assert!(p.kl_divergence(&q, &key()).unwrap() >= 0.0);
        }
    }

    #[test]
    fn entropy_examples() {
        let p = LibraryPolicy::with_logits(&[0.0; 4]);
        assert!((p.entropy(&key()).unwrap() - 4f64.ln()).abs() < 1e-15);
        let p = LibraryPolicy::with_logits(&[100.0, 0.0]);
        assert!(p.entropy(&key()).unwrap() < 1e-40);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let l: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            assert!(LibraryPolicy::with_logits(&l).entropy(&key()).unwrap() <= 4f64.ln() + 1e-15);
        }
    }

    #[test]
    fn snapshot_is_immutable() {
        let mut p = LibraryPolicy::with_logits(&[0.5, -0.5]);
        let snap = p.snapshot();
        let before = snap.log_prob(&key(), &[0]).unwrap();
        p.params_mut()[0] = 4.0;
        p.bump_version();
        assert_eq!(snap.log_prob(&key(), &[0]).unwrap(), before);
        assert_eq!(snap.version(), 0);
        assert_eq!(p.version(), 1);
    }

    #[test]
    fn factored_library_renders_and_sums() {
        let lib = SolutionLibrary {
            slots: vec![
                Slot {
                    name: "a".into(),
                    fragments: vec![
                        Fragment {
                            label: "x".into(),
                            plan: "Import.".into(),
                            code: "import csv".into(),
                        },
                        Fragment {
                            label: "y".into(),
                            plan: String::new(),
                            code: "import nope".into(),
                        },
                    ],
                },
                Slot {
                    name: "b".into(),
                    fragments: vec![Fragment {
                        label: "z".into(),
                        plan: "Run.".into(),
                        code: "print(1)\n".into(),
                    }],
                },
            ],
        };
        let (resp, plan, code) = lib.render(&[0, 0]).unwrap();
        assert_eq!(plan, "Import. Run.");
        assert_eq!(code, "import csv\nprint(1)");
        let parsed = crate::attempt::parse_solution(&resp).unwrap();
        assert_eq!(parsed.code, code);
        assert_eq!(parsed.plan, plan);

        let p = LibraryPolicy::new(vec![(key(), lib)]).unwrap();
        let lp = p.log_prob(&key(), &[1, 0]).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        assert!((p.entropy(&key()).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn normalisation_and_shift_invariance(
            logits in proptest::collection::vec(-20.0f64..20.0, 2..6),
            shift in -50.0f64..50.0,
        ) {
            let p = LibraryPolicy::with_logits(&logits);
            let total: f64 = (0..logits.len()).map(|a| p.log_prob(&key(), &[a]).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);

            let g = p.grad_log_prob(&key(), &[0]).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);

            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let q = LibraryPolicy::with_logits(&shifted);
            for a in 0..logits.len() {
                prop_assert!((p.log_prob(&key(), &[a]).unwrap() - q.log_prob(&key(), &[a]).unwrap()).abs() < 1e-9);
                let ga = p.grad_log_prob(&key(), &[a]).unwrap();
                let gb = q.grad_log_prob(&key(), &[a]).unwrap();
                for (x, y) in ga.iter().zip(&gb) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
            prop_assert!((p.entropy(&key()).unwrap() - q.entropy(&key()).unwrap()).abs() < 1e-9);
            prop_assert!(p.kl_divergence(&q.snapshot(), &key()).unwrap() < 1e-9);
            let pp = p.probs(0, 0.7);
            let qq = q.probs(0, 0.7);
            for (x, y) in pp[0].iter().zip(&qq[0]) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
