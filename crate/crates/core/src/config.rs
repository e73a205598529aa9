//! Run configuration and its flat `key=value` file format.
//!
//! Keys use the hyperparameter names of the reference training setup
//! (`train_batch_size`, `actor_clip_ratio`, ...) plus harness keys. Blank
//! lines and `#` comments are ignored; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::markers::MarkerMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageEstimator {
    /// Reward minus the mean reward of batch entries with the same state.
    BatchMean,
    /// Reward minus a per-state value table fitted by squared error.
    LearnedValue,
    /// Reward itself, no baseline.
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectionMode {
    /// Launch `m * B` executions and keep the first `B` completions.
    BatchOverprovision,
    /// Workers run leased actions back to back; every `B` completions form a batch.
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StragglerAction {
    Cancel,
    DiscardOnCompletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstrumenterKind {
    Pattern,
    Passthrough,
    External,
    Plugin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovePick {
    Uniform,
    Best,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub batch_size: usize,
    pub sampling_multiplier: usize,
    pub total_iterations: usize,
    pub learning_rate: f64,
    pub clip_ratio: f64,
    pub entropy_coeff: f64,
    pub kl_coeff: f64,
    pub gamma: f64,
    pub lam: f64,
    pub grad_clip: f64,
    pub temperature: f64,
    pub exec_timeout: f64,
    pub num_workers: usize,
    pub duration_weighting: bool,
    pub instrumentation: bool,
    pub self_improve: bool,
    pub marker_mode: MarkerMode,
    pub seed: u64,

    pub max_prompt_length: usize,
    pub max_response_length: usize,
    pub actor_ppo_epochs: usize,
    pub inner_epochs: usize,
    pub advantage_estimator: AdvantageEstimator,
    pub critic_learning_rate: f64,
    pub weight_clamp: Option<(f64, f64)>,
    pub duration_floor_s: f64,
    pub collection_mode: CollectionMode,
    pub straggler_action: StragglerAction,
    pub lease_s: f64,
    pub max_staleness: u64,
    pub deterministic: bool,
    pub timing_quantum_s: f64,
    pub checkpoint_interval: usize,
    pub buffer_capacity: usize,
    pub improve_pick: ImprovePick,
    pub include_failed_in_buffer: bool,
    pub reward_normalize: bool,
    pub valid_reward_clamp: Option<f64>,
    pub instrumenter: InstrumenterKind,
    pub plugin_command: Vec<String>,
    pub backend_url: Option<String>,
    pub max_output_bytes: usize,
    pub sandbox_wrapper: Vec<String>,
    pub scratch_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            sampling_multiplier: 2,
            total_iterations: 100,
            learning_rate: 1e-5,
            clip_ratio: 0.2,
            entropy_coeff: 0.001,
            kl_coeff: 0.001,
            gamma: 1.0,
            lam: 1.0,
            grad_clip: 1.0,
            temperature: 0.7,
            exec_timeout: 600.0,
            num_workers: 8,
            duration_weighting: true,
            instrumentation: true,
            self_improve: true,
            marker_mode: MarkerMode::Nonce,
            seed: 0,
            max_prompt_length: 1024,
            max_response_length: 1024,
            actor_ppo_epochs: 100,
            inner_epochs: 1,
            advantage_estimator: AdvantageEstimator::BatchMean,
            critic_learning_rate: 1e-5,
            weight_clamp: Some((0.1, 10.0)),
            duration_floor_s: 0.001,
            collection_mode: CollectionMode::BatchOverprovision,
            straggler_action: StragglerAction::Cancel,
            lease_s: 1.0,
            max_staleness: 0,
            deterministic: false,
            timing_quantum_s: 0.1,
            checkpoint_interval: 10,
            buffer_capacity: 64,
            improve_pick: ImprovePick::Uniform,
            include_failed_in_buffer: true,
            reward_normalize: false,
            valid_reward_clamp: None,
            instrumenter: InstrumenterKind::Pattern,
            plugin_command: Vec::new(),
            backend_url: None,
            max_output_bytes: 1 << 20,
            sandbox_wrapper: Vec::new(),
            scratch_root: None,
        }
    }
}

fn parse_val<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn enum_str<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => unreachable!("unit enum"),
    }
}

fn split_words(v: &str) -> Vec<String> {
    v.split_whitespace().map(str::to_string).collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 1 {
            return fail("train_batch_size must be >= 1");
        }
        if self.sampling_multiplier < 1 {
            return fail("sampling_multiplier must be >= 1");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return fail("actor_clip_ratio must lie in (0, 1)");
        }
        if !(self.temperature > 0.0) {
            return fail("temperature must be > 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lam) {
            return fail("ppo_gamma and ppo_lam must lie in [0, 1]");
        }
        if self.num_workers < 1 {
            return fail("num_workers must be >= 1");
        }
        if !(self.exec_timeout > 0.0) {
            return fail("exec_timeout must be > 0");
        }
        if self.grad_clip <= 0.0 {
            return fail("actor_grad_clip must be > 0");
        }
        if let Some((lo, hi)) = self.weight_clamp {
            if !(lo > 0.0 && lo <= hi) {
                return fail("weight clamp needs 0 < min <= max");
            }
        }
        if self.deterministic && self.num_workers != 1 {
            return fail("deterministic runs require num_workers = 1");
        }
        if self.deterministic && self.collection_mode == CollectionMode::Continuous {
            return fail("deterministic runs require batch_overprovision collection");
        }
        if self.inner_epochs < 1 {
            return fail("inner_epochs must be >= 1");
        }
        if self.lease_s <= 0.0 {
            return fail("lease_s must be > 0");
        }
        if self.instrumenter == InstrumenterKind::Plugin && self.plugin_command.is_empty() {
            return fail("instrumenter = plugin needs plugin_command");
        }
        Ok(())
    }

    pub fn launch_count(&self) -> usize {
        self.batch_size * self.sampling_multiplier
    }

    /// Applies a single `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "train_batch_size" | "actor_ppo_mini_batch_size" => {
                self.batch_size = parse_val(key, v)?
            }
            "sampling_multiplier" => self.sampling_multiplier = parse_val(key, v)?,
            "total_epochs" => self.total_iterations = parse_val(key, v)?,
            "actor_ppo_epochs" => self.actor_ppo_epochs = parse_val(key, v)?,
            "actor_learning_rate" => self.learning_rate = parse_val(key, v)?,
            "actor_clip_ratio" => self.clip_ratio = parse_val(key, v)?,
            "actor_entropy_coeff" => self.entropy_coeff = parse_val(key, v)?,
            "ppo_kl_coef" => self.kl_coeff = parse_val(key, v)?,
            "ppo_gamma" => self.gamma = parse_val(key, v)?,
            "ppo_lam" => self.lam = parse_val(key, v)?,
            "actor_grad_clip" => self.grad_clip = parse_val(key, v)?,
            "temperature" => self.temperature = parse_val(key, v)?,
            "max_prompt_length" | "prompt_length" => self.max_prompt_length = parse_val(key, v)?,
            "max_response_length" | "response_length" => {
                self.max_response_length = parse_val(key, v)?
            }
            "critic_learning_rate" => self.critic_learning_rate = parse_val(key, v)?,
            "adv_estimator" => {
                self.advantage_estimator = match v {
                    "batch_mean" | "batch_mean_baseline" => AdvantageEstimator::BatchMean,
                    "gae" | "learned_value" => AdvantageEstimator::LearnedValue,
                    "monte_carlo" => AdvantageEstimator::MonteCarlo,
                    _ => return Err(Error::Config(format!("bad adv_estimator `{v}`"))),
                }
            }
            "top_k" => {
                if v != "-1" {
                    return Err(Error::Config("only top_k = -1 is supported".into()));
                }
            }
            "top_p" => {
                if parse_val::<f64>(key, v)? != 1.0 {
                    return Err(Error::Config("only top_p = 1 is supported".into()));
                }
            }
            "exec_timeout" => self.exec_timeout = parse_val(key, v)?,
            "num_workers" => self.num_workers = parse_val(key, v)?,
            "duration_weighting" => self.duration_weighting = parse_bool(key, v)?,
            "instrumentation" => self.instrumentation = parse_bool(key, v)?,
            "self_improve" => self.self_improve = parse_bool(key, v)?,
            "marker_mode" => self.marker_mode = parse_enum(key, v)?,
            "seed" => self.seed = parse_val(key, v)?,
            "inner_epochs" => self.inner_epochs = parse_val(key, v)?,
            "weight_clamp" => {
                self.weight_clamp = if v == "none" {
                    None
                } else {
                    let (lo, hi) = v.split_once(',').ok_or_else(|| {
                        Error::Config("weight_clamp expects `min,max` or `none`".into())
                    })?;
                    Some((parse_val(key, lo.trim())?, parse_val(key, hi.trim())?))
                }
            }
            "duration_floor_s" => self.duration_floor_s = parse_val(key, v)?,
            "collection_mode" => self.collection_mode = parse_enum(key, v)?,
            "straggler_action" => self.straggler_action = parse_enum(key, v)?,
            "lease_s" => self.lease_s = parse_val(key, v)?,
            "max_staleness" => self.max_staleness = parse_val(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "timing_quantum_s" => self.timing_quantum_s = parse_val(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_val(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse_val(key, v)?,
            "improve_pick" => self.improve_pick = parse_enum(key, v)?,
            "include_failed_in_buffer" => self.include_failed_in_buffer = parse_bool(key, v)?,
            "reward_normalize" => self.reward_normalize = parse_bool(key, v)?,
            "valid_reward_clamp" => {
                self.valid_reward_clamp = if v == "none" {
                    None
                } else {
                    Some(parse_val(key, v)?)
                }
            }
            "instrumenter" => self.instrumenter = parse_enum(key, v)?,
            "plugin_command" => self.plugin_command = split_words(v),
            "backend_url" => {
                self.backend_url = if v.is_empty() {
                    None
                } else {
                    Some(v.to_string())
                }
            }
            "max_output_bytes" => self.max_output_bytes = parse_val(key, v)?,
            "sandbox_wrapper" => self.sandbox_wrapper = split_words(v),
            "scratch_root" => {
                self.scratch_root = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::parse(&text)
    }

    /// Serialises every setting; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("train_batch_size", self.batch_size.to_string());
        kv("sampling_multiplier", self.sampling_multiplier.to_string());
        kv("total_epochs", self.total_iterations.to_string());
        kv("actor_ppo_epochs", self.actor_ppo_epochs.to_string());
        kv("actor_learning_rate", self.learning_rate.to_string());
        kv("actor_clip_ratio", self.clip_ratio.to_string());
        kv("actor_entropy_coeff", self.entropy_coeff.to_string());
        kv("ppo_kl_coef", self.kl_coeff.to_string());
        kv("ppo_gamma", self.gamma.to_string());
        kv("ppo_lam", self.lam.to_string());
        kv("actor_grad_clip", self.grad_clip.to_string());
        kv("temperature", self.temperature.to_string());
        kv("max_prompt_length", self.max_prompt_length.to_string());
        kv("max_response_length", self.max_response_length.to_string());
        kv(
            "critic_learning_rate",
            self.critic_learning_rate.to_string(),
        );
        kv(
            "adv_estimator",
            match self.advantage_estimator {
                AdvantageEstimator::BatchMean => "batch_mean",
                AdvantageEstimator::LearnedValue => "gae",
                AdvantageEstimator::MonteCarlo => "monte_carlo",
            }
            .into(),
        );
        kv("exec_timeout", self.exec_timeout.to_string());
        kv("num_workers", self.num_workers.to_string());
        kv("duration_weighting", self.duration_weighting.to_string());
        kv("instrumentation", self.instrumentation.to_string());
        kv("self_improve", self.self_improve.to_string());
        kv("marker_mode", enum_str(&self.marker_mode));
        kv("seed", self.seed.to_string());
        kv("inner_epochs", self.inner_epochs.to_string());
        kv(
            "weight_clamp",
            match self.weight_clamp {
                Some((lo, hi)) => format!("{lo},{hi}"),
                None => "none".into(),
            },
        );
        kv("duration_floor_s", self.duration_floor_s.to_string());
        kv("collection_mode", enum_str(&self.collection_mode));
        kv("straggler_action", enum_str(&self.straggler_action));
        kv("lease_s", self.lease_s.to_string());
        kv("max_staleness", self.max_staleness.to_string());
        kv("deterministic", self.deterministic.to_string());
        kv("timing_quantum_s", self.timing_quantum_s.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("buffer_capacity", self.buffer_capacity.to_string());
        kv("improve_pick", enum_str(&self.improve_pick));
        kv(
            "include_failed_in_buffer",
            self.include_failed_in_buffer.to_string(),
        );
        kv("reward_normalize", self.reward_normalize.to_string());
        kv(
            "valid_reward_clamp",
            self.valid_reward_clamp
                .map_or("none".into(), |c| c.to_string()),
        );
        kv("instrumenter", enum_str(&self.instrumenter));
        kv("plugin_command", self.plugin_command.join(" "));
        kv("backend_url", self.backend_url.clone().unwrap_or_default());
        kv("max_output_bytes", self.max_output_bytes.to_string());
        kv("sandbox_wrapper", self.sandbox_wrapper.join(" "));
        kv(
            "scratch_root",
            self.scratch_root
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.clip_ratio, 0.2);
        assert_eq!(c.entropy_coeff, 0.001);
        assert_eq!(c.kl_coeff, 0.001);
        assert_eq!((c.gamma, c.lam), (1.0, 1.0));
        assert_eq!(c.grad_clip, 1.0);
        assert_eq!(c.temperature, 0.7);
        assert_eq!((c.max_prompt_length, c.max_response_length), (1024, 1024));
        assert_eq!(c.sampling_multiplier, 2);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.batch_size = 16;
        c.weight_clamp = None;
        c.valid_reward_clamp = Some(-9.0);
        c.plugin_command = vec!["python3".into(), "plugin.py".into()];
        c.collection_mode = CollectionMode::Continuous;
        c.advantage_estimator = AdvantageEstimator::MonteCarlo;
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("no_such_key=1").is_err());
        assert!(RunConfig::parse("actor_clip_ratio=1.5").is_err());
        assert!(RunConfig::parse("temperature=0").is_err());
        assert!(RunConfig::parse("train_batch_size=0").is_err());
        assert!(RunConfig::parse("sampling_multiplier=0").is_err());
        assert!(RunConfig::parse("deterministic=true\nnum_workers=4").is_err());
        assert!(RunConfig::parse("justtext").is_err());
    }

    #[test]
    fn comments_and_aliases() {
        let c =
            RunConfig::parse("# desk run\ntrain_batch_size = 16\n\nadv_estimator=gae\n").unwrap();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.advantage_estimator, AdvantageEstimator::LearnedValue);
    }
}
