//! Experiment configuration: built-in profile defaults, then the TOML file,
//! then `DTCORL_SECTION__KEY` environment overrides, then command-line flags.

use std::path::{Path, PathBuf};

use dtcorl_core::learner::LearnerConfig;
use dtcorl_core::pipeline::{Algorithm, BenchSpec, BeliefSpec, DelaySpec, EvalSpec};
use dtcorl_core::rollout::{BehaviorKind, DelayKind, EnvId, WarmUp};
use dtcorl_core::theory::SuiteConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ENV_PREFIX: &str = "DTCORL_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Smoke,
    Full,
}

/// Delay sweep. Every grid delay trains its own model and is evaluated in
/// a deterministic cell and a stochastic cell of `kind` bounded by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelaySection {
    pub kind: DelayKind,
    /// Largest delay of the sweep.
    pub max_delay: usize,
    /// Mean of the mean-matched kinds at `max_delay`, scaled down
    /// proportionally for smaller grid delays; half the bound when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    pub grid: Vec<usize>,
}

impl Default for DelaySection {
    fn default() -> Self {
        Self {
            kind: DelayKind::Uniform,
            max_delay: 16,
            mean: None,
            grid: vec![4, 8, 16],
        }
    }
}

impl DelaySection {
    /// The deterministic and stochastic cells of grid delay `d`.
    pub fn cells(&self, d: usize) -> Vec<DelaySpec> {
        let mut out = vec![DelaySpec::deterministic(d)];
        if d > 0 && self.kind != DelayKind::Deterministic {
            out.push(DelaySpec {
                kind: self.kind,
                max_delay: d,
                mean: self.mean.map(|m| m * d as f64 / self.max_delay as f64),
            });
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.grid.is_empty() {
            return Err(CliError::Config("delay.grid: at least one delay is required".into()));
        }
        if let Some(m) = self.mean {
            if !(m.is_finite() && m <= self.max_delay as f64) {
                return Err(CliError::Config(format!(
                    "delay.mean: {m} must not exceed max_delay {}",
                    self.max_delay
                )));
            }
        }
        for &d in &self.grid {
            if d > self.max_delay {
                return Err(CliError::Config(format!(
                    "delay.grid: {d} exceeds max_delay {}",
                    self.max_delay
                )));
            }
            for cell in self.cells(d) {
                cell.process()
                    .map_err(|e| CliError::Config(format!("delay: grid delay {d}: {e}")))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub behavior: BehaviorKind,
    /// Trajectories generated per seed.
    pub trajectories: usize,
    /// Share of the generated trajectories kept, chosen by seeded shuffle.
    pub fraction: f64,
    pub format: DatasetFormat,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            behavior: BehaviorKind::Medium,
            trajectories: 100,
            fraction: 1.0,
            format: DatasetFormat::Jsonl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSection {
    pub algorithm: Algorithm,
    /// Keep training the belief alongside the actor-critic.
    pub joint: bool,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub belief_pretrain_steps: usize,
    pub belief_batch: usize,
    /// Episodes of the per-epoch evaluation; 0 skips it.
    pub epoch_eval_episodes: usize,
    pub hyper: LearnerConfig,
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dtcorl,
            joint: true,
            epochs: 10,
            steps_per_epoch: 1000,
            belief_pretrain_steps: 2000,
            belief_batch: 256,
            epoch_eval_episodes: 10,
            hyper: LearnerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPolicy {
    /// The checkpoints written by `train`.
    Trained,
    /// The environment's expert acting on the stale observation.
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub policy: EvalPolicy,
    pub episodes: usize,
    pub seed: u64,
    pub warm_up: WarmUp,
    pub reference_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalSpec::default();
        Self {
            policy: EvalPolicy::Trained,
            episodes: e.episodes,
            seed: e.seed,
            warm_up: e.warm_up,
            reference_seed: e.reference_seed,
        }
    }
}

impl EvalSection {
    pub fn spec(&self, episodes: usize) -> EvalSpec {
        EvalSpec {
            episodes,
            seed: self.seed,
            warm_up: self.warm_up,
            reference_seed: self.reference_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Lemma,
    Identity,
    Derivation,
    Proposition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub suites: Vec<SuiteKind>,
    /// Test hook: flips the sign of every W1 distance in the bounds.
    pub fault_flip_w1: bool,
    pub family: SuiteConfig,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            suites: vec![SuiteKind::Lemma, SuiteKind::Identity, SuiteKind::Derivation, SuiteKind::Proposition],
            fault_flip_w1: false,
            family: SuiteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub delay: DelaySection,
    pub dataset: DatasetSection,
    pub belief: BeliefSpec,
    pub learner: LearnerSection,
    pub eval: EvalSection,
    pub verify: VerifySection,
    pub bench: BenchSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Profile::Full)
    }
}

impl ExperimentConfig {
    pub fn preset(profile: Profile) -> Self {
        let full = Self {
            env: EnvId::Pointmass1d,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs"),
            delay: DelaySection::default(),
            dataset: DatasetSection::default(),
            belief: BeliefSpec::default(),
            learner: LearnerSection::default(),
            eval: EvalSection::default(),
            verify: VerifySection::default(),
            bench: BenchSpec::default(),
        };
        match profile {
            Profile::Full => full,
            Profile::Smoke => {
                let mut c = full;
                c.seeds = vec![0];
                c.dataset.trajectories = 10;
                c.belief = BeliefSpec {
                    d_model: 16,
                    n_layers: 1,
                    n_heads: 2,
                    ff_width: 32,
                    n_members: 2,
                    hidden: 16,
                    ..BeliefSpec::small()
                };
                c.learner.epochs = 1;
                c.learner.steps_per_epoch = 50;
                c.learner.belief_pretrain_steps = 50;
                c.learner.belief_batch = 32;
                c.learner.epoch_eval_episodes = 2;
                c.learner.hyper.hidden = 32;
                c.learner.hyper.batch_size = 32;
                c.learner.hyper.grid_resolution = 8;
                c.delay.max_delay = 4;
                c.delay.grid = vec![4];
                c.eval.episodes = 2;
                c.verify.family.n_mdps = 2;
                c.verify.family.n_policy_pairs = 2;
                c.verify.family.n_triples = 5;
                c.verify.family.prop_iters = 2;
                c.bench.trajectories = 20;
                c.bench.train_steps = 20;
                c.bench.batch = 16;
                c.bench.test_windows = 50;
                c.bench.latency_calls = 5;
                c
            }
        }
    }

    /// Field-level checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        let f = self.dataset.fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("dataset.fraction: must lie in (0, 1], got {f}"));
        }
        if self.dataset.trajectories == 0 {
            return bad("dataset.trajectories: must be at least 1".into());
        }
        self.delay.validate()?;
        if self.eval.policy == EvalPolicy::Trained && self.delay.grid.contains(&0) {
            return bad("delay.grid: delay 0 is only evaluated with eval.policy = \"expert\"".into());
        }
        self.learner
            .hyper
            .validate()
            .map_err(|e| CliError::Config(format!("learner.hyper: {e}")))?;
        if self.learner.epochs == 0 || self.learner.steps_per_epoch == 0 || self.learner.belief_batch == 0 {
            return bad("learner: epochs, steps_per_epoch and belief_batch must be at least 1".into());
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes: must be at least 1".into());
        }
        if self.belief.n_heads == 0 || self.belief.d_model % self.belief.n_heads != 0 {
            return bad(format!(
                "belief.d_model: {} is not divisible by n_heads {}",
                self.belief.d_model, self.belief.n_heads
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Overlays `src` onto `dst`, recursing into tables.
fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// A raw override parsed as a TOML value when possible (`3`, `true`,
/// `[1, 2]`, `"x"`), else taken as a bare string.
fn parse_override(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `DTCORL_SECTION__KEY=value` pairs; other variables are ignored.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::Config(format!("{key}: malformed override name")));
        }
        let (last, parents) = path.split_last().expect("split yields one part");
        let mut cur = &mut *table;
        for p in parents {
            let entry = cur
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = match entry {
                toml::Value::Table(t) => t,
                _ => return Err(CliError::Config(format!("{key}: {p} is not a section"))),
            };
        }
        cur.insert(last.clone(), parse_override(&raw));
    }
    Ok(())
}

/// Resolves the final config from a profile, an optional file and
/// overrides.
pub fn load<I>(path: Option<&Path>, profile: Profile, vars: I) -> Result<ExperimentConfig, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = toml::Table::try_from(ExperimentConfig::preset(profile))
        .map_err(|e| CliError::Config(format!("default config: {e}")))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        merge(&mut table, file);
    }
    apply_overrides(&mut table, vars)?;
    let cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
