//! End-to-end experiment plumbing shared by the command line and the
//! acceptance checks: belief construction, training runs and delay grids.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::ensemble::{EnsembleBelief, EnsembleConfig};
use crate::belief::transformer::{BeliefMode, TransformerBelief, TransformerConfig};
use crate::belief::{stepwise_mse, AnalyticBelief, BeliefBatch, BeliefModel, BeliefPredictor};
use crate::delayed::{belief_samples, BeliefSample};
use crate::error::{Error, Result};
use crate::learner::neural::{load_policy, save_policy, AugmentedBc, NeuralActor};
use crate::learner::train::{train_augmented_bc, DelayedData, DtcorlTrainer, EpochMetrics, TrainConfig, VecTransition};
use crate::rollout::{evaluate, generate_behavior_dataset, ActorAgent, BehaviorKind, DelayKind, DelayProcess, DelayedPolicy, EnvId, EvalSummary, References, WarmUp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeliefArch {
    Transformer,
    Ensemble,
    /// Noise-free rollout of the environment's mean dynamics.
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeliefSpec {
    pub arch: BeliefArch,
    pub mode: BeliefMode,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    /// Learning rate; the architecture default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    pub n_members: usize,
    pub hidden: usize,
    pub n_hidden_layers: usize,
}

impl Default for BeliefSpec {
    fn default() -> Self {
        let t = TransformerConfig::new(1, 1, 1);
        let e = EnsembleConfig::new(1, 1, 1);
        Self {
            arch: BeliefArch::Transformer,
            mode: t.mode,
            d_model: t.d_model,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            ff_width: t.ff_width,
            dropout: t.dropout,
            lr: None,
            n_members: e.n_members,
            hidden: e.hidden,
            n_hidden_layers: e.n_hidden_layers,
        }
    }
}

impl BeliefSpec {
    /// Small models that train in seconds on one core.
    pub fn small() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            ff_width: 64,
            dropout: 0.0,
            lr: Some(1e-3),
            n_members: 5,
            hidden: 64,
            ..Self::default()
        }
    }

    pub fn transformer_config(&self, state_dim: usize, action_dim: usize, max_delay: usize) -> TransformerConfig {
        let mut c = TransformerConfig::new(state_dim, action_dim, max_delay);
        c.d_model = self.d_model;
        c.n_layers = self.n_layers;
        c.n_heads = self.n_heads;
        c.ff_width = self.ff_width;
        c.dropout = self.dropout;
        c.mode = self.mode;
        if let Some(lr) = self.lr {
            c.lr = lr;
        }
        c
    }

    pub fn ensemble_config(&self, state_dim: usize, action_dim: usize, max_delay: usize) -> EnsembleConfig {
        let mut c = EnsembleConfig::new(state_dim, action_dim, max_delay);
        c.n_members = self.n_members;
        c.hidden = self.hidden;
        c.n_hidden_layers = self.n_hidden_layers;
        if let Some(lr) = self.lr {
            c.lr = lr;
        }
        c
    }

    pub fn build(&self, env: EnvId, max_delay: usize, rng: &mut ChaCha8Rng) -> Result<BeliefModel> {
        let e = env.build()?;
        let (sd, ad) = (e.state_dim(), e.action_dim());
        Ok(match self.arch {
            BeliefArch::Transformer => {
                BeliefModel::Transformer(TransformerBelief::new(self.transformer_config(sd, ad, max_delay), rng)?)
            }
            BeliefArch::Ensemble => BeliefModel::Ensemble(EnsembleBelief::new(self.ensemble_config(sd, ad, max_delay), rng)?),
            BeliefArch::Analytic => BeliefModel::Fixed(Box::new(AnalyticBelief::new(sd, max_delay, move |s: &[f64], a: &[f64]| {
                e.mean_step(s, a)
            }))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dtcorl,
    AugmentedBc,
}

/// A delay setting; `mean` only matters for the mean-matched kinds and
/// defaults to half of `max_delay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub kind: DelayKind,
    pub max_delay: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
}

impl Default for DelaySpec {
    fn default() -> Self {
        Self::deterministic(4)
    }
}

impl DelaySpec {
    pub fn deterministic(delay: usize) -> Self {
        Self {
            kind: DelayKind::Deterministic,
            max_delay: delay,
            mean: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.mean {
            if !(m.is_finite() && m <= self.max_delay as f64) {
                return Err(Error::Config(format!(
                    "delay.mean: {m} exceeds max_delay {}",
                    self.max_delay
                )));
            }
        }
        self.process().map(|_| ())
    }

    pub fn process(&self) -> Result<DelayProcess> {
        let mean = self.mean.unwrap_or(self.max_delay as f64 / 2.0);
        DelayProcess::new(self.kind, self.max_delay, mean)
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            DelayKind::Deterministic => "deterministic",
            DelayKind::Uniform => "uniform",
            DelayKind::Gaussian => "gaussian",
            DelayKind::Exponential => "exponential",
            DelayKind::Binomial => "binomial",
        }
    }
}

/// One deterministic and one `stochastic` cell per delay; the stochastic
/// cell is skipped at zero delay.
pub fn delay_grid(delays: &[usize], stochastic: DelayKind) -> Vec<DelaySpec> {
    let mut out = Vec::with_capacity(2 * delays.len());
    for &d in delays {
        out.push(DelaySpec::deterministic(d));
        if d > 0 && stochastic != DelayKind::Deterministic {
            out.push(DelaySpec {
                kind: stochastic,
                max_delay: d,
                mean: None,
            });
        }
    }
    out
}

/// Evaluation settings used during and after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub episodes: usize,
    pub seed: u64,
    pub warm_up: WarmUp,
    /// Seed of the random/expert reference runs used for normalization.
    pub reference_seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            episodes: 10,
            seed: 1_000_000,
            warm_up: WarmUp::Random,
            reference_seed: 12_345,
        }
    }
}

/// A trained delayed agent.
pub enum TrainedPolicy {
    Dtcorl { actor: NeuralActor, belief: BeliefModel },
    AugmentedBc(AugmentedBc),
}

impl TrainedPolicy {
    pub fn agent(&self) -> Box<dyn DelayedPolicy + '_> {
        match self {
            TrainedPolicy::Dtcorl { actor, belief } => Box::new(ActorAgent { actor, belief }),
            TrainedPolicy::AugmentedBc(m) => Box::new(m.clone()),
        }
    }

    /// Deployment window capacity.
    pub fn max_delay(&self) -> usize {
        match self {
            TrainedPolicy::Dtcorl { belief, .. } => belief.max_delay(),
            TrainedPolicy::AugmentedBc(m) => m.max_delay,
        }
    }

    pub fn evaluate(&self, env: EnvId, delay: &DelaySpec, spec: &EvalSpec, seed_offset: u64) -> Result<EvalSummary> {
        if delay.max_delay > self.max_delay() {
            return Err(Error::WindowTooLong {
                got: delay.max_delay,
                max: self.max_delay(),
            });
        }
        let e = env.build()?;
        let refs = References::cached(e.as_ref(), spec.reference_seed)?;
        let agent = self.agent();
        evaluate(
            e.as_ref(),
            agent.as_ref(),
            &delay.process()?,
            spec.episodes,
            spec.seed.wrapping_add(seed_offset),
            &refs,
            spec.warm_up,
        )
    }
}

impl TrainedPolicy {
    pub fn save<W1: std::io::Write, W2: std::io::Write>(&self, run: &RunSpec, policy: W1, belief: Option<W2>) -> Result<()> {
        let e = run.env.build()?;
        let cfg = policy_config_json(run, e.state_dim(), e.action_dim());
        match self {
            TrainedPolicy::Dtcorl { actor, belief: b } => {
                save_policy(policy, &cfg, actor, None)?;
                if let (Some(w), Some(_)) = (belief, b.learned()) {
                    b.save(w)?;
                }
                Ok(())
            }
            TrainedPolicy::AugmentedBc(m) => save_policy(policy, &cfg, &m.actor, None),
        }
    }

    /// Rebuilds a policy from checkpoints; the stored config must match
    /// `run` and the belief checkpoint is required for learned beliefs.
    pub fn load<R1: std::io::Read, R2: std::io::Read>(run: &RunSpec, policy: R1, belief: Option<R2>) -> Result<Self> {
        let e = run.env.build()?;
        let (sd, ad) = (e.state_dim(), e.action_dim());
        let cfg = policy_config_json(run, sd, ad);
        let l = &run.train.learner;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match run.algorithm {
            Algorithm::AugmentedBc => {
                let mut m = AugmentedBc::new(sd, ad, run.train.delay, l.hidden, l.actor_lr, &mut rng);
                load_policy(policy, &cfg, &mut m.actor, None)?;
                Ok(TrainedPolicy::AugmentedBc(m))
            }
            Algorithm::Dtcorl => {
                let mut actor = NeuralActor::new(sd, ad, l.hidden, l.actor_lr, &mut rng);
                load_policy(policy, &cfg, &mut actor, None)?;
                let mut b = run.belief.build(run.env, run.train.delay, &mut rng)?;
                if b.learned().is_some() {
                    let r = belief.ok_or_else(|| Error::Checkpoint("learned belief needs its checkpoint".into()))?;
                    b.load_params(r)?;
                }
                Ok(TrainedPolicy::Dtcorl { actor, belief: b })
            }
        }
    }
}

/// Everything one training run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub env: EnvId,
    pub algorithm: Algorithm,
    pub belief: BeliefSpec,
    pub train: TrainConfig,
    pub joint: bool,
}

/// Config blob stored in policy checkpoints; resuming requires equality.
pub fn policy_config_json(run: &RunSpec, state_dim: usize, action_dim: usize) -> serde_json::Value {
    serde_json::json!({
        "env": run.env,
        "algorithm": run.algorithm,
        "state_dim": state_dim,
        "action_dim": action_dim,
        "delay": run.train.delay,
        "hidden": run.train.learner.hidden,
        "belief": run.belief,
    })
}

/// Trains on delay-free trajectories; per-epoch metrics carry the return of
/// a deterministic-delay evaluation at the training delay when `eval` is
/// given.
pub fn run_training(
    trajectories: &[Vec<VecTransition>],
    run: &RunSpec,
    eval: Option<&EvalSpec>,
) -> Result<(TrainedPolicy, Vec<EpochMetrics>)> {
    let delay = DelaySpec::deterministic(run.train.delay);
    match run.algorithm {
        Algorithm::AugmentedBc => {
            let mut hook = |m: &AugmentedBc| -> Result<(f64, f64)> {
                let s = TrainedPolicy::AugmentedBc(m.clone()).evaluate(run.env, &delay, eval.expect("hook only with eval"), 0)?;
                Ok((s.return_mean, s.return_std))
            };
            let (model, metrics) = if eval.is_some() {
                train_augmented_bc(trajectories, &run.train, Some(&mut hook))?
            } else {
                train_augmented_bc(trajectories, &run.train, None)?
            };
            Ok((TrainedPolicy::AugmentedBc(model), metrics))
        }
        Algorithm::Dtcorl => {
            let mut session = Session::new(trajectories, run)?;
            session.pretrain()?;
            let mut metrics = Vec::with_capacity(run.train.epochs);
            for _ in 0..run.train.epochs {
                metrics.push(session.epoch(eval)?);
            }
            Ok((session.finish(), metrics))
        }
    }
}

/// Epoch-at-a-time actor-critic training that can be checkpointed and
/// resumed.
pub struct Session {
    pub run: RunSpec,
    pub trainer: DtcorlTrainer,
    pub belief: BeliefModel,
}

impl Session {
    pub fn new(trajectories: &[Vec<VecTransition>], run: &RunSpec) -> Result<Self> {
        if run.algorithm != Algorithm::Dtcorl {
            return Err(Error::Config("sessions drive the actor-critic learner only".into()));
        }
        let data = DelayedData::new(trajectories, run.train.delay)?;
        let e = run.env.build()?;
        if data.state_dim != e.state_dim() || data.action_dim != e.action_dim() {
            return Err(Error::DimensionMismatch {
                expected: e.state_dim(),
                got: data.state_dim,
            });
        }
        // The belief gets its own stream so architectures can be swapped
        // without touching the learner's draws.
        let mut rng = ChaCha8Rng::seed_from_u64(run.train.seed ^ 0xB5E1_1EF0);
        let belief = run.belief.build(run.env, run.train.delay, &mut rng)?;
        let trainer = DtcorlTrainer::new(data, run.train.clone(), run.joint)?;
        Ok(Self {
            run: run.clone(),
            trainer,
            belief,
        })
    }

    pub fn pretrain(&mut self) -> Result<f64> {
        self.trainer.pretrain_belief(&mut self.belief)
    }

    pub fn epoch(&mut self, eval: Option<&EvalSpec>) -> Result<EpochMetrics> {
        let env = self.run.env;
        let delay = DelaySpec::deterministic(self.run.train.delay);
        match eval {
            Some(spec) => {
                let mut hook = |actor: &NeuralActor, belief: &BeliefModel| -> Result<(f64, f64)> {
                    let agent = ActorAgent { actor, belief };
                    let e = env.build()?;
                    let refs = References::cached(e.as_ref(), spec.reference_seed)?;
                    let s = evaluate(e.as_ref(), &agent, &delay.process()?, spec.episodes, spec.seed, &refs, spec.warm_up)?;
                    Ok((s.return_mean, s.return_std))
                };
                self.trainer.run_epoch(&mut self.belief, Some(&mut hook))
            }
            None => self.trainer.run_epoch(&mut self.belief, None),
        }
    }

    pub fn config_json(&self) -> serde_json::Value {
        policy_config_json(&self.run, self.trainer.data.state_dim, self.trainer.data.action_dim)
    }

    /// Writes the policy and (for learned beliefs) belief checkpoints.
    pub fn save<W1: std::io::Write, W2: std::io::Write>(&self, policy: W1, belief: Option<W2>) -> Result<()> {
        save_policy(policy, &self.config_json(), &self.trainer.actor, Some(&self.trainer.critic))?;
        if let (Some(w), Some(_)) = (belief, self.belief.learned()) {
            self.belief.save(w)?;
        }
        Ok(())
    }

    /// Restores weights written by [`Session::save`]; a checkpoint from a
    /// different configuration is rejected.
    pub fn restore<R1: std::io::Read, R2: std::io::Read>(&mut self, policy: R1, belief: Option<R2>, epoch: usize) -> Result<()> {
        let cfg = self.config_json();
        load_policy(policy, &cfg, &mut self.trainer.actor, Some(&mut self.trainer.critic))?;
        if let (Some(r), Some(_)) = (belief, self.belief.learned()) {
            self.belief.load_params(r)?;
        }
        self.trainer.resume_at(epoch);
        Ok(())
    }

    pub fn finish(self) -> TrainedPolicy {
        TrainedPolicy::Dtcorl {
            actor: self.trainer.actor,
            belief: self.belief,
        }
    }
}

/// Accuracy/speed comparison of the two learned beliefs under equal
/// training budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub env: EnvId,
    pub behavior: BehaviorKind,
    pub horizon: usize,
    pub trajectories: usize,
    pub train_steps: usize,
    pub batch: usize,
    pub test_windows: usize,
    pub latency_calls: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            env: EnvId::Chain,
            behavior: BehaviorKind::Medium,
            horizon: 16,
            trajectories: 200,
            train_steps: 1000,
            batch: 64,
            test_windows: 500,
            latency_calls: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub model: String,
    pub params: usize,
    pub calls: usize,
    pub mean_latency_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    /// `(model, error k steps ahead for k = 1..=horizon)`
    pub mse: Vec<(String, Vec<f64>)>,
    pub latency: Vec<LatencyRow>,
}

impl BenchResult {
    pub fn final_mse(&self, model: &str) -> Option<f64> {
        self.mse.iter().find(|(m, _)| m == model).and_then(|(_, v)| v.last().copied())
    }

    pub fn latency_us(&self, model: &str) -> Option<f64> {
        self.latency.iter().find(|r| r.model == model).map(|r| r.mean_latency_us)
    }
}

pub const BENCH_MSE_HEADER: &str = "seed,model,step,mse";
pub const BENCH_LATENCY_HEADER: &str = "seed,model,params,calls,mean_latency_us";

pub fn belief_bench(spec: &BenchSpec, belief: &BeliefSpec, seed: u64) -> Result<BenchResult> {
    if spec.horizon == 0 || spec.train_steps == 0 || spec.batch == 0 || spec.test_windows == 0 || spec.latency_calls == 0 {
        return Err(Error::Config("bench sizes must be positive".into()));
    }
    let env = spec.env.build()?;
    let pad = vec![0.0; env.action_dim()];
    let samples = |trajs: &[Vec<VecTransition>]| -> Vec<BeliefSample<Vec<f64>, Vec<f64>>> {
        trajs
            .iter()
            .flat_map(|t| belief_samples(t, spec.horizon, pad.clone()))
            .collect()
    };
    let train = samples(&generate_behavior_dataset(env.as_ref(), spec.behavior, spec.trajectories, seed));
    let held_out: Vec<_> = samples(&generate_behavior_dataset(
        env.as_ref(),
        spec.behavior,
        spec.trajectories.max(1),
        seed ^ 0x7E57_7E57,
    ))
    .into_iter()
    .filter(|s| s.n_masked == 0)
    .take(spec.test_windows)
    .collect();
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let test = BeliefBatch::from_samples(&held_out);
    let probe = test.windows[0].clone();

    let mut mse = Vec::new();
    let mut latency = Vec::new();
    for arch in [BeliefArch::Transformer, BeliefArch::Ensemble] {
        let name = if arch == BeliefArch::Transformer { "transformer" } else { "ensemble" };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = BeliefSpec { arch, ..belief.clone() }.build(spec.env, spec.horizon, &mut rng)?;
        let learned = model.learned_mut().expect("learned architectures only");
        for _ in 0..spec.train_steps {
            let picked: Vec<_> = (0..spec.batch)
                .map(|_| train[rng.random_range(0..train.len())].clone())
                .collect();
            learned.train_step(&BeliefBatch::from_samples(&picked), &mut rng)?;
        }
        mse.push((name.to_string(), stepwise_mse(&model, &test, spec.horizon)?));
        let start = Instant::now();
        for _ in 0..spec.latency_calls {
            std::hint::black_box(model.predict(std::slice::from_ref(&probe))?);
        }
        latency.push(LatencyRow {
            model: name.to_string(),
            params: model.learned().map_or(0, |m| m.params().n_scalars()),
            calls: spec.latency_calls,
            mean_latency_us: start.elapsed().as_secs_f64() * 1e6 / spec.latency_calls as f64,
        });
    }
    Ok(BenchResult { mse, latency })
}

pub fn write_bench_csv<W1: std::io::Write, W2: std::io::Write>(
    mut mse: W1,
    mut latency: W2,
    results: &[(u64, BenchResult)],
) -> Result<()> {
    writeln!(mse, "{BENCH_MSE_HEADER}")?;
    writeln!(latency, "{BENCH_LATENCY_HEADER}")?;
    for (seed, r) in results {
        for (model, errs) in &r.mse {
            for (k, e) in errs.iter().enumerate() {
                writeln!(mse, "{seed},{model},{},{e}", k + 1)?;
            }
        }
        for l in &r.latency {
            writeln!(latency, "{seed},{},{},{},{}", l.model, l.params, l.calls, l.mean_latency_us)?;
        }
    }
    Ok(())
}
