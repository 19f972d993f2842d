//! The five subcommands. Seeds (and grid delays) run on scoped worker
//! threads, each with its own seed-derived streams; results are reduced
//! in job order so outputs do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use dtcorl_core::delayed::io::{read_dataset, records_from_trajectories, trajectories, write_binary, write_jsonl, DatasetHeader};
use dtcorl_core::learner::train::{EpochMetrics, TrainConfig, VecTransition, METRICS_HEADER};
use dtcorl_core::pipeline::{belief_bench, run_training, Algorithm, DelaySpec, RunSpec, Session, TrainedPolicy};
use dtcorl_core::rollout::{evaluate, generate_behavior_dataset, BeliefAgent, EnvId, EvalSummary, References};
use dtcorl_core::theory::{
    run_derivation_suite, run_identity_suite, run_lemma_suite, run_proposition_suite, write_reports_csv, SuiteSummary,
    Verifier,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetFormat, EvalPolicy, ExperimentConfig, SuiteKind};
use crate::files::{read, sha256_hex, unix_time, write_atomic, DatasetManifest, Layout};
use crate::{CliError, Result};

const SELECT_SALT: u64 = 0x5E1E_C7ED;

fn wio(e: std::io::Error) -> CliError {
    CliError::Core(e.into())
}

/// Runs `f` on every job in its own thread and returns the results in job
/// order; the first failing job (in that order) wins.
fn parallel<J: Sync, T: Send>(jobs: &[J], f: impl Fn(&J) -> Result<T> + Sync) -> Result<Vec<T>> {
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.iter().map(|j| scope.spawn(move || f(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn env_name(env: EnvId) -> String {
    serde_json::to_value(env)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// `ceil(fraction * k)` indices out of `0..k`, picked by a seeded shuffle and
/// returned in ascending order.
pub fn select_fraction(k: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let keep = ((fraction * k as f64).ceil() as usize).clamp(1, k.max(1)).min(k);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SELECT_SALT));
    let mut kept = idx[..keep].to_vec();
    kept.sort_unstable();
    kept
}

// ── generate ─────────────────────────────────────────────────────────────

pub fn generate(cfg: &ExperimentConfig) -> Result<Vec<DatasetManifest>> {
    let layout = Layout::new(&cfg.out_dir);
    let manifests = parallel(&cfg.seeds, |&seed| {
        let env = cfg.env.build()?;
        let d = &cfg.dataset;
        let all = generate_behavior_dataset(env.as_ref(), d.behavior, d.trajectories, seed);
        let kept: Vec<_> = select_fraction(all.len(), d.fraction, seed)
            .into_iter()
            .map(|i| all[i].clone())
            .collect();
        let records = records_from_trajectories(&kept);
        let behavior = serde_json::to_value(d.behavior)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let header = DatasetHeader {
            delay: 0,
            state_dim: env.state_dim(),
            action_dim: env.action_dim(),
            n_records: records.len(),
            meta: BTreeMap::from([
                ("env".to_string(), env_name(cfg.env)),
                ("behavior".to_string(), behavior.clone()),
                ("seed".to_string(), seed.to_string()),
            ]),
        };
        let mut bytes = Vec::new();
        let ext = match d.format {
            DatasetFormat::Jsonl => {
                write_jsonl(&mut bytes, &header, &records)?;
                "jsonl"
            }
            DatasetFormat::Binary => {
                write_binary(&mut bytes, &header, &records)?;
                "bin"
            }
        };
        let path = layout.dataset(seed, ext);
        write_atomic(&path, |w| w.write_all(&bytes).map_err(wio))?;
        let manifest = DatasetManifest {
            env: env_name(cfg.env),
            behavior,
            trajectories: d.trajectories,
            fraction: d.fraction,
            selected: kept.len(),
            seed,
            file: path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
            sha256: sha256_hex(&bytes),
            meta: serde_json::Map::from_iter([("created_unix".to_string(), unix_time().into())]),
        };
        manifest.save(&layout.manifest(seed))?;
        Ok(manifest)
    })?;
    for m in &manifests {
        println!(
            "generate: seed {} kept {}/{} trajectories -> {} (sha256 {})",
            m.seed, m.selected, m.trajectories, m.file, m.sha256
        );
    }
    Ok(manifests)
}

/// Loads a seed's dataset after checking it against its manifest.
pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<VecTransition>>> {
    let layout = Layout::new(&cfg.out_dir);
    let mpath = layout.manifest(seed);
    let manifest = DatasetManifest::load(&mpath)?;
    if manifest.env != env_name(cfg.env) {
        return Err(CliError::Config(format!(
            "env: dataset for seed {seed} was generated on {}, config says {}",
            manifest.env,
            env_name(cfg.env)
        )));
    }
    let bytes = manifest.read_verified(&mpath)?;
    let (_, records) = read_dataset::<_, Vec<f64>, Vec<f64>>(&bytes[..])?;
    Ok(trajectories(&records))
}

// ── train ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub delay: usize,
    pub epochs_done: usize,
}

pub fn run_spec(cfg: &ExperimentConfig, seed: u64, delay: usize) -> RunSpec {
    let l = &cfg.learner;
    RunSpec {
        env: cfg.env,
        algorithm: l.algorithm,
        belief: cfg.belief.clone(),
        train: TrainConfig {
            learner: l.hyper.clone(),
            delay,
            epochs: l.epochs,
            steps_per_epoch: l.steps_per_epoch,
            belief_pretrain_steps: l.belief_pretrain_steps,
            belief_batch: l.belief_batch,
            seed,
        },
        joint: l.joint,
    }
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(u64, usize)> {
    cfg.seeds
        .iter()
        .flat_map(|&s| cfg.delay.grid.iter().map(move |&d| (s, d)))
        .collect()
}

fn metrics_text(previous: &str, rows: &[EpochMetrics], delay: usize) -> String {
    let mut out = if previous.is_empty() {
        format!("{METRICS_HEADER},delay\n")
    } else {
        previous.to_string()
    };
    for r in rows {
        let _ = writeln!(out, "{},{delay}", r.csv_row());
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, |w| w.write_all(bytes).map_err(wio))
}

/// Trains every (seed, grid delay) pair. With `resume`, runs that have a
/// saved state continue from their last finished epoch up to
/// `learner.epochs`.
pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<Vec<TrainState>> {
    let layout = Layout::new(&cfg.out_dir);
    let states = parallel(&jobs(cfg), |&(seed, delay)| {
        let data = load_dataset(cfg, seed)?;
        let run = run_spec(cfg, seed, delay);
        let (policy_path, belief_path, metrics_path, state_path) = (
            layout.policy(seed, delay),
            layout.belief(seed, delay),
            layout.metrics(seed, delay),
            layout.train_state(seed, delay),
        );
        let eval = (cfg.learner.epoch_eval_episodes > 0).then(|| cfg.eval.spec(cfg.learner.epoch_eval_episodes));
        let previous = if resume && state_path.exists() {
            let st: TrainState = serde_json::from_slice(&read(&state_path)?).map_err(dtcorl_core::Error::from)?;
            let text = String::from_utf8(read(&metrics_path)?)
                .map_err(|e| CliError::Core(dtcorl_core::Error::Format(e.to_string())))?;
            Some((st, text))
        } else {
            None
        };

        match run.algorithm {
            Algorithm::AugmentedBc => {
                if previous.is_some() {
                    return Err(CliError::Config(
                        "learner.algorithm: resume is only supported for dtcorl".into(),
                    ));
                }
                let (policy, metrics) = run_training(&data, &run, eval.as_ref())?;
                let mut bytes = Vec::new();
                policy.save(&run, &mut bytes, None::<&mut Vec<u8>>)?;
                write_bytes(&policy_path, &bytes)?;
                write_bytes(&metrics_path, metrics_text("", &metrics, delay).as_bytes())?;
                let st = TrainState {
                    seed,
                    delay,
                    epochs_done: metrics.len(),
                };
                write_bytes(&state_path, &serde_json::to_vec_pretty(&st).map_err(dtcorl_core::Error::from)?)?;
                Ok(st)
            }
            Algorithm::Dtcorl => {
                let mut session = Session::new(&data, &run)?;
                let (mut done, mut text) = match previous {
                    Some((st, text)) => {
                        let belief = belief_path.exists().then(|| read(&belief_path)).transpose()?;
                        session.restore(&read(&policy_path)?[..], belief.as_deref(), st.epochs_done)?;
                        (st.epochs_done, text)
                    }
                    None => {
                        session.pretrain()?;
                        (0, String::new())
                    }
                };
                while done < cfg.learner.epochs {
                    let m = session.epoch(eval.as_ref())?;
                    done = m.epoch;
                    text = metrics_text(&text, &[m], delay);
                    let (mut p, mut b) = (Vec::new(), Vec::new());
                    session.save(&mut p, Some(&mut b))?;
                    write_bytes(&policy_path, &p)?;
                    if !b.is_empty() {
                        write_bytes(&belief_path, &b)?;
                    }
                    write_bytes(&metrics_path, text.as_bytes())?;
                    let st = TrainState {
                        seed,
                        delay,
                        epochs_done: done,
                    };
                    write_bytes(&state_path, &serde_json::to_vec_pretty(&st).map_err(dtcorl_core::Error::from)?)?;
                }
                Ok(TrainState {
                    seed,
                    delay,
                    epochs_done: done,
                })
            }
        }
    })?;
    for s in &states {
        println!("train: seed {} delay {} finished epoch {}", s.seed, s.delay, s.epochs_done);
    }
    Ok(states)
}

/// The policy trained for `(seed, delay)`.
pub fn load_policy(cfg: &ExperimentConfig, seed: u64, delay: usize) -> Result<TrainedPolicy> {
    let layout = Layout::new(&cfg.out_dir);
    let run = run_spec(cfg, seed, delay);
    let policy = read(&layout.policy(seed, delay))?;
    let belief_path = layout.belief(seed, delay);
    let belief = belief_path.exists().then(|| read(&belief_path)).transpose()?;
    Ok(TrainedPolicy::load(&run, &policy[..], belief.as_deref())?)
}

// ── eval ─────────────────────────────────────────────────────────────────

pub const EVAL_HEADER: &str =
    "seed,policy,delay_kind,max_delay,mean_delay,episodes,return_mean,return_std,normalized_mean,normalized_std";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub cell: DelaySpec,
    pub mean_delay: f64,
    pub summary: EvalSummary,
}

pub fn eval(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    let rows = parallel(&cfg.seeds, |&seed| {
        let env = cfg.env.build()?;
        let spec = cfg.eval.spec(cfg.eval.episodes);
        // Episode seeds differ across training seeds but not across cells,
        // so cells of one seed are paired.
        let offset = seed.wrapping_mul(100_003);
        let mut out = Vec::new();
        for &d in &cfg.delay.grid {
            let trained = match cfg.eval.policy {
                EvalPolicy::Trained => Some(load_policy(cfg, seed, d)?),
                EvalPolicy::Expert => None,
            };
            for cell in cfg.delay.cells(d) {
                let process = cell.process()?;
                let summary = match &trained {
                    Some(p) => p.evaluate(cfg.env, &cell, &spec, offset)?,
                    None => {
                        let refs = References::cached(env.as_ref(), spec.reference_seed)?;
                        let expert = |s: &[f64]| env.expert_action(s);
                        let agent = BeliefAgent {
                            belief: None,
                            policy: &expert,
                        };
                        evaluate(
                            env.as_ref(),
                            &agent,
                            &process,
                            spec.episodes,
                            spec.seed.wrapping_add(offset),
                            &refs,
                            spec.warm_up,
                        )?
                    }
                };
                out.push(EvalRow {
                    seed,
                    mean_delay: process.mean,
                    cell,
                    summary,
                });
            }
        }
        Ok(out)
    })?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();
    let policy = match cfg.eval.policy {
        EvalPolicy::Trained => match cfg.learner.algorithm {
            Algorithm::Dtcorl => "dtcorl",
            Algorithm::AugmentedBc => "augmented_bc",
        },
        EvalPolicy::Expert => "expert_no_belief",
    };
    let mut text = format!("{EVAL_HEADER}\n");
    for r in &rows {
        let s = &r.summary;
        let _ = writeln!(
            text,
            "{},{policy},{},{},{},{},{},{},{},{}",
            r.seed,
            r.cell.label(),
            r.cell.max_delay,
            r.mean_delay,
            s.episodes,
            s.return_mean,
            s.return_std,
            s.normalized_mean,
            s.normalized_std
        );
        println!(
            "eval: seed {} {} delay {} -> return {:.3} +- {:.3}, normalized {:.1}",
            r.seed,
            r.cell.label(),
            r.cell.max_delay,
            s.return_mean,
            s.return_std,
            s.normalized_mean
        );
    }
    write_bytes(&Layout::new(&cfg.out_dir).eval_results(), text.as_bytes())?;
    Ok(rows)
}

// ── verify ───────────────────────────────────────────────────────────────

pub fn verify(cfg: &ExperimentConfig) -> Result<Vec<SuiteSummary>> {
    let v = &cfg.verify;
    if v.suites.is_empty() {
        return Err(dtcorl_core::Error::NothingToVerify.into());
    }
    let verifier = Verifier {
        flip_w1_sign: v.fault_flip_w1,
    };
    let summaries: Vec<SuiteSummary> = parallel(&v.suites, |kind| {
        Ok(match kind {
            SuiteKind::Lemma => {
                let (a, b) = run_lemma_suite(&v.family, &verifier)?;
                vec![a, b]
            }
            SuiteKind::Identity => vec![run_identity_suite(&v.family, &verifier)?],
            SuiteKind::Derivation => vec![run_derivation_suite(&v.family, &verifier)?],
            SuiteKind::Proposition => vec![run_proposition_suite(&v.family, &cfg.learner.hyper)?],
        })
    })?
    .into_iter()
    .flatten()
    .collect();
    let reports: Vec<_> = summaries.iter().flat_map(|s| s.reports.iter().cloned()).collect();
    let mut bytes = Vec::new();
    write_reports_csv(&mut bytes, &reports)?;
    write_bytes(&Layout::new(&cfg.out_dir).verify_reports(), &bytes)?;
    for s in &summaries {
        println!("verify: {}", s.summary_line());
    }
    if let Some(bad) = summaries.iter().find(|s| !s.passed()) {
        let first = bad.first_violation().map_or(String::new(), |r| {
            format!(" (first: mdp {} delay {} slack {})", r.instance.mdp_hash, r.instance.delay, r.slack)
        });
        return Err(CliError::Verification(format!("{}{first}", bad.summary_line())));
    }
    Ok(summaries)
}

// ── belief-bench ─────────────────────────────────────────────────────────

pub fn bench(cfg: &ExperimentConfig) -> Result<Vec<(u64, dtcorl_core::pipeline::BenchResult)>> {
    let results = parallel(&cfg.seeds, |&seed| Ok((seed, belief_bench(&cfg.bench, &cfg.belief, seed)?)))?;
    let (mut mse, mut lat) = (Vec::new(), Vec::new());
    dtcorl_core::pipeline::write_bench_csv(&mut mse, &mut lat, &results)?;
    let layout = Layout::new(&cfg.out_dir);
    write_bytes(&layout.bench_mse(), &mse)?;
    write_bytes(&layout.bench_latency(), &lat)?;
    for (seed, r) in &results {
        for l in &r.latency {
            println!(
                "belief-bench: seed {seed} {} final-step mse {:.5}, {} params, {:.1} us/call",
                l.model,
                r.final_mse(&l.model).unwrap_or(f64::NAN),
                l.params,
                l.mean_latency_us
            );
        }
    }
    Ok(results)
}
