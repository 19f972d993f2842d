use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use dtcorl_cli::commands::{self, select_fraction};
use dtcorl_cli::config::{apply_overrides, load, DatasetFormat, EvalPolicy, ExperimentConfig, Profile};
use dtcorl_cli::CliError;
use dtcorl_core::pipeline::Algorithm;
use dtcorl_core::rollout::{DelayKind, EnvId};
use proptest::prelude::*;

fn smoke(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(Profile::Smoke);
    c.out_dir = dir.to_path_buf();
    c
}

fn bin(args: &[&str], dir: &Path, envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dtcorl"));
    cmd.args(args).arg("--out").arg(dir);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn presets_round_trip_through_toml() {
    for profile in [Profile::Full, Profile::Smoke] {
        let c = ExperimentConfig::preset(profile);
        let text = c.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml().unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn edited_configs_round_trip(
        seeds in prop::collection::vec(0u64..1_000_000, 1..5),
        fraction in 0.01f64..=1.0,
        k in 1usize..500,
        alpha in 0.0f64..10.0,
        joint in any::<bool>(),
        grid in prop::collection::vec(1usize..=16, 1..4),
        mean in prop::option::of(2.0f64..15.0),
    ) {
        let mut c = ExperimentConfig::preset(Profile::Full);
        c.seeds = seeds;
        c.dataset.fraction = fraction;
        c.dataset.trajectories = k;
        c.learner.hyper.alpha = alpha;
        c.learner.joint = joint;
        c.delay.grid = grid;
        c.delay.mean = mean;
        c.delay.kind = if mean.is_some() { DelayKind::Gaussian } else { DelayKind::Uniform };
        // Only valid configs serialize; gaussian cells need a mean above 1.
        prop_assume!(c.validate().is_ok());
        let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, c);
    }
}

#[test]
fn overrides_reach_nested_keys() {
    let vars = vec![
        ("DTCORL_ENV".to_string(), "chain".to_string()),
        ("DTCORL_SEEDS".to_string(), "[3, 4]".to_string()),
        ("DTCORL_LEARNER__HYPER__ALPHA".to_string(), "1.5".to_string()),
        ("DTCORL_LEARNER__JOINT".to_string(), "false".to_string()),
        ("DTCORL_DATASET__FORMAT".to_string(), "binary".to_string()),
        ("HOME".to_string(), "/nowhere".to_string()),
    ];
    let c = load(None, Profile::Smoke, vars).unwrap();
    assert_eq!(c.env, EnvId::Chain);
    assert_eq!(c.seeds, vec![3, 4]);
    assert_eq!(c.learner.hyper.alpha, 1.5);
    assert!(!c.learner.joint);
    assert_eq!(c.dataset.format, DatasetFormat::Binary);
    // Untouched keys keep the profile defaults.
    assert_eq!(c.learner.steps_per_epoch, 50);
}

#[test]
fn file_values_sit_between_profile_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), "seeds = [7]\n[learner]\nepochs = 3\n[learner.hyper]\nalpha = 4.0\n");
    let c = load(Some(&p), Profile::Smoke, vec![("DTCORL_LEARNER__EPOCHS".into(), "5".into())]).unwrap();
    assert_eq!(c.seeds, vec![7]);
    assert_eq!(c.learner.epochs, 5);
    assert_eq!(c.learner.hyper.alpha, 4.0);
    assert_eq!(c.learner.steps_per_epoch, 50);
}

#[test]
fn invalid_configs_name_the_field() {
    let cases: Vec<(Vec<(String, String)>, &str)> = vec![
        (vec![("DTCORL_DATASET__FRACTION".into(), "0".into())], "dataset.fraction"),
        (vec![("DTCORL_DATASET__FRACTION".into(), "1.5".into())], "dataset.fraction"),
        (vec![("DTCORL_SEEDS".into(), "[]".into())], "seeds"),
        (
            vec![
                ("DTCORL_DELAY__KIND".into(), "gaussian".into()),
                ("DTCORL_DELAY__MEAN".into(), "9.0".into()),
            ],
            "delay.mean",
        ),
        (vec![("DTCORL_DELAY__GRID".into(), "[8]".into())], "delay.grid"),
        (vec![("DTCORL_LEARNER__WIDTH".into(), "3".into())], "width"),
        (vec![("DTCORL_BELIEF__D_MODEL".into(), "15".into())], "belief.d_model"),
    ];
    for (vars, field) in cases {
        let err = load(None, Profile::Smoke, vars.clone()).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{vars:?}: {err}");
        assert!(err.to_string().contains(field), "{vars:?}: {err}");
        assert_eq!(err.exit_code(), 1);
    }
}

#[test]
fn malformed_override_names_are_rejected() {
    let mut t = toml::Table::new();
    let err = apply_overrides(&mut t, vec![("DTCORL_LEARNER____X".to_string(), "1".to_string())]).unwrap_err();
    assert!(err.to_string().contains("malformed"));
}

#[test]
fn fraction_keeps_ceil_of_share() {
    assert_eq!(select_fraction(10, 0.25, 0).len(), 3);
    assert_eq!(select_fraction(100, 0.25, 0).len(), 25);
    assert_eq!(select_fraction(7, 1.0, 3), (0..7).collect::<Vec<_>>());
    assert_eq!(select_fraction(7, 0.01, 3).len(), 1);
    let a = select_fraction(50, 0.3, 9);
    assert_eq!(a, select_fraction(50, 0.3, 9));
    assert_ne!(a, select_fraction(50, 0.3, 10));
    assert!(a.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn generate_is_reproducible_and_manifest_guards_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke(dir.path());
    c.seeds = vec![0, 1];
    c.dataset.fraction = 0.25;
    let first = commands::generate(&c).unwrap();
    assert!(first.iter().all(|m| m.selected == 3 && m.trajectories == 10));
    assert_ne!(first[0].sha256, first[1].sha256);
    let data0 = fs::read(dir.path().join("data/seed_0.jsonl")).unwrap();
    let second = commands::generate(&c).unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.sha256, b.sha256);
    }
    assert_eq!(fs::read(dir.path().join("data/seed_0.jsonl")).unwrap(), data0);
    assert_eq!(commands::load_dataset(&c, 0).unwrap().len(), 3);

    // Tamper with the dataset: loading must refuse it.
    let mut bytes = data0.clone();
    let last = bytes.len() - 2;
    bytes[last] = if bytes[last] == b'0' { b'1' } else { b'0' };
    fs::write(dir.path().join("data/seed_0.jsonl"), bytes).unwrap();
    let err = commands::load_dataset(&c, 0).unwrap_err();
    assert!(err.to_string().contains("checksum mismatch"), "{err}");
    assert!(commands::train(&c, false).is_err());
}

#[test]
fn binary_datasets_load_like_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke(dir.path());
    commands::generate(&c).unwrap();
    let a = commands::load_dataset(&c, 0).unwrap();
    c.dataset.format = DatasetFormat::Binary;
    commands::generate(&c).unwrap();
    let b = commands::load_dataset(&c, 0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn train_without_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = commands::train(&smoke(dir.path()), false).unwrap_err();
    assert!(matches!(err, CliError::Missing(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn two_seeds_write_two_metric_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke(dir.path());
    c.seeds = vec![5, 6];
    commands::generate(&c).unwrap();
    commands::train(&c, false).unwrap();
    for seed in [5u64, 6] {
        let text = fs::read_to_string(dir.path().join(format!("train/metrics_seed_{seed}_delay_4.csv"))).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "seed").unwrap();
        for line in lines {
            assert_eq!(line.split(',').nth(col).unwrap(), seed.to_string());
        }
    }
}

#[test]
fn resume_continues_epoch_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke(dir.path());
    c.learner.epochs = 2;
    commands::generate(&c).unwrap();
    commands::train(&c, false).unwrap();
    c.learner.epochs = 4;
    let st = commands::train(&c, true).unwrap();
    assert_eq!(st[0].epochs_done, 4);
    let text = fs::read_to_string(dir.path().join("train/metrics_seed_0_delay_4.csv")).unwrap();
    let epochs: Vec<usize> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(epochs, vec![1, 2, 3, 4]);

    // A resume under a different architecture is refused.
    c.learner.epochs = 5;
    c.learner.hyper.hidden = 48;
    let err = commands::train(&c, true).unwrap_err();
    assert!(err.to_string().to_lowercase().contains("config"), "{err}");
}

#[test]
fn augmented_bc_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke(dir.path());
    c.learner.algorithm = Algorithm::AugmentedBc;
    commands::generate(&c).unwrap();
    commands::train(&c, false).unwrap();
    let rows = commands::eval(&c).unwrap();
    assert_eq!(rows.len(), 2);
    let text = fs::read_to_string(dir.path().join("eval/results.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().contains(",augmented_bc,"));
}

#[test]
fn delay_grid_gives_six_rows_per_seed_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke(dir.path());
    c.seeds = vec![0, 1];
    c.delay.max_delay = 16;
    c.delay.grid = vec![4, 8, 16];
    c.eval.policy = EvalPolicy::Expert;
    let rows = commands::eval(&c).unwrap();
    assert_eq!(rows.len(), 12);
    for seed in [0u64, 1] {
        assert_eq!(rows.iter().filter(|r| r.seed == seed).count(), 6);
    }
    let first = fs::read(dir.path().join("eval/results.csv")).unwrap();
    commands::eval(&c).unwrap();
    assert_eq!(fs::read(dir.path().join("eval/results.csv")).unwrap(), first);
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 13);
}

#[test]
fn no_belief_expert_on_stochastic_chain_degrades_with_delay() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = smoke(dir.path());
    c.env = EnvId::Chain;
    c.seeds = vec![0, 1, 2];
    c.delay.kind = DelayKind::Deterministic;
    c.delay.max_delay = 8;
    c.delay.grid = vec![0, 8];
    c.eval.policy = EvalPolicy::Expert;
    c.eval.episodes = 50;
    c.validate().unwrap();
    let rows = commands::eval(&c).unwrap();
    for seed in [0u64, 1, 2] {
        let at = |d: usize| {
            rows.iter()
                .find(|r| r.seed == seed && r.cell.max_delay == d)
                .unwrap()
                .summary
                .return_mean
        };
        assert!(at(0) >= at(8), "seed {seed}: {} < {}", at(0), at(8));
    }
}

#[test]
fn trained_eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let c = smoke(dir.path());
    commands::generate(&c).unwrap();
    commands::train(&c, false).unwrap();
    commands::eval(&c).unwrap();
    let a = fs::read(dir.path().join("eval/results.csv")).unwrap();
    let ck = fs::read(dir.path().join("train/policy_seed_0_delay_4.ckpt")).unwrap();
    commands::train(&c, false).unwrap();
    assert_eq!(fs::read(dir.path().join("train/policy_seed_0_delay_4.ckpt")).unwrap(), ck);
    commands::eval(&c).unwrap();
    assert_eq!(fs::read(dir.path().join("eval/results.csv")).unwrap(), a);
}

#[test]
fn smoke_profile_runs_end_to_end_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    for cmd in ["generate", "train", "eval", "verify", "belief-bench"] {
        let out = bin(&[cmd, "--profile", "smoke"], dir.path(), &[]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(start.elapsed().as_secs() < 60, "smoke took {:?}", start.elapsed());
    for f in ["eval/results.csv", "verify/reports.csv", "bench/stepwise_mse.csv", "bench/latency.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let mse = fs::read_to_string(dir.path().join("bench/stepwise_mse.csv")).unwrap();
    assert_eq!(mse.lines().next().unwrap(), "seed,model,step,mse");
    assert_eq!(mse.lines().count(), 1 + 2 * 16);
}

#[test]
fn default_verify_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["verify"], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("performance_difference: 1200 checks, 0 violations"), "{stdout}");
}

#[test]
fn w1_sign_fault_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        &["verify", "--profile", "smoke"],
        dir.path(),
        &[("DTCORL_VERIFY__FAULT_FLIP_W1", "true")],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("verification failed"));
}

#[test]
fn empty_family_has_nothing_to_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(
        &["verify", "--profile", "smoke"],
        dir.path(),
        &[("DTCORL_VERIFY__FAMILY__N_MDPS", "0")],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to verify"));
    let out = bin(&["verify", "--profile", "smoke"], dir.path(), &[("DTCORL_VERIFY__SUITES", "[]")]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes_for_usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(&["frobnicate"], dir.path(), &[]).status.code(), Some(1));
    assert_eq!(bin(&["--help"], dir.path(), &[]).status.code(), Some(0));
    let out = bin(&["generate", "--profile", "smoke"], dir.path(), &[("DTCORL_DATASET__FRACTION", "0")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.fraction"));
    let missing = dir.path().join("absent.toml");
    let out = bin(&["generate", "--config", missing.to_str().unwrap()], dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_training_aborts_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let envs = [
        ("DTCORL_LEARNER__HYPER__CRITIC_LR", "1e200"),
        ("DTCORL_LEARNER__HYPER__ACTOR_LR", "1e200"),
        ("DTCORL_BELIEF__LR", "1e200"),
    ];
    assert!(bin(&["generate", "--profile", "smoke"], dir.path(), &envs).status.success());
    let out = bin(&["train", "--profile", "smoke"], dir.path(), &envs);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn seed_flags_replace_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["generate", "--profile", "smoke", "--seed", "11", "--seed", "12"], dir.path(), &[]);
    assert!(out.status.success());
    assert!(dir.path().join("data/seed_11.manifest.json").exists());
    assert!(dir.path().join("data/seed_12.manifest.json").exists());
    assert!(!dir.path().join("data/seed_0.manifest.json").exists());
}
