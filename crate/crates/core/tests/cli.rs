use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn vmbpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmbpo")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path, seeds: &str) -> Output {
    vmbpo(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", seeds])
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const CHAIN_TRAIN: &str = r#"
[mdp]
kind = "chain"

[train]
total_steps = 400
steps_per_iteration = 20
inner_iterations = 5
eval_interval = 100
discount = 1.0
batch_size = 16
model_batch_size = 32
synthetic_per_step = 128
lr_model = 0.05
lr_critic = 0.05
lr_actor = 0.05
tau = 0.1
"#;

#[test]
fn solve_chain2_single_em_iteration() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[mdp]\nkind = \"chain\"\n[solver]\nem_iterations = 1\n");
    let out = dir.path().join("out");
    let o = run("solve", &cfg, &out, "0");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let value = fs::read_to_string(out.join("value.csv")).unwrap();
    let s0: f64 = value.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((s0 - 0.620115).abs() < 1e-6, "{s0}");
    // Uniform baseline: V(s0) = log(e/2 + 1/2).
    assert!((s0 - (0.5 * 1f64.exp() + 0.5).ln()).abs() < 1e-12);
    for f in ["iterations.csv", "policy.csv", "baseline.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let iters = fs::read_to_string(out.join("iterations.csv")).unwrap();
    assert_eq!(iters.lines().next().unwrap(), "iteration,residual,elbo,log_likelihood");
    assert_eq!(iters.lines().count(), 2);
}

#[test]
fn train_writes_one_metrics_file_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CHAIN_TRAIN);
    let out = dir.path().join("out");
    let o = run("train", &cfg, &out, "1,2,3");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for seed in 1..=3 {
        let m = fs::read_to_string(out.join(format!("metrics_seed{seed}.csv"))).unwrap();
        assert!(m.starts_with("wall_step,env_steps,mean_return"));
        assert_eq!(m.lines().count(), 5);
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("algorithm,seed,final_return"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", CHAIN_TRAIN);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("train", &cfg, &a, "7").status.code(), Some(0));
    assert_eq!(run("train", &cfg, &b, "7").status.code(), Some(0));
    for f in ["metrics_seed7.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn check_passes_on_shipped_fixture() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "[mdp]\nkind = \"chain\"\n[check]\nnames = [\"lemma6_policy\", \"fixed_point\"]\ninstances = 3\n",
    );
    let out = dir.path().join("out");
    let o = run("check", &cfg, &out, "1,2");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let report = fs::read_to_string(out.join("checks.txt")).unwrap();
    assert_eq!(report.lines().filter(|l| l.starts_with("PASS")).count(), 4);
}

#[test]
fn injected_fault_is_reported_by_name() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "[mdp]\nkind = \"chain\"\n[check]\nnames = [\"lemma6_policy\"]\ninject_fault = \"twist_policy\"\ninstances = 3\n",
    );
    let out = dir.path().join("out");
    let o = run("check", &cfg, &out, "1");
    assert_eq!(o.status.code(), Some(4));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("FAIL lemma6_policy"), "{stdout}");
}

#[test]
fn config_errors_exit_with_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let unknown = write_config(dir.path(), "a.toml", "[mdp]\nkind = \"chain\"\nbogus = 1\n");
    let o = run("solve", &unknown, &out, "0");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));

    let negative = write_config(dir.path(), "b.toml", "[mdp]\nkind = \"chain\"\n[solver]\ntolerance = -1.0\n");
    let o = run("solve", &negative, &out, "0");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerance"));

    let o = run("solve", &dir.path().join("missing.toml"), &out, "0");
    assert_eq!(o.status.code(), Some(2));

    let o = vmbpo(&["solve", "--config", unknown.to_str().unwrap(), "--out", "x", "--seed", "abc"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        "[mdp]\nkind = \"chain\"\n[train]\ntotal_steps = 200\nsteps_per_iteration = 20\ninner_iterations = 5\n\
         eval_interval = 100\nlr_critic = 1e200\nlr_actor = 1e200\nlr_model = 1e200\nvalue_scale = 1e200\n",
    );
    let o = run("train", &cfg, &dir.path().join("out"), "0");
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn shipped_configs_parse() {
    let dir = TempDir::new().unwrap();
    let solve = run("solve", &repo_config("chain_solve.toml"), &dir.path().join("s"), "0");
    assert_eq!(solve.status.code(), Some(0), "{}", String::from_utf8_lossy(&solve.stderr));
    for name in ["chain_train.toml", "chain_mfe.toml", "grid_train.toml", "pendulum.toml"] {
        let text = fs::read_to_string(repo_config(name)).unwrap();
        vmbpo::harness::RunConfig::from_toml_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
