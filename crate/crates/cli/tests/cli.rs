use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
seed = 3
workers = 2
samples = 20
top_k = 3

[task]
kind = "logistic_regression"
n_train = 200
n_val = 100
batch_size = 50

[protocol]
lr_grid = [0.001, 0.1, 1.0]
full_epochs = 2

[policy]
hidden = 16
embed = 8

[ppo]
lr = 0.002
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optsearch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config(dir: &Path) -> String {
    let path = dir.join("smoke.toml");
    fs::write(&path, SMOKE).unwrap();
    path.display().to_string()
}

#[test]
fn fmt_power_sign() {
    let o = run(&["fmt", "sign_g  sign_m id id mul;out1 g exp id mul"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sign_g sign_m id id mul ; out1 g exp id mul"));
    assert_eq!(lines.next(), Some("state: m, step"));
    assert_eq!(lines.next(), Some("valid"));
}

#[test]
fn fmt_is_idempotent() {
    let first = stdout(&run(&["fmt", "m   v id sqrt div ;out1 out1 id id left"]));
    let canonical = first.lines().next().unwrap().to_string();
    let second = stdout(&run(&["fmt", &canonical]));
    assert_eq!(first, second);
}

#[test]
fn fmt_reports_offending_token() {
    let o = run(&["fmt", "g g id bogus left"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("position 4"), "{err}");
}

#[test]
fn fmt_moment_exp_rule() {
    let o = run(&["fmt", "m v id exp mul"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("state: m, v, step"));
}

#[test]
fn fmt_constraint_violation_exits_one() {
    let o = run(&["fmt", "--distinct-operands", "g g id id mul"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(run(&["fmt", "--frobnicate", "g g id id left"]).status.code(), Some(2));
    assert_eq!(run(&["launch"]).status.code(), Some(2));
}

#[test]
fn bench_single_row_golden_header() {
    let o = run(&["bench", "--lrs", "0.001", "--iters", "200", "sgd"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "optimizer,lr,final,best");
    assert!(lines[1].starts_with("sgd,1e-3,"));
}

#[test]
fn bench_unknown_optimizer() {
    let o = run(&["bench", "adamax"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("adamax"));
}

#[test]
fn bench_zero_internal_decay_matches_sgd() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = run(&[
        "bench",
        "--task",
        "mlp",
        "--epochs",
        "1",
        "--lrs",
        "0.1",
        "--internal-decay",
        "zero",
        "--out",
        out.to_str().unwrap(),
        "sgd",
        "powersign",
        "addsign",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let traj = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some("optimizer,step,value"));
    let series = |name: &str| -> Vec<String> {
        traj.lines()
            .filter(|l| l.starts_with(&format!("{name},")))
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    let sgd = series("sgd");
    assert_eq!(sgd.len(), 10);
    assert_eq!(sgd, series("powersign-const0"));
    assert_eq!(sgd, series("addsign-const0"));
    assert!(fs::read_to_string(out.join("bench.csv"))
        .unwrap()
        .starts_with("optimizer,lr,final,best\n"));
}

#[test]
fn search_missing_config() {
    let o = run(&["search", "--config", "/nonexistent/smoke.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/smoke.toml"));
}

#[test]
fn search_bad_config_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "workers = 0\n").unwrap();
    let o = run(&["search", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn search_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "search",
            "--config",
            &cfg,
            "--samples",
            "50",
            "--workers",
            "4",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let log = fs::read_to_string(a.join("search.jsonl")).unwrap();
    let samples: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v.get("sample_id").is_some())
        .collect();
    assert_eq!(samples.len(), 50);
    let mut keys: Vec<&str> = samples[0].as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        [
            "chosen_lr",
            "epoch_metrics",
            "program",
            "reward",
            "sample_id",
            "seed",
            "status",
            "sweep",
            "wall_ms"
        ]
    );
    let stats: Vec<serde_json::Value> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v.get("batch").is_some())
        .collect();
    assert_eq!(stats.len(), 10);
    let mut skeys: Vec<&str> = stats[0].as_object().unwrap().keys().map(String::as_str).collect();
    skeys.sort_unstable();
    assert_eq!(skeys, ["baseline", "batch", "entropy", "mean_reward"]);

    assert_eq!(
        fs::read(a.join("topk.json")).unwrap(),
        fs::read(b.join("topk.json")).unwrap()
    );
    assert!(fs::read_to_string(a.join("checkpoint.json"))
        .unwrap()
        .contains("\"format_version\":1"));
}

#[test]
fn search_resume_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config(dir.path());
    let out = dir.path().join("s");
    let o = run(&["search", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resumed = dir.path().join("r");
    let o = run(&[
        "search",
        "--config",
        &cfg,
        "--resume",
        out.join("checkpoint.json").to_str().unwrap(),
        "--samples",
        "10",
        "--out",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = run(&[
        "rerun",
        "--log",
        out.join("search.jsonl").to_str().unwrap(),
        "--k",
        "2",
        "--factor",
        "2",
        "--config",
        &cfg,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "program,chosen_lr,best,final,reward,status");
    assert_eq!(lines.len(), 3);
}

#[test]
fn eval_prints_one_record() {
    let o = run(&["eval", "sgd", "--task", "logistic", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["program"], "sgd");
    assert_eq!(v["status"], "ok");
    assert!(v["reward"].as_f64().unwrap() > 0.9);
    assert_eq!(run(&["eval", "nonsense"]).status.code(), Some(2));
}
