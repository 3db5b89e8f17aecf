use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use optsearch::bench::{log_grid, run_bench, write_table, write_trajectories, BenchConfig, BenchError};
use optsearch::dsl::{parse_program, ConstraintSet};
use optsearch::engine::{parse_decay, NamedOptimizerSpec, UpdateRule};
use optsearch::harness::{
    evaluate_candidate, replay_topk, run_search, topk_rerun, EvalJob, EvalProtocol, HarnessError, SearchConfig,
};
use optsearch::schedule::ScheduleKind;
use optsearch::tasks::{TaskKind, TaskSpec};

#[derive(Parser)]
#[command(
    name = "optsearch",
    version,
    about = "Search, evaluate and benchmark optimizer update rules"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a controller search.
    Search(SearchArgs),
    /// Evaluate one rule with the learning-rate sweep protocol.
    Eval(EvalArgs),
    /// Compare optimizers on one task.
    Bench(BenchArgs),
    /// Canonicalize and check a rule.
    Fmt(FmtArgs),
    /// Re-evaluate the top programs of a search log with a longer budget.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Output directory for search.jsonl, topk.json and checkpoint.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Log path; overrides the config file and the default under --out.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Controller checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Size of topk.json; overrides `top_k`.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Optimizer id or program.
    rule: String,
    /// Search config supplying the task and protocol.
    #[arg(long)]
    config: Option<PathBuf>,
    /// rosenbrock, quadratic, logistic or mlp.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    schedule: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Optimizer ids or programs.
    #[arg(required = true)]
    optimizers: Vec<String>,
    #[arg(long, default_value = "rosenbrock")]
    task: String,
    /// Iterations for analytic tasks.
    #[arg(long, default_value_t = 4000)]
    iters: u64,
    /// Epochs for learning tasks.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Either a count of log-spaced rates or a comma-separated list.
    #[arg(long, default_value = "4")]
    lrs: String,
    #[arg(long, default_value = "constant")]
    schedule: String,
    /// Replaces the internal decay of PowerSign/AddSign ids, e.g. `zero`, `ld`.
    #[arg(long)]
    internal_decay: Option<String>,
    /// Also pick Adam's epsilon from 1e-3..1e-8.
    #[arg(long)]
    tune_adam_eps: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for bench.csv and trajectories.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FmtArgs {
    program: String,
    #[arg(long)]
    distinct_operands: bool,
    #[arg(long)]
    no_final_add: bool,
    #[arg(long)]
    must_reuse_output: bool,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value = "mlp")]
    task: String,
    /// Multiplier on the full-run epoch budget.
    #[arg(long, default_value_t = 10)]
    factor: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit 2 for usage and config problems, 1 for runtime failures.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_task(name: &str) -> Result<TaskSpec, Failure> {
    let kind: TaskKind = name
        .parse()
        .map_err(|_| Failure::Usage(format!("unknown task `{name}`")))?;
    Ok(TaskSpec::of(kind))
}

fn parse_schedule(name: &str) -> Result<ScheduleKind, Failure> {
    name.parse()
        .map_err(|e: optsearch::schedule::UnknownSchedule| Failure::Usage(e.to_string()))
}

fn parse_lrs(spec: &str, task: TaskKind) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::Usage(format!("bad --lrs `{spec}`"));
    if let Ok(n) = spec.parse::<usize>() {
        if n == 0 {
            return Err(bad());
        }
        return Ok(match task {
            TaskKind::Rosenbrock | TaskKind::Quadratic => log_grid(1e-5, 1e-2, n),
            TaskKind::LogisticRegression | TaskKind::Mlp => log_grid(1e-3, 1.0, n),
        });
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| *x >= 0.0 && x.is_finite())
                .ok_or_else(bad)
        })
        .collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<SearchConfig, Failure> {
    if !path.exists() {
        return Err(Failure::Usage(format!("config file not found: {}", path.display())));
    }
    Ok(SearchConfig::load(path)?)
}

fn cmd_search(a: SearchArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    if let Some(k) = a.k {
        cfg.top_k = k;
    }
    if let Some(r) = &a.resume {
        cfg.resume = Some(r.display().to_string());
    }
    cfg.validate()?;
    let log_path = a
        .log
        .or_else(|| cfg.log.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| a.out.join("search.jsonl"));
    fs::create_dir_all(&a.out)?;
    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file = fs::File::create(&log_path).map_err(|e| Failure::Runtime(format!("{}: {e}", log_path.display())))?;
    let mut sink = BufWriter::new(file);
    let outcome = run_search(&cfg, &mut sink)?;
    sink.flush()?;
    let top = serde_json::to_string_pretty(&outcome.top_k).expect("top-k serializes");
    write_file(&a.out.join("topk.json"), format!("{top}\n").as_bytes())?;
    write_file(
        &a.out.join("checkpoint.json"),
        outcome.checkpoint().to_json().as_bytes(),
    )?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "{} samples, log {}", outcome.records.len(), log_path.display())?;
    for t in &outcome.top_k {
        writeln!(out, "{:.4}\t{}\t{}", t.reward, t.sample_id, t.program)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let base = match &a.config {
        Some(p) => load_config(p)?,
        None => SearchConfig::default(),
    };
    let rule = UpdateRule::parse(&a.rule).map_err(|e| Failure::Usage(e.to_string()))?;
    let task = match &a.task {
        Some(t) => TaskSpec {
            kind: parse_task(t)?.kind,
            ..base.task.clone()
        },
        None => base.task.clone(),
    };
    let mut protocol: EvalProtocol = base.protocol.clone();
    if let Some(s) = &a.schedule {
        protocol.schedule = parse_schedule(s)?;
    }
    let job = EvalJob {
        sample_id: 0,
        rule,
        task,
        protocol,
        seed: a.seed.unwrap_or(base.seed),
        checkpoint_bests: vec![],
    };
    let result = evaluate_candidate(&job);
    println!(
        "{}",
        serde_json::to_string(&result.record()).expect("record serializes")
    );
    Ok(())
}

fn override_decay(id: &str, decay: &str) -> Result<String, Failure> {
    let spec: NamedOptimizerSpec = match id.parse() {
        Ok(s) => s,
        Err(_) => return Ok(id.to_string()),
    };
    if !spec.is_sign_family() {
        return Ok(id.to_string());
    }
    let d = parse_decay(decay).ok_or_else(|| Failure::Usage(format!("unknown decay `{decay}`")))?;
    Ok(spec.with_decay(d).to_string())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let task = parse_task(&a.task)?;
    let ids = match &a.internal_decay {
        Some(d) => a
            .optimizers
            .iter()
            .map(|id| override_decay(id, d))
            .collect::<Result<Vec<_>, _>>()?,
        None => a.optimizers.clone(),
    };
    let cfg = BenchConfig {
        lrs: parse_lrs(&a.lrs, task.kind)?,
        task,
        iters: a.iters,
        epochs: a.epochs,
        schedule: parse_schedule(&a.schedule)?,
        tune_adam_eps: a.tune_adam_eps,
        seed: a.seed,
        ..BenchConfig::default()
    };
    let rows = run_bench(&ids, &cfg).map_err(|e| match e {
        BenchError::UnknownOptimizer(_) | BenchError::Config(_) => Failure::Usage(e.to_string()),
        BenchError::Io(e) => Failure::Runtime(e.to_string()),
    })?;
    let mut table = Vec::new();
    write_table(&rows, &mut table)?;
    io::stdout().write_all(&table)?;
    if let Some(dir) = &a.out {
        let mut traj = Vec::new();
        write_trajectories(&rows, &mut traj)?;
        write_file(&dir.join("bench.csv"), &table)?;
        write_file(&dir.join("trajectories.csv"), &traj)?;
    }
    Ok(())
}

fn cmd_fmt(a: FmtArgs) -> Result<(), Failure> {
    let program = parse_program(&a.program).map_err(|e| Failure::Runtime(e.to_string()))?;
    let constraints = ConstraintSet::search_space()
        .with_sigmoid()
        .with_distinct_operands(a.distinct_operands)
        .with_no_final_add(a.no_final_add)
        .with_must_reuse_output(a.must_reuse_output);
    let report = program.validate(&constraints);
    println!("{program}");
    println!("state: {}", program.required_state());
    if report.is_valid() {
        println!("valid");
        Ok(())
    } else {
        println!("{report}");
        Err(Failure::Runtime("program violates constraints".into()))
    }
}

fn cmd_rerun(a: RerunArgs) -> Result<(), Failure> {
    let text =
        fs::read_to_string(&a.log).map_err(|e| Failure::Usage(format!("cannot read log {}: {e}", a.log.display())))?;
    let top = replay_topk(&text, a.k)?;
    let base = match &a.config {
        Some(p) => load_config(p)?,
        None => SearchConfig::default(),
    };
    let task = TaskSpec {
        kind: parse_task(&a.task)?.kind,
        ..base.task.clone()
    };
    let rules = top
        .iter()
        .map(|t| UpdateRule::parse(&t.program).map_err(|e| Failure::Runtime(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = topk_rerun(&rules, &task, &base.protocol.extended(a.factor), a.seed, a.workers, 5)?;
    let mut csv = String::from("program,chosen_lr,best,final,reward,status\n");
    for r in &rows {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
        csv.push_str(&format!(
            "\"{}\",{:e},{},{},{:e},{}\n",
            r.program,
            r.chosen_lr,
            opt(r.best),
            opt(r.final_metric),
            r.reward,
            r.status
        ));
    }
    print!("{csv}");
    if let Some(dir) = &a.out {
        write_file(&dir.join("rerun.csv"), csv.as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Fmt(a) => cmd_fmt(a),
        Command::Rerun(a) => cmd_rerun(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
