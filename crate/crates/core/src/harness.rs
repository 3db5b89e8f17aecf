//! Search orchestration: the learning-rate sweep protocol, early stopping,
//! a worker pool, the controller loop and its JSONL log.

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use crossbeam_channel::{bounded, unbounded};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    ppo_update, Checkpoint, ControllerError, ControllerPolicy, PolicyConfig, PpoConfig, PpoState, SearchSpace,
};
use crate::dsl::{AllowList, Binary, ConstraintSet, Operand, Token, Unary};
use crate::engine::UpdateRule;
use crate::rng::{mix, RngStream};
use crate::runtime::RuntimeConfig;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::tasks::{make_task, Metric, TaskError, TaskKind, TaskSpec, Trainer};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("worker pool failure: job {sample_id} failed {attempts} times: {message}")]
    WorkerPoolFailure {
        sample_id: u64,
        attempts: usize,
        message: String,
    },
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("log: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed log line {line}: {message}")]
    Log { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStatus {
    Ok,
    Diverged,
    EarlyStopped,
    Overflow,
}

impl std::fmt::Display for EvalStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalStatus::Ok => "ok",
            EvalStatus::Diverged => "diverged",
            EvalStatus::EarlyStopped => "early_stopped",
            EvalStatus::Overflow => "overflow",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    /// Fractions of the full-run epoch budget.
    pub checkpoints: Vec<f64>,
    pub factor: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            checkpoints: vec![0.2, 0.5],
            factor: 0.8,
        }
    }
}

impl EarlyStopConfig {
    /// Epoch (1-based) at which each checkpoint is evaluated.
    pub fn checkpoint_epochs(&self, full_epochs: usize) -> Vec<usize> {
        self.checkpoints
            .iter()
            .map(|f| ((f * full_epochs as f64).ceil() as usize).clamp(1, full_epochs.max(1)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Abort,
}

/// Abort iff `current < factor * best_so_far`. Both values are rewards
/// (higher is better). No best-so-far means continue.
pub fn early_stop_check(current: f64, best_so_far: Option<f64>, factor: f64) -> StopDecision {
    match best_so_far {
        Some(best) if current < factor * best => StopDecision::Abort,
        _ => StopDecision::Continue,
    }
}

fn default_grid() -> Vec<f64> {
    (-5..=1).map(|i| 10f64.powi(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub lr_grid: Vec<f64>,
    pub sweep_epochs: usize,
    pub full_epochs: usize,
    pub schedule: ScheduleKind,
    pub early_stop: EarlyStopConfig,
    pub runtime: RuntimeConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            lr_grid: default_grid(),
            sweep_epochs: 1,
            full_epochs: 5,
            schedule: ScheduleKind::Constant,
            early_stop: EarlyStopConfig::default(),
            runtime: RuntimeConfig::default(),
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.lr_grid.is_empty() {
            return bad("learning-rate grid is empty");
        }
        if self.lr_grid.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return bad("learning rates must be positive");
        }
        if self.lr_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad("learning-rate grid must be strictly increasing");
        }
        if self.sweep_epochs == 0 || self.full_epochs == 0 {
            return bad("epoch budgets must be positive");
        }
        let es = &self.early_stop;
        if es.checkpoints.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("early-stop checkpoints must be in (0, 1]");
        }
        if !(es.factor >= 0.0 && es.factor.is_finite()) {
            return bad("early-stop factor must be >= 0");
        }
        self.runtime.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Same protocol with `factor` times the full-run budget.
    pub fn extended(&self, factor: usize) -> Self {
        Self {
            full_epochs: self.full_epochs * factor.max(1),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalJob {
    pub sample_id: u64,
    pub rule: UpdateRule,
    pub task: TaskSpec,
    pub protocol: EvalProtocol,
    pub seed: u64,
    /// Best reward reached at each early-stop checkpoint by earlier batches.
    pub checkpoint_bests: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr: f64,
    /// `None` when the run failed.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub sample_id: u64,
    pub program: String,
    pub reward: f64,
    pub chosen_lr: f64,
    pub status: EvalStatus,
    pub sweep: Vec<SweepPoint>,
    /// Validation metric after each completed full-run epoch.
    pub epoch_metrics: Vec<f64>,
    /// Best value over the full run (best-seen f for the analytic tasks).
    pub best_metric: Option<f64>,
    pub wall_ms: u64,
    pub seed: u64,
    /// Reward at each early-stop checkpoint the full run reached.
    pub checkpoint_rewards: Vec<Option<f64>>,
    /// Number of training runs started (sweep plus full).
    pub runs: usize,
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub program: String,
    pub reward: f64,
    pub chosen_lr: f64,
    pub status: EvalStatus,
    pub sweep: Vec<SweepPoint>,
    pub epoch_metrics: Vec<f64>,
    pub wall_ms: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerRecord {
    pub batch: u64,
    pub mean_reward: f64,
    pub baseline: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Sample(SampleRecord),
    Controller(ControllerRecord),
}

impl EvalResult {
    pub fn record(&self) -> SampleRecord {
        SampleRecord {
            sample_id: self.sample_id,
            program: self.program.clone(),
            reward: self.reward,
            chosen_lr: self.chosen_lr,
            status: self.status,
            sweep: self.sweep.clone(),
            epoch_metrics: self.epoch_metrics.clone(),
            wall_ms: self.wall_ms,
            seed: self.seed,
        }
    }
}

fn failure_status(e: &TaskError) -> EvalStatus {
    match e {
        TaskError::Overflow { .. } => EvalStatus::Overflow,
        _ => EvalStatus::Diverged,
    }
}

/// Reward of a finished (or stopped) run: the final validation metric, or
/// the best-seen value for Rosenbrock.
fn run_reward(task: &TaskSpec, metric: Metric, last: f64, best: f64) -> f64 {
    match task.kind {
        TaskKind::Rosenbrock => metric.reward(best),
        _ => metric.reward(last),
    }
}

struct RunOutcome {
    metrics: Vec<f64>,
    best: Option<f64>,
    reward: f64,
    status: EvalStatus,
    checkpoint_rewards: Vec<Option<f64>>,
}

fn train_run(job: &EvalJob, lr: f64, epochs: usize, run_index: u64, early_stop: bool) -> RunOutcome {
    let p = &job.protocol;
    let run_seed = mix(job.seed, run_index);
    let metric = job.task.metric();
    let task = match make_task(&job.task, run_seed) {
        Ok(t) => t,
        Err(_) => {
            return RunOutcome {
                metrics: vec![],
                best: None,
                reward: 0.0,
                status: EvalStatus::Diverged,
                checkpoint_rewards: vec![],
            }
        }
    };
    let mut trainer = Trainer::new(
        task,
        job.rule.clone(),
        ScheduleSpec::new(p.schedule.clone(), lr),
        epochs,
        p.runtime,
        run_seed,
    );
    let ckpts = if early_stop && p.early_stop.enabled {
        p.early_stop.checkpoint_epochs(epochs)
    } else {
        vec![]
    };
    let mut out = RunOutcome {
        metrics: Vec::with_capacity(epochs),
        best: None,
        reward: 0.0,
        status: EvalStatus::Ok,
        checkpoint_rewards: vec![None; ckpts.len()],
    };
    for epoch in 1..=epochs {
        match trainer.run_epoch() {
            Ok(m) => {
                out.metrics.push(m.val_metric);
                out.best = Some(m.best_metric);
                out.reward = run_reward(&job.task, metric, m.val_metric, m.best_metric);
            }
            Err(e) => {
                out.status = failure_status(&e);
                out.reward = 0.0;
                return out;
            }
        }
        for (i, &at) in ckpts.iter().enumerate() {
            if at != epoch {
                continue;
            }
            out.checkpoint_rewards[i] = Some(out.reward);
            let best = job.checkpoint_bests.get(i).copied().flatten();
            if early_stop_check(out.reward, best, p.early_stop.factor) == StopDecision::Abort && epoch < epochs {
                out.status = EvalStatus::EarlyStopped;
                return out;
            }
        }
    }
    out
}

/// Sweep every grid rate for `sweep_epochs` from a fresh start, then train
/// with the best rate for `full_epochs` from another fresh start. Failures
/// become statuses with reward 0; nothing here panics on bad candidates.
pub fn evaluate_candidate(job: &EvalJob) -> EvalResult {
    let start = Instant::now();
    let p = &job.protocol;
    let mut sweep = Vec::with_capacity(p.lr_grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, &lr) in p.lr_grid.iter().enumerate() {
        let run = train_run(job, lr, p.sweep_epochs, i as u64, false);
        let ok = run.status == EvalStatus::Ok;
        sweep.push(SweepPoint {
            lr,
            metric: if ok { run.metrics.last().copied() } else { None },
        });
        if ok && best.is_none_or(|(_, r)| run.reward > r) {
            best = Some((i, run.reward));
        }
    }
    let chosen = best.map_or(0, |(i, _)| i);
    let chosen_lr = p.lr_grid[chosen];
    let full = train_run(job, chosen_lr, p.full_epochs, p.lr_grid.len() as u64, true);
    let reward = match full.status {
        EvalStatus::Ok | EvalStatus::EarlyStopped => full.reward.clamp(0.0, 1.0),
        EvalStatus::Diverged | EvalStatus::Overflow => 0.0,
    };
    EvalResult {
        sample_id: job.sample_id,
        program: job.rule.to_string(),
        reward,
        chosen_lr,
        status: full.status,
        sweep,
        epoch_metrics: full.metrics,
        best_metric: full.best,
        wall_ms: start.elapsed().as_millis() as u64,
        seed: job.seed,
        checkpoint_rewards: full.checkpoint_rewards,
        runs: p.lr_grid.len() + 1,
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Evaluates jobs on `workers` threads. Results come back ordered by
/// `sample_id`. A job that panics is retried up to `retries` more times.
pub fn evaluate_jobs(jobs: Vec<EvalJob>, workers: usize, retries: usize) -> Result<Vec<EvalResult>, HarnessError> {
    evaluate_jobs_with(jobs, workers, retries, evaluate_candidate)
}

pub fn evaluate_jobs_with<F>(
    jobs: Vec<EvalJob>,
    workers: usize,
    retries: usize,
    eval: F,
) -> Result<Vec<EvalResult>, HarnessError>
where
    F: Fn(&EvalJob) -> EvalResult + Sync,
{
    if workers == 0 {
        return Err(HarnessError::Config("worker count must be >= 1".into()));
    }
    let ids: BTreeSet<u64> = jobs.iter().map(|j| j.sample_id).collect();
    if ids.len() != jobs.len() {
        return Err(HarnessError::Config("duplicate sample ids in batch".into()));
    }
    let n = jobs.len();
    let (job_tx, job_rx) = bounded::<EvalJob>(workers * 2);
    let (res_tx, res_rx) = unbounded::<Result<EvalResult, HarnessError>>();
    let eval = &eval;
    let mut results = std::thread::scope(|s| {
        for _ in 0..workers.min(n.max(1)) {
            let rx = job_rx.clone();
            let tx = res_tx.clone();
            s.spawn(move || {
                for job in rx.iter() {
                    let mut attempt = 0;
                    let out = loop {
                        attempt += 1;
                        match catch_unwind(AssertUnwindSafe(|| eval(&job))) {
                            Ok(r) => break Ok(r),
                            Err(p) if attempt > retries => {
                                break Err(HarnessError::WorkerPoolFailure {
                                    sample_id: job.sample_id,
                                    attempts: attempt,
                                    message: panic_message(p),
                                })
                            }
                            Err(_) => continue,
                        }
                    };
                    if tx.send(out).is_err() {
                        return;
                    }
                }
            });
        }
        drop(res_tx);
        drop(job_rx);
        for job in jobs {
            job_tx.send(job).expect("workers alive while jobs remain");
        }
        drop(job_tx);
        res_rx.iter().collect::<Result<Vec<_>, _>>()
    })?;
    results.sort_by_key(|r| r.sample_id);
    let got: BTreeSet<u64> = results.iter().map(|r| r.sample_id).collect();
    if got != ids || results.len() != n {
        return Err(HarnessError::Config("job accounting mismatch".into()));
    }
    Ok(results)
}

/// Constraint section of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintsConfig {
    pub distinct_operands: bool,
    pub no_final_add: bool,
    pub must_reuse_output: bool,
    /// Token names; empty means the default search space.
    pub operands: Vec<String>,
    pub unaries: Vec<String>,
    pub binaries: Vec<String>,
    pub sigmoid: bool,
}

impl Default for ConstraintsConfig {
    fn default() -> Self {
        Self {
            distinct_operands: true,
            no_final_add: false,
            must_reuse_output: false,
            operands: vec![],
            unaries: vec![],
            binaries: vec![],
            sigmoid: false,
        }
    }
}

impl ConstraintsConfig {
    pub fn build(&self) -> Result<ConstraintSet, HarnessError> {
        let bad = |m: String| HarnessError::Config(m);
        let base = ConstraintSet::search_space();
        let mut ops = Vec::new();
        for s in &self.operands {
            match Token::parse(s) {
                Some(Token::Operand(o)) if !o.is_output() => ops.push(o),
                _ => return Err(bad(format!("`{s}` is not an operand"))),
            }
        }
        let mut uns = Vec::new();
        for s in &self.unaries {
            match Token::parse(s) {
                Some(Token::Unary(u)) => uns.push(u),
                _ => return Err(bad(format!("`{s}` is not a unary function"))),
            }
        }
        let mut bins = Vec::new();
        for s in &self.binaries {
            match Token::parse(s) {
                Some(Token::Binary(b)) => bins.push(b),
                _ => return Err(bad(format!("`{s}` is not a binary function"))),
            }
        }
        let pick_ops = if ops.is_empty() {
            base.operands().clone()
        } else {
            AllowList::<Operand>::Only(ops)
        };
        let pick_uns = if uns.is_empty() {
            base.unaries().clone()
        } else {
            AllowList::<Unary>::Only(uns)
        };
        let pick_bins = if bins.is_empty() {
            base.binaries().clone()
        } else {
            AllowList::<Binary>::Only(bins)
        };
        let mut set = ConstraintSet::new(pick_ops, pick_uns, pick_bins).map_err(|e| bad(e.to_string()))?;
        if self.sigmoid {
            set = set.with_sigmoid();
        }
        Ok(set
            .with_distinct_operands(self.distinct_operands)
            .with_no_final_add(self.no_final_add)
            .with_must_reuse_output(self.must_reuse_output))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub seed: u64,
    pub workers: usize,
    pub samples: usize,
    pub top_k: usize,
    /// Extra attempts for a job whose worker panicked.
    pub retries: usize,
    pub log: Option<String>,
    /// Controller checkpoint to resume from.
    pub resume: Option<String>,
    pub task: TaskSpec,
    pub protocol: EvalProtocol,
    pub constraints: ConstraintsConfig,
    pub policy: PolicyConfig,
    pub ppo: PpoConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 4,
            samples: 500,
            top_k: 10,
            retries: 1,
            log: None,
            resume: None,
            task: TaskSpec::logistic(),
            protocol: EvalProtocol::default(),
            constraints: ConstraintsConfig::default(),
            policy: PolicyConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: SearchConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if self.samples > 0 && self.samples < self.ppo.batch_size {
            return bad(format!(
                "samples ({}) must be at least the batch size ({})",
                self.samples, self.ppo.batch_size
            ));
        }
        self.task.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.protocol.validate()?;
        self.policy.validate()?;
        self.ppo.validate()?;
        self.constraints.build()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub sample_id: u64,
    pub program: String,
    pub reward: f64,
    pub chosen_lr: f64,
}

/// Highest reward first, ties by ascending sample id.
pub fn rank_top_k(records: &[SampleRecord], k: usize) -> Vec<TopEntry> {
    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.sample_id.cmp(&b.sample_id)));
    sorted
        .into_iter()
        .take(k)
        .map(|r| TopEntry {
            sample_id: r.sample_id,
            program: r.program.clone(),
            reward: r.reward,
            chosen_lr: r.chosen_lr,
        })
        .collect()
}

/// Parses a search log into its records.
pub fn read_log(text: &str) -> Result<Vec<LogRecord>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<LogRecord>(l).map_err(|e| HarnessError::Log {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Top-k ranking recomputed from a search log.
pub fn replay_topk(text: &str, k: usize) -> Result<Vec<TopEntry>, HarnessError> {
    let samples: Vec<SampleRecord> = read_log(text)?
        .into_iter()
        .filter_map(|r| match r {
            LogRecord::Sample(s) => Some(s),
            LogRecord::Controller(_) => None,
        })
        .collect();
    Ok(rank_top_k(&samples, k))
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub records: Vec<SampleRecord>,
    pub controller: Vec<ControllerRecord>,
    pub top_k: Vec<TopEntry>,
    pub policy: ControllerPolicy,
    pub ppo: PpoState,
}

impl SearchOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.policy, &self.ppo)
    }
}

fn write_line<T: Serialize>(sink: &mut dyn Write, value: &T) -> Result<(), HarnessError> {
    serde_json::to_writer(&mut *sink, value).map_err(std::io::Error::from)?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Sample, evaluate, update, repeat until `config.samples` candidates have
/// been evaluated. One JSONL record per sample and one controller record per
/// batch go to `sink` as they are produced.
pub fn run_search(config: &SearchConfig, sink: &mut dyn Write) -> Result<SearchOutcome, HarnessError> {
    config.validate()?;
    let constraints = config.constraints.build()?;
    let (mut policy, mut ppo) = match &config.resume {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| HarnessError::Config(format!("cannot read checkpoint {path}: {e}")))?;
            let (p, s) = Checkpoint::from_json(&text)?.restore()?;
            if p.config().n_groups != config.policy.n_groups {
                return Err(HarnessError::Config("checkpoint n_groups differs from config".into()));
            }
            (p, s)
        }
        None => {
            let space = SearchSpace::new(&constraints, config.policy.n_groups)?;
            let mut init = RngStream::new(config.seed, "controller-init");
            let p = ControllerPolicy::new(config.policy.clone(), space, &mut init)?;
            let s = PpoState::new(p.num_params());
            (p, s)
        }
    };
    let mut sampler = RngStream::new(mix(config.seed, ppo.updates), "controller-sample");
    let n_ckpt = config.protocol.early_stop.checkpoints.len();
    let mut bests: Vec<Option<f64>> = vec![None; n_ckpt];
    let mut records = Vec::with_capacity(config.samples);
    let mut controller = Vec::new();
    let mut next_id = 0u64;
    let mut batch_no = 0u64;
    while records.len() < config.samples {
        let b = config.ppo.batch_size.min(config.samples - records.len());
        let sampled = policy.sample_batch(b, &constraints, &mut sampler)?;
        let jobs: Vec<EvalJob> = sampled
            .iter()
            .enumerate()
            .map(|(i, (prog, _))| {
                let id = next_id + i as u64;
                EvalJob {
                    sample_id: id,
                    rule: UpdateRule::Program(prog.clone()),
                    task: config.task.clone(),
                    protocol: config.protocol.clone(),
                    seed: mix(config.seed, id),
                    checkpoint_bests: bests.clone(),
                }
            })
            .collect();
        next_id += b as u64;
        let results = evaluate_jobs(jobs, config.workers, config.retries)?;
        for r in &results {
            write_line(sink, &r.record())?;
            for (slot, reached) in bests.iter_mut().zip(&r.checkpoint_rewards) {
                if let Some(v) = reached {
                    if slot.is_none_or(|b| *v > b) {
                        *slot = Some(*v);
                    }
                }
            }
            records.push(r.record());
        }
        let trajectories: Vec<_> = sampled
            .into_iter()
            .zip(&results)
            .map(|((_, mut t), r)| {
                t.reward = Some(r.reward);
                t
            })
            .collect();
        batch_no += 1;
        let mean = results.iter().map(|r| r.reward).sum::<f64>() / results.len() as f64;
        let record = match ppo_update(&mut policy, &mut ppo, &trajectories, &constraints, &config.ppo) {
            Ok(stats) => ControllerRecord {
                batch: batch_no,
                mean_reward: stats.mean_reward,
                baseline: stats.baseline,
                entropy: stats.entropy,
            },
            // θ is left untouched; keep searching with the previous policy
            Err(ControllerError::NonFiniteGradient) => ControllerRecord {
                batch: batch_no,
                mean_reward: mean,
                baseline: ppo.baseline.unwrap_or(mean),
                entropy: 0.0,
            },
            Err(e) => return Err(e.into()),
        };
        write_line(sink, &record)?;
        controller.push(record);
    }
    sink.flush()?;
    let top_k = rank_top_k(&records, config.top_k);
    Ok(SearchOutcome {
        records,
        controller,
        top_k,
        policy,
        ppo,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerunRow {
    pub program: String,
    pub chosen_lr: f64,
    pub best: Option<f64>,
    #[serde(rename = "final")]
    pub final_metric: Option<f64>,
    pub reward: f64,
    pub status: EvalStatus,
}

/// Re-evaluates programs with a longer budget (and usually a larger task),
/// in chunks of `chunk`; early-stop bests carry over between chunks. Rows
/// come back ranked by reward, ties by input order.
pub fn topk_rerun(
    programs: &[UpdateRule],
    task: &TaskSpec,
    protocol: &EvalProtocol,
    seed: u64,
    workers: usize,
    chunk: usize,
) -> Result<Vec<RerunRow>, HarnessError> {
    protocol.validate()?;
    task.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut bests: Vec<Option<f64>> = vec![None; protocol.early_stop.checkpoints.len()];
    let mut rows: Vec<(usize, RerunRow)> = Vec::with_capacity(programs.len());
    for (c, part) in programs.chunks(chunk.max(1)).enumerate() {
        let offset = c * chunk.max(1);
        let jobs = part
            .iter()
            .enumerate()
            .map(|(i, rule)| EvalJob {
                sample_id: (offset + i) as u64,
                rule: rule.clone(),
                task: task.clone(),
                protocol: protocol.clone(),
                seed: mix(seed, (offset + i) as u64),
                checkpoint_bests: bests.clone(),
            })
            .collect();
        for r in evaluate_jobs(jobs, workers, 0)? {
            for (slot, reached) in bests.iter_mut().zip(&r.checkpoint_rewards) {
                if let Some(v) = reached {
                    if slot.is_none_or(|b| *v > b) {
                        *slot = Some(*v);
                    }
                }
            }
            rows.push((
                r.sample_id as usize,
                RerunRow {
                    program: r.program,
                    chosen_lr: r.chosen_lr,
                    best: r.best_metric,
                    final_metric: r.epoch_metrics.last().copied(),
                    reward: r.reward,
                    status: r.status,
                },
            ));
        }
    }
    rows.sort_by(|a, b| b.1.reward.total_cmp(&a.1.reward).then(a.0.cmp(&b.0)));
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}
