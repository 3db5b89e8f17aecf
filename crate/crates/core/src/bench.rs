//! Side-by-side optimizer comparisons on a single task.
//!
//! Each optimizer is run once per learning rate from the same start; the rate
//! with the best final value wins and its trajectory is kept.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, NamedOptimizerSpec, OptimizerFamily, UpdateRule};
use crate::runtime::RuntimeConfig;
use crate::schedule::{ScheduleKind, ScheduleSpec};
use crate::tasks::{make_task, TaskError, TaskSpec, Trainer};

/// Adam δ values tried by `tune_adam_eps`.
pub const ADAM_EPS_GRID: [f64; 6] = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown optimizer `{0}`")]
    UnknownOptimizer(String),
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub task: TaskSpec,
    /// Iterations for the analytic tasks.
    pub iters: u64,
    /// Epochs for the learning tasks.
    pub epochs: usize,
    pub lrs: Vec<f64>,
    pub schedule: ScheduleKind,
    pub tune_adam_eps: bool,
    pub runtime: RuntimeConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::rosenbrock(),
            iters: 4000,
            epochs: 5,
            lrs: rosenbrock_grid(),
            schedule: ScheduleKind::Constant,
            tune_adam_eps: false,
            runtime: RuntimeConfig::default(),
            seed: 0,
        }
    }
}

/// Default four-point grid for the Rosenbrock comparison, one point per
/// decade from 1e-5 to 1e-2.
pub fn rosenbrock_grid() -> Vec<f64> {
    log_grid(1e-5, 1e-2, 4)
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| match i {
                0 => lo,
                _ if i + 1 == n => hi,
                _ => 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub optimizer: String,
    pub lr: f64,
    /// Final validation-side value of the winning run (f for analytic tasks).
    #[serde(rename = "final")]
    pub final_value: f64,
    /// Best value seen during the winning run.
    pub best: f64,
    /// Adam δ, when tuned.
    pub adam_eps: Option<f64>,
    /// Training loss before every step of the winning run.
    pub trajectory: Vec<f64>,
}

struct RunResult {
    final_value: f64,
    best: f64,
    trajectory: Vec<f64>,
}

fn run_once(rule: &UpdateRule, lr: f64, cfg: &BenchConfig, runtime: RuntimeConfig) -> Result<RunResult, TaskError> {
    let task = make_task(&cfg.task, cfg.seed)?;
    let spe = cfg.task.steps_per_epoch() as u64;
    let analytic = task.n_train().is_none();
    let horizon = if analytic { cfg.iters } else { cfg.epochs as u64 * spe };
    let mut trainer = Trainer::with_horizon(
        task,
        rule.clone(),
        ScheduleSpec::new(cfg.schedule.clone(), lr),
        horizon,
        runtime,
        cfg.seed,
    )
    .record_trace();
    let (final_value, best) = if analytic {
        trainer.run_iterations(cfg.iters)?
    } else {
        let mut last = (f64::NAN, f64::NAN);
        for _ in 0..cfg.epochs {
            let m = trainer.run_epoch()?;
            last = (m.val_metric, m.best_metric);
        }
        last
    };
    Ok(RunResult {
        final_value,
        best,
        trajectory: trainer.trace().unwrap_or_default().to_vec(),
    })
}

/// Runs every optimizer over the grid and keeps the best rate per optimizer.
/// Failed runs count as the worst possible value; an optimizer whose every
/// run failed reports non-finite values.
pub fn run_bench(ids: &[String], cfg: &BenchConfig) -> Result<Vec<BenchRow>, BenchError> {
    if cfg.lrs.is_empty() || cfg.lrs.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(BenchError::Config(
            "learning rates must be finite and non-negative".into(),
        ));
    }
    cfg.task.validate().map_err(|e| BenchError::Config(e.to_string()))?;
    let rules = ids
        .iter()
        .map(|id| UpdateRule::parse(id).map_err(|_| BenchError::UnknownOptimizer(id.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let higher = cfg.task.metric().higher_is_better();
    let better = |a: f64, b: f64| if higher { a > b } else { a < b };
    let mut rows = Vec::with_capacity(rules.len());
    for (id, rule) in ids.iter().zip(&rules) {
        let is_adam = matches!(
            rule,
            UpdateRule::Named(NamedOptimizerSpec {
                family: OptimizerFamily::Adam,
                ..
            })
        );
        let eps_grid: Vec<Option<f64>> = if is_adam && cfg.tune_adam_eps {
            ADAM_EPS_GRID.iter().map(|e| Some(*e)).collect()
        } else {
            vec![None]
        };
        let mut best_row: Option<BenchRow> = None;
        for eps in &eps_grid {
            let runtime = match eps {
                Some(e) => RuntimeConfig {
                    delta: *e,
                    ..cfg.runtime
                },
                None => cfg.runtime,
            };
            for &lr in &cfg.lrs {
                let row = match run_once(rule, lr, cfg, runtime) {
                    Ok(r) => BenchRow {
                        optimizer: id.clone(),
                        lr,
                        final_value: r.final_value,
                        best: r.best,
                        adam_eps: *eps,
                        trajectory: r.trajectory,
                    },
                    Err(TaskError::Engine(EngineError::UnknownOptimizer(_))) => {
                        return Err(BenchError::UnknownOptimizer(id.clone()))
                    }
                    Err(_) => BenchRow {
                        optimizer: id.clone(),
                        lr,
                        final_value: f64::NAN,
                        best: f64::NAN,
                        adam_eps: *eps,
                        trajectory: vec![],
                    },
                };
                let replace = match &best_row {
                    None => true,
                    Some(b) => {
                        row.final_value.is_finite()
                            && (!b.final_value.is_finite() || better(row.final_value, b.final_value))
                    }
                };
                if replace {
                    best_row = Some(row);
                }
            }
        }
        rows.push(best_row.expect("grid is non-empty"));
    }
    Ok(rows)
}

/// Comparison table with header `optimizer,lr,final,best`.
pub fn write_table(rows: &[BenchRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "optimizer,lr,final,best")?;
    for r in rows {
        writeln!(
            out,
            "{},{:e},{:e},{:e}",
            csv_field(&r.optimizer),
            r.lr,
            r.final_value,
            r.best
        )?;
    }
    Ok(())
}

/// Winning trajectories, header `optimizer,step,value`.
pub fn write_trajectories(rows: &[BenchRow], out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "optimizer,step,value")?;
    for r in rows {
        let name = csv_field(&r.optimizer);
        for (i, v) in r.trajectory.iter().enumerate() {
            writeln!(out, "{name},{i},{v:e}")?;
        }
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn grid_is_log_spaced() {
        let g = log_grid(1e-4, 1e-1, 4);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], 1e-4);
        assert_eq!(g[3], 1e-1);
        assert_eq!(g[1], 1e-3);
        assert_eq!(log_grid(0.5, 2.0, 1), vec![0.5]);
    }

    #[test]
    fn single_optimizer_single_rate() {
        let cfg = BenchConfig {
            lrs: vec![1e-3],
            iters: 100,
            ..BenchConfig::default()
        };
        let rows = run_bench(&ids(&["sgd"]), &cfg).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].trajectory.len(), 100);
        let mut buf = Vec::new();
        write_table(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("optimizer,lr,final,best\nsgd,"));
    }

    #[test]
    fn unknown_optimizer() {
        let err = run_bench(&ids(&["adamw"]), &BenchConfig::default()).unwrap_err();
        assert!(matches!(err, BenchError::UnknownOptimizer(s) if s == "adamw"));
    }

    #[test]
    fn zero_decay_sign_rules_track_sgd() {
        let cfg = BenchConfig {
            task: TaskSpec::mlp(),
            epochs: 1,
            lrs: vec![0.1],
            ..BenchConfig::default()
        };
        let rows = run_bench(&ids(&["sgd", "powersign-const0", "addsign-const0"]), &cfg).unwrap();
        assert_eq!(rows[0].trajectory, rows[1].trajectory);
        assert_eq!(rows[0].trajectory, rows[2].trajectory);
    }

    #[test]
    fn adam_eps_tuning_reports_eps() {
        let cfg = BenchConfig {
            lrs: vec![1e-2],
            iters: 50,
            tune_adam_eps: true,
            ..BenchConfig::default()
        };
        let rows = run_bench(&ids(&["adam"]), &cfg).unwrap();
        assert!(rows[0].adam_eps.is_some());
    }
}
