//! Child tasks used to score candidate optimizers.
//!
//! Two analytic objectives (Rosenbrock, an ill-conditioned quadratic) and two
//! small learning problems on synthetic data (logistic regression on Gaussian
//! blobs, a two-hidden-layer ReLU network on concentric rings). All gradients
//! are hand-derived.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, OptimizerState, StepContext, UpdateRule};
use crate::rng::RngStream;
use crate::runtime::RuntimeConfig;
use crate::schedule::ScheduleSpec;

/// Fixed start point for Rosenbrock runs.
pub const ROSENBROCK_START: [f64; 2] = [-1.5, 1.5];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("training diverged at step {step}")]
    Diverged { step: u64 },
    #[error("update overflowed at step {step}: {source}")]
    Overflow { step: u64, source: EngineError },
    #[error(transparent)]
    Engine(EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Rosenbrock,
    Quadratic,
    #[serde(alias = "logistic")]
    LogisticRegression,
    Mlp,
}

impl std::str::FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rosenbrock" => Ok(TaskKind::Rosenbrock),
            "quadratic" => Ok(TaskKind::Quadratic),
            "logistic" | "logistic_regression" | "logistic-regression" => Ok(TaskKind::LogisticRegression),
            "mlp" => Ok(TaskKind::Mlp),
            _ => Err(TaskError::InvalidSpec(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FunctionValue,
    Accuracy,
    NegativeLogLoss,
}

impl Metric {
    pub fn higher_is_better(self) -> bool {
        self == Metric::Accuracy
    }

    /// Maps a metric value into a reward in [0, 1]: accuracy as is, losses
    /// and function values as `1 / (1 + value)`. Non-finite values map to 0.
    pub fn reward(self, value: f64) -> f64 {
        if !value.is_finite() {
            return 0.0;
        }
        match self {
            Metric::Accuracy => value.clamp(0.0, 1.0),
            Metric::FunctionValue | Metric::NegativeLogLoss => 1.0 / (1.0 + value.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Quadratic dimension, or logistic-regression feature count.
    pub dim: usize,
    pub condition_number: f64,
    /// Distance between the two logistic blob centres, in noise std units.
    pub separation: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Width of both MLP hidden layers.
    pub hidden: usize,
    pub batch_size: usize,
    /// Iterations per epoch for the analytic tasks; 0 picks the kind default.
    pub steps_per_epoch: usize,
    pub data_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::LogisticRegression,
            dim: 10,
            condition_number: 100.0,
            separation: 4.0,
            n_train: 1000,
            n_val: 500,
            hidden: 32,
            batch_size: 100,
            steps_per_epoch: 0,
            data_seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn of(kind: TaskKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn rosenbrock() -> Self {
        Self::of(TaskKind::Rosenbrock)
    }

    pub fn quadratic(dim: usize, condition_number: f64) -> Self {
        Self {
            dim,
            condition_number,
            ..Self::of(TaskKind::Quadratic)
        }
    }

    pub fn logistic() -> Self {
        Self::of(TaskKind::LogisticRegression)
    }

    pub fn mlp() -> Self {
        Self::of(TaskKind::Mlp)
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: &str| Err(TaskError::InvalidSpec(m.to_string()));
        match self.kind {
            TaskKind::Rosenbrock => {}
            TaskKind::Quadratic => {
                if self.dim == 0 {
                    return bad("quadratic needs dim >= 1");
                }
                if !(self.condition_number >= 1.0 && self.condition_number.is_finite()) {
                    return bad("condition number must be >= 1");
                }
            }
            TaskKind::LogisticRegression | TaskKind::Mlp => {
                if self.kind == TaskKind::LogisticRegression && self.dim == 0 {
                    return bad("logistic regression needs dim >= 1");
                }
                if self.kind == TaskKind::Mlp && self.hidden == 0 {
                    return bad("mlp needs hidden >= 1");
                }
                if self.n_train == 0 || self.n_val == 0 {
                    return bad("train and validation splits must be non-empty");
                }
                if self.batch_size == 0 {
                    return bad("batch size must be positive");
                }
                if !(self.separation >= 0.0 && self.separation.is_finite()) {
                    return bad("separation must be non-negative");
                }
            }
        }
        Ok(())
    }

    pub fn metric(&self) -> Metric {
        match self.kind {
            TaskKind::Rosenbrock | TaskKind::Quadratic => Metric::FunctionValue,
            TaskKind::LogisticRegression | TaskKind::Mlp => Metric::Accuracy,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.kind {
            TaskKind::Rosenbrock if self.steps_per_epoch == 0 => 1000,
            TaskKind::Quadratic if self.steps_per_epoch == 0 => 100,
            TaskKind::Rosenbrock | TaskKind::Quadratic => self.steps_per_epoch,
            TaskKind::LogisticRegression | TaskKind::Mlp => self.n_train.div_ceil(self.batch_size),
        }
    }
}

pub fn rosenbrock(p: [f64; 2]) -> f64 {
    let [x, y] = p;
    (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
}

pub fn rosenbrock_grad(p: [f64; 2]) -> [f64; 2] {
    let [x, y] = p;
    [-2.0 * (1.0 - x) - 400.0 * x * (y - x * x), 200.0 * (y - x * x)]
}

/// Row-major features with labels; train and validation rows never overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    pub x_train: Vec<f64>,
    pub y_train: Vec<usize>,
    pub x_val: Vec<f64>,
    pub y_val: Vec<usize>,
}

impl Dataset {
    fn split(features: usize, classes: usize, xs: Vec<f64>, ys: Vec<usize>, n_train: usize) -> Self {
        let (x_train, x_val) = xs.split_at(n_train * features);
        let (y_train, y_val) = ys.split_at(n_train);
        Self {
            features,
            classes,
            x_train: x_train.to_vec(),
            y_train: y_train.to_vec(),
            x_val: x_val.to_vec(),
            y_val: y_val.to_vec(),
        }
    }

    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }

    pub fn n_val(&self) -> usize {
        self.y_val.len()
    }

    fn train_row(&self, i: usize) -> &[f64] {
        &self.x_train[i * self.features..(i + 1) * self.features]
    }

    fn val_row(&self, i: usize) -> &[f64] {
        &self.x_val[i * self.features..(i + 1) * self.features]
    }
}

/// Two Gaussian blobs with unit noise, centres `±separation/2` along a
/// random unit direction.
fn gaussian_blobs(spec: &TaskSpec) -> Dataset {
    let mut rng = RngStream::new(spec.data_seed, "blobs");
    let d = spec.dim;
    let mut dir: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|x| *x /= norm);
    let half = spec.separation / 2.0;
    let n = spec.n_train + spec.n_val;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let s = if label == 1 { half } else { -half };
        for &u in &dir {
            xs.push(s * u + rng.standard_normal());
        }
        ys.push(label);
    }
    Dataset::split(d, 2, xs, ys, spec.n_train)
}

/// Concentric rings of radius 1 (class 0) and 2 (class 1) with radial noise.
fn rings(spec: &TaskSpec) -> Dataset {
    let mut rng = RngStream::new(spec.data_seed, "rings");
    let n = spec.n_train + spec.n_val;
    let mut xs = Vec::with_capacity(n * 2);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let radius = (1.0 + label as f64) + 0.25 * rng.standard_normal();
        let angle = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
        xs.push(radius * angle.cos());
        xs.push(radius * angle.sin());
        ys.push(label);
    }
    Dataset::split(2, 2, xs, ys, spec.n_train)
}

/// Symmetric positive definite matrix with eigenvalues log-spaced in
/// `[1, condition_number]` and a random orthonormal eigenbasis.
fn spd_matrix(dim: usize, condition_number: f64, seed: u64) -> Vec<f64> {
    let mut rng = RngStream::new(seed, "quadratic");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let eig: Vec<f64> = (0..dim)
        .map(|i| {
            if dim == 1 {
                1.0
            } else {
                condition_number.powf(i as f64 / (dim - 1) as f64)
            }
        })
        .collect();
    let mut a = vec![0.0; dim * dim];
    for (k, q) in basis.iter().enumerate() {
        for i in 0..dim {
            for j in 0..dim {
                a[i * dim + j] += eig[k] * q[i] * q[j];
            }
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Rosenbrock,
    Quadratic { a: Vec<f64> },
    Logistic { data: Dataset },
    Mlp { data: Dataset, hidden: usize },
}

/// Which training rows a loss is computed over.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Full,
    Rows(&'a [usize]),
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Offsets of the MLP weight blocks in the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct MlpLayout {
    inputs: usize,
    hidden: usize,
    classes: usize,
}

impl MlpLayout {
    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.inputs
    }
    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.w1().end;
        s..s + self.hidden
    }
    fn w2(&self) -> std::ops::Range<usize> {
        let s = self.b1().end;
        s..s + self.hidden * self.hidden
    }
    fn b2(&self) -> std::ops::Range<usize> {
        let s = self.w2().end;
        s..s + self.hidden
    }
    fn w3(&self) -> std::ops::Range<usize> {
        let s = self.b2().end;
        s..s + self.classes * self.hidden
    }
    fn b3(&self) -> std::ops::Range<usize> {
        let s = self.w3().end;
        s..s + self.classes
    }
    fn len(&self) -> usize {
        self.b3().end
    }
}

struct MlpForward {
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

fn dense(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..out)
        .map(|i| {
            b[i] + w[i * n_in..(i + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect()
}

fn mlp_forward(p: &[f64], l: MlpLayout, x: &[f64]) -> MlpForward {
    let z1 = dense(&p[l.w1()], &p[l.b1()], x, l.hidden);
    let h1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
    let z2 = dense(&p[l.w2()], &p[l.b2()], &h1, l.hidden);
    let h2: Vec<f64> = z2.iter().map(|z| z.max(0.0)).collect();
    let logits = dense(&p[l.w3()], &p[l.b3()], &h2, l.classes);
    MlpForward { z1, h1, z2, h2, logits }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// A child task with its current parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    spec: TaskSpec,
    params: Vec<f64>,
    model: Model,
}

/// Builds a task. The dataset depends only on `spec.data_seed`; the initial
/// parameters come from `init_seed` (Rosenbrock always starts at
/// [`ROSENBROCK_START`]).
pub fn make_task(spec: &TaskSpec, init_seed: u64) -> Result<Task, TaskError> {
    spec.validate()?;
    let mut init = RngStream::new(init_seed, "init");
    let (model, params) = match spec.kind {
        TaskKind::Rosenbrock => (Model::Rosenbrock, ROSENBROCK_START.to_vec()),
        TaskKind::Quadratic => {
            let a = spd_matrix(spec.dim, spec.condition_number, spec.data_seed);
            let w = (0..spec.dim).map(|_| init.standard_normal()).collect();
            (Model::Quadratic { a }, w)
        }
        TaskKind::LogisticRegression => {
            let data = gaussian_blobs(spec);
            let w = (0..=spec.dim).map(|_| 0.01 * init.standard_normal()).collect();
            (Model::Logistic { data }, w)
        }
        TaskKind::Mlp => {
            let data = rings(spec);
            let layout = MlpLayout {
                inputs: data.features,
                hidden: spec.hidden,
                classes: data.classes,
            };
            let mut w = vec![0.0; layout.len()];
            for (range, fan_in) in [
                (layout.w1(), layout.inputs),
                (layout.w2(), layout.hidden),
                (layout.w3(), layout.hidden),
            ] {
                let std = (2.0 / fan_in as f64).sqrt();
                for x in &mut w[range] {
                    *x = std * init.standard_normal();
                }
            }
            (
                Model::Mlp {
                    data,
                    hidden: spec.hidden,
                },
                w,
            )
        }
    };
    Ok(Task {
        spec: spec.clone(),
        params,
        model,
    })
}

impl Task {
    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) {
        assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn metric(&self) -> Metric {
        self.spec.metric()
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        match &self.model {
            Model::Logistic { data } | Model::Mlp { data, .. } => Some(data),
            _ => None,
        }
    }

    /// Training-set size, for tasks that have one.
    pub fn n_train(&self) -> Option<usize> {
        self.dataset().map(Dataset::n_train)
    }

    fn mlp_layout(&self) -> Option<MlpLayout> {
        match &self.model {
            Model::Mlp { data, hidden } => Some(MlpLayout {
                inputs: data.features,
                hidden: *hidden,
                classes: data.classes,
            }),
            _ => None,
        }
    }

    fn rows<'b>(&self, batch: Batch<'b>) -> Vec<usize> {
        match batch {
            Batch::Full => (0..self.n_train().unwrap_or(0)).collect(),
            Batch::Rows(rows) => rows.to_vec(),
        }
    }

    /// Training loss at `params`.
    pub fn loss(&self, params: &[f64], batch: Batch<'_>) -> f64 {
        self.loss_grad_impl(params, batch, false).0
    }

    /// Training loss and its gradient at `params`.
    pub fn loss_grad(&self, params: &[f64], batch: Batch<'_>) -> (f64, Vec<f64>) {
        self.loss_grad_impl(params, batch, true)
    }

    fn loss_grad_impl(&self, p: &[f64], batch: Batch<'_>, want_grad: bool) -> (f64, Vec<f64>) {
        let mut grad = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
        match &self.model {
            Model::Rosenbrock => {
                let point = [p[0], p[1]];
                if want_grad {
                    grad = rosenbrock_grad(point).to_vec();
                }
                (rosenbrock(point), grad)
            }
            Model::Quadratic { a } => {
                let n = p.len();
                let aw: Vec<f64> = (0..n)
                    .map(|i| a[i * n..(i + 1) * n].iter().zip(p).map(|(x, y)| x * y).sum())
                    .collect();
                let f = 0.5 * aw.iter().zip(p).map(|(x, y)| x * y).sum::<f64>();
                if want_grad {
                    grad = aw;
                }
                (f, grad)
            }
            Model::Logistic { data } => {
                let rows = self.rows(batch);
                let d = data.features;
                let scale = 1.0 / rows.len().max(1) as f64;
                let mut loss = 0.0;
                for &i in &rows {
                    let x = data.train_row(i);
                    let s = if data.y_train[i] == 1 { 1.0 } else { -1.0 };
                    let z = p[d] + x.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
                    loss += softplus(-s * z);
                    if want_grad {
                        let coef = -s * sigmoid(-s * z) * scale;
                        for (gj, xj) in grad.iter_mut().zip(x) {
                            *gj += coef * xj;
                        }
                        grad[d] += coef;
                    }
                }
                (loss * scale, grad)
            }
            Model::Mlp { data, .. } => {
                let l = self.mlp_layout().expect("mlp layout");
                let rows = self.rows(batch);
                let scale = 1.0 / rows.len().max(1) as f64;
                let mut loss = 0.0;
                for &i in &rows {
                    let x = data.train_row(i);
                    let fwd = mlp_forward(p, l, x);
                    let logp = log_softmax(&fwd.logits);
                    let y = data.y_train[i];
                    loss -= logp[y];
                    if !want_grad {
                        continue;
                    }
                    // d loss / d logits = softmax - onehot
                    let dlogits: Vec<f64> = logp
                        .iter()
                        .enumerate()
                        .map(|(k, lp)| (lp.exp() - if k == y { 1.0 } else { 0.0 }) * scale)
                        .collect();
                    let dh2 = backprop_dense(&mut grad, p, l.w3(), l.b3(), &fwd.h2, &dlogits);
                    let dz2: Vec<f64> = dh2
                        .iter()
                        .zip(&fwd.z2)
                        .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
                        .collect();
                    let dh1 = backprop_dense(&mut grad, p, l.w2(), l.b2(), &fwd.h1, &dz2);
                    let dz1: Vec<f64> = dh1
                        .iter()
                        .zip(&fwd.z1)
                        .map(|(d, z)| if *z > 0.0 { *d } else { 0.0 })
                        .collect();
                    backprop_dense(&mut grad, p, l.w1(), l.b1(), x, &dz1);
                }
                (loss * scale, grad)
            }
        }
    }

    /// Smallest |pre-activation| over the given rows; near zero means a ReLU
    /// kink is within finite-difference reach. `None` for non-MLP tasks.
    pub fn relu_margin(&self, params: &[f64], rows: &[usize]) -> Option<f64> {
        let l = self.mlp_layout()?;
        let data = self.dataset()?;
        let mut margin = f64::INFINITY;
        for &i in rows {
            let fwd = mlp_forward(params, l, data.train_row(i));
            for z in fwd.z1.iter().chain(&fwd.z2) {
                margin = margin.min(z.abs());
            }
        }
        Some(margin)
    }

    /// Validation metric at the current parameters. For the analytic tasks
    /// this is the objective value itself.
    pub fn validation_metric(&self) -> f64 {
        match &self.model {
            Model::Rosenbrock | Model::Quadratic { .. } => self.loss(&self.params, Batch::Full),
            Model::Logistic { data } => {
                let d = data.features;
                let p = &self.params;
                let correct = (0..data.n_val())
                    .filter(|&i| {
                        let z = p[d] + data.val_row(i).iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
                        (z > 0.0) == (data.y_val[i] == 1)
                    })
                    .count();
                correct as f64 / data.n_val() as f64
            }
            Model::Mlp { data, .. } => {
                let l = self.mlp_layout().expect("mlp layout");
                let correct = (0..data.n_val())
                    .filter(|&i| argmax(&mlp_forward(&self.params, l, data.val_row(i)).logits) == data.y_val[i])
                    .count();
                correct as f64 / data.n_val() as f64
            }
        }
    }
}

/// Accumulates weight and bias gradients of `y = W x + b` and returns dL/dx.
fn backprop_dense(
    grad: &mut [f64],
    p: &[f64],
    w: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
    x: &[f64],
    dy: &[f64],
) -> Vec<f64> {
    let n_in = x.len();
    let mut dx = vec![0.0; n_in];
    for (i, &d) in dy.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grad[b.start + i] += d;
        let row = w.start + i * n_in;
        for j in 0..n_in {
            grad[row + j] += d * x[j];
            dx[j] += d * p[row + j];
        }
    }
    dx
}

/// Outcome of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub train_metric: f64,
    /// Validation metric after the epoch.
    pub val_metric: f64,
    /// Best validation-side value seen so far. For the analytic tasks this
    /// tracks every iteration, not only epoch ends.
    pub best_metric: f64,
    pub steps: u64,
}

/// One training run of an update rule on a task.
#[derive(Debug, Clone)]
pub struct Trainer {
    task: Task,
    rule: UpdateRule,
    state: OptimizerState,
    schedule: ScheduleSpec,
    config: RuntimeConfig,
    horizon: u64,
    steps: u64,
    epochs_done: usize,
    best: Option<f64>,
    rule_rng: RngStream,
    data_rng: RngStream,
    lr_rng: RngStream,
    trace: Option<Vec<f64>>,
}

impl Trainer {
    /// `total_epochs` fixes the horizon seen by decay operands and schedules.
    pub fn new(
        task: Task,
        rule: UpdateRule,
        schedule: ScheduleSpec,
        total_epochs: usize,
        config: RuntimeConfig,
        seed: u64,
    ) -> Self {
        let horizon = (total_epochs * task.spec().steps_per_epoch()).max(1) as u64;
        Self::with_horizon(task, rule, schedule, horizon, config, seed)
    }

    pub fn with_horizon(
        task: Task,
        rule: UpdateRule,
        schedule: ScheduleSpec,
        horizon: u64,
        config: RuntimeConfig,
        seed: u64,
    ) -> Self {
        let state = rule.init_state(task.num_params());
        let root = RngStream::new(seed, "trainer");
        Self {
            task,
            rule,
            state,
            schedule,
            config,
            horizon: horizon.max(1),
            steps: 0,
            epochs_done: 0,
            best: None,
            rule_rng: root.fork("rule"),
            data_rng: root.fork("data"),
            lr_rng: root.fork("lr"),
            trace: None,
        }
    }

    /// Records the training loss before every step.
    pub fn record_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> Option<&[f64]> {
        self.trace.as_deref()
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    fn better(&self, a: f64, b: f64) -> bool {
        if self.task.metric().higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    fn note(&mut self, value: f64) {
        if value.is_finite() && self.best.is_none_or(|b| self.better(value, b)) {
            self.best = Some(value);
        }
    }

    /// One optimizer step on the given rows. Returns the pre-step loss.
    fn step(&mut self, batch: Batch<'_>) -> Result<f64, TaskError> {
        let (loss, g) = self.task.loss_grad(&self.task.params, batch);
        if let Some(trace) = &mut self.trace {
            trace.push(loss);
        }
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(TaskError::Diverged { step: self.steps });
        }
        let lr = self
            .schedule
            .learning_rate(self.steps, self.horizon, &mut self.lr_rng, &self.config);
        let ctx = StepContext {
            g: &g,
            w: &self.task.params,
            horizon: self.horizon,
            config: &self.config,
        };
        let u = self.rule.step(&mut self.state, &ctx, &mut self.rule_rng).map_err(|e| {
            if e.is_overflow() {
                TaskError::Overflow {
                    step: self.steps,
                    source: e,
                }
            } else {
                TaskError::Engine(e)
            }
        })?;
        for (w, du) in self.task.params.iter_mut().zip(&u) {
            *w -= lr * du;
        }
        self.steps += 1;
        if self.task.params.iter().any(|x| !x.is_finite()) {
            return Err(TaskError::Diverged { step: self.steps });
        }
        Ok(loss)
    }

    /// One epoch: shuffled minibatch passes for the learning tasks,
    /// `steps_per_epoch` full-gradient iterations for the analytic ones.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, TaskError> {
        let mut losses = 0.0;
        let mut count = 0usize;
        match self.task.n_train() {
            Some(n) => {
                let mut order: Vec<usize> = (0..n).collect();
                self.data_rng.shuffle(&mut order);
                let bs = self.task.spec().batch_size;
                for rows in order.chunks(bs) {
                    losses += self.step(Batch::Rows(rows))?;
                    count += 1;
                }
            }
            None => {
                for _ in 0..self.task.spec().steps_per_epoch() {
                    let loss = self.step(Batch::Full)?;
                    self.note(loss);
                    losses += loss;
                    count += 1;
                }
            }
        }
        let val = self.task.validation_metric();
        if !val.is_finite() {
            return Err(TaskError::Diverged { step: self.steps });
        }
        self.note(val);
        self.epochs_done += 1;
        Ok(EpochMetrics {
            epoch: self.epochs_done,
            train_metric: losses / count.max(1) as f64,
            val_metric: val,
            best_metric: self.best.unwrap_or(val),
            steps: self.steps,
        })
    }

    /// Runs `n` single full-gradient iterations on an analytic task,
    /// ignoring epoch boundaries. Returns (final value, best value).
    pub fn run_iterations(&mut self, n: u64) -> Result<(f64, f64), TaskError> {
        for _ in 0..n {
            let loss = self.step(Batch::Full)?;
            self.note(loss);
        }
        let val = self.task.validation_metric();
        if !val.is_finite() {
            return Err(TaskError::Diverged { step: self.steps });
        }
        self.note(val);
        Ok((val, self.best.unwrap_or(val)))
    }

    pub fn into_task(self) -> Task {
        self.task
    }
}

/// Free-function form of [`Trainer::run_epoch`].
pub fn run_epoch(trainer: &mut Trainer) -> Result<EpochMetrics, TaskError> {
    trainer.run_epoch()
}
