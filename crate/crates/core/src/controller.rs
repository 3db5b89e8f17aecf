//! Autoregressive sampling policy over DSL token sequences.
//!
//! A single-layer LSTM reads the previously sampled token and emits logits
//! over the vocabulary of the current step. Every step has its own output
//! projection and its own input embedding table, since operand steps grow
//! with the bank (`out1`, `out2`, ...). Structural constraints are enforced
//! by masking: forbidden tokens get probability exactly zero and receive no
//! gradient. The policy is trained with a clipped (PPO) surrogate on
//! sequence-level probability ratios.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{
    AllowList, Binary, ConstraintSet, DslError, Group, Operand, Token, Unary, UpdateRuleProgram, GROUP_LEN, MAX_GROUPS,
};
use crate::rng::RngStream;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("every token is masked at step {step}")]
    EmptySupport { step: usize },
    #[error("non-finite policy gradient; update aborted")]
    NonFiniteGradient,
    #[error("token `{token}` is not in the vocabulary of step {step}")]
    InvalidPrefix { step: usize, token: String },
    #[error("empty trajectory batch")]
    EmptyBatch,
    #[error("trajectory {0} has no reward")]
    MissingReward(usize),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Dsl(#[from] DslError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Parameters start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// Groups per sampled program.
    pub n_groups: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 150,
            embed: 32,
            init_scale: 0.08,
            n_groups: 2,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidConfig(m.to_string()));
        if self.hidden == 0 || self.embed == 0 {
            return bad("hidden and embedding sizes must be positive");
        }
        if !(1..=MAX_GROUPS).contains(&self.n_groups) {
            return bad("n_groups must be in 1..=4");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init_scale must be a non-negative number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub entropy_coef: f64,
    pub baseline_decay: f64,
    pub lr: f64,
    /// Trajectories per update.
    pub batch_size: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            epochs: 4,
            entropy_coef: 0.0015,
            baseline_decay: 0.95,
            lr: 1e-5,
            batch_size: 5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::InvalidConfig(m.to_string()));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must be in (0, 1)");
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad("entropy_coef must be >= 0");
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay must be in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        Ok(())
    }
}

/// Per-step vocabularies. Operand steps of group `i` (0-based) offer the base
/// operands followed by `out1..=out<i>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    operands: Vec<Operand>,
    unaries: Vec<Unary>,
    binaries: Vec<Binary>,
    n_groups: usize,
}

impl SearchSpace {
    /// Vocabularies from the constraint allow-lists; an unrestricted list
    /// means the default search space for operands and the full list for
    /// functions.
    pub fn new(constraints: &ConstraintSet, n_groups: usize) -> Result<Self, ControllerError> {
        let operands = match constraints.operands() {
            AllowList::All => Operand::BASE.into_iter().chain(Operand::DECAYS).collect(),
            AllowList::Only(ops) => ops.iter().copied().filter(|o| !o.is_output()).collect(),
        };
        let unaries = match constraints.unaries() {
            AllowList::All => Unary::ALL.to_vec(),
            AllowList::Only(us) => us.clone(),
        };
        let binaries = match constraints.binaries() {
            AllowList::All => Binary::ALL.to_vec(),
            AllowList::Only(bs) => bs.clone(),
        };
        Self::from_vocab(operands, unaries, binaries, n_groups)
    }

    pub fn from_vocab(
        operands: Vec<Operand>,
        unaries: Vec<Unary>,
        binaries: Vec<Binary>,
        n_groups: usize,
    ) -> Result<Self, ControllerError> {
        if operands.is_empty() || unaries.is_empty() || binaries.is_empty() {
            return Err(ControllerError::InvalidConfig("empty vocabulary".into()));
        }
        if operands.iter().any(Operand::is_output) {
            return Err(ControllerError::InvalidConfig(
                "bank references are added per step, not listed".into(),
            ));
        }
        if !(1..=MAX_GROUPS).contains(&n_groups) {
            return Err(ControllerError::InvalidConfig("n_groups must be in 1..=4".into()));
        }
        Ok(Self {
            operands,
            unaries,
            binaries,
            n_groups,
        })
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn n_steps(&self) -> usize {
        self.n_groups * GROUP_LEN
    }

    pub fn vocab_size(&self, step: usize) -> usize {
        let group = step / GROUP_LEN;
        match step % GROUP_LEN {
            0 | 1 => self.operands.len() + group,
            2 | 3 => self.unaries.len(),
            _ => self.binaries.len(),
        }
    }

    pub fn token(&self, step: usize, index: usize) -> Token {
        match step % GROUP_LEN {
            0 | 1 => match self.operands.get(index) {
                Some(op) => Token::Operand(*op),
                None => Token::Operand(Operand::Output(index - self.operands.len() + 1)),
            },
            2 | 3 => Token::Unary(self.unaries[index]),
            _ => Token::Binary(self.binaries[index]),
        }
    }

    pub fn vocab(&self, step: usize) -> Vec<Token> {
        (0..self.vocab_size(step)).map(|i| self.token(step, i)).collect()
    }

    pub fn index_of(&self, step: usize, token: &Token) -> Option<usize> {
        (0..self.vocab_size(step)).find(|&i| self.token(step, i) == *token)
    }

    /// Allowed tokens at `step` given the actions taken so far.
    pub fn mask(&self, step: usize, prefix: &[usize], constraints: &ConstraintSet) -> Vec<bool> {
        let group = step / GROUP_LEN;
        let pos = step % GROUP_LEN;
        (0..self.vocab_size(step))
            .map(|i| match self.token(step, i) {
                Token::Operand(op) => {
                    if !constraints.allows_operand(&op) {
                        return false;
                    }
                    if pos == 1 {
                        let first = prefix[step - 1];
                        if constraints.distinct_operands && i == first {
                            return false;
                        }
                        let first_is_out = first >= self.operands.len();
                        if constraints.must_reuse_output && group > 0 && !first_is_out && !op.is_output() {
                            return false;
                        }
                    }
                    true
                }
                Token::Unary(u) => constraints.allows_unary(&u),
                Token::Binary(b) => {
                    let last = group + 1 == self.n_groups;
                    constraints.allows_binary(&b) && !(last && constraints.no_final_add && b == Binary::Add)
                }
            })
            .collect()
    }

    pub fn decode(&self, actions: &[usize]) -> Result<UpdateRuleProgram, ControllerError> {
        assert_eq!(actions.len(), self.n_steps());
        let op = |s: usize| match self.token(s, actions[s]) {
            Token::Operand(o) => o,
            _ => unreachable!(),
        };
        let un = |s: usize| match self.token(s, actions[s]) {
            Token::Unary(u) => u,
            _ => unreachable!(),
        };
        let groups = (0..self.n_groups)
            .map(|i| {
                let s = i * GROUP_LEN;
                let b = match self.token(s + 4, actions[s + 4]) {
                    Token::Binary(b) => b,
                    _ => unreachable!(),
                };
                Group::new(op(s), op(s + 1), un(s + 2), un(s + 3), b)
            })
            .collect();
        Ok(UpdateRuleProgram::new(groups)?)
    }

    /// Inverse of [`decode`](Self::decode) for programs with exactly
    /// `n_groups` groups.
    pub fn encode(&self, program: &UpdateRuleProgram) -> Result<Vec<usize>, ControllerError> {
        if program.len() != self.n_groups {
            return Err(ControllerError::InvalidConfig(format!(
                "program has {} groups, policy samples {}",
                program.len(),
                self.n_groups
            )));
        }
        let tokens: Vec<Token> = program.groups().iter().flat_map(|g| g.tokens()).collect();
        tokens
            .iter()
            .enumerate()
            .map(|(step, t)| {
                self.index_of(step, t).ok_or_else(|| ControllerError::InvalidPrefix {
                    step,
                    token: t.to_string(),
                })
            })
            .collect()
    }
}

type Span = std::ops::Range<usize>;

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    w_lstm: Span,
    b_lstm: Span,
    start: Span,
    head_w: Vec<Span>,
    head_b: Vec<Span>,
    /// Embedding of the token chosen at step k (input of step k+1).
    embed: Vec<Span>,
    len: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig, space: &SearchSpace) -> Self {
        let (h, d) = (cfg.hidden, cfg.embed);
        let mut at = 0;
        let mut take = |n: usize| {
            let s = at..at + n;
            at += n;
            s
        };
        let w_lstm = take(4 * h * (d + h));
        let b_lstm = take(4 * h);
        let start = take(d);
        let steps = space.n_steps();
        let mut head_w = Vec::with_capacity(steps);
        let mut head_b = Vec::with_capacity(steps);
        let mut embed = Vec::with_capacity(steps);
        for k in 0..steps {
            let v = space.vocab_size(k);
            head_w.push(take(v * h));
            head_b.push(take(v));
            embed.push(take(if k + 1 < steps { v * d } else { 0 }));
        }
        Self {
            w_lstm,
            b_lstm,
            start,
            head_w,
            head_b,
            embed,
            len: at,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Masked categorical at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    pub vocab: Vec<Token>,
    pub logits: Vec<f64>,
    /// Zero exactly where masked.
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
}

impl StepDistribution {
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    logp: Vec<f64>,
    probs: Vec<f64>,
    mask: Vec<bool>,
    action: usize,
}

/// A sampled sequence with what PPO needs to re-score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub tokens: Vec<String>,
    /// Log-probability of each action under the sampling distribution.
    pub step_logps: Vec<f64>,
    /// Number of masked tokens at each step.
    pub masked: Vec<usize>,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn logp(&self) -> f64 {
        self.step_logps.iter().sum()
    }
}

/// LSTM policy with flat parameter vector θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerPolicy {
    config: PolicyConfig,
    space: SearchSpace,
    layout: Layout,
    theta: Vec<f64>,
}

struct Rollout {
    steps: Vec<StepCache>,
    logp: f64,
    entropy: f64,
}

enum Choose<'a> {
    Sample(&'a mut RngStream),
    Given(&'a [usize]),
}

impl ControllerPolicy {
    pub fn new(config: PolicyConfig, space: SearchSpace, rng: &mut RngStream) -> Result<Self, ControllerError> {
        config.validate()?;
        if space.n_groups() != config.n_groups {
            return Err(ControllerError::InvalidConfig(
                "search space and policy disagree on n_groups".into(),
            ));
        }
        let layout = Layout::new(&config, &space);
        let s = config.init_scale;
        let theta = (0..layout.len).map(|_| rng.uniform_range(-s, s)).collect();
        Ok(Self {
            config,
            space,
            layout,
            theta,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: Vec<f64>) {
        assert_eq!(theta.len(), self.layout.len, "parameter count mismatch");
        self.theta = theta;
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    fn lstm_step(&self, x: Vec<f64>, h_prev: Vec<f64>, c_prev: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.config.hidden;
        let d = self.config.embed;
        let w = &self.theta[self.layout.w_lstm.clone()];
        let b = &self.theta[self.layout.b_lstm.clone()];
        let cols = d + h;
        let mut gates = vec![0.0; 4 * h];
        for (r, gate) in gates.iter_mut().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            let mut acc = b[r];
            for j in 0..d {
                acc += row[j] * x[j];
            }
            for j in 0..h {
                acc += row[d + j] * h_prev[j];
            }
            *gate = acc;
        }
        for (r, gate) in gates.iter_mut().enumerate() {
            *gate = if (2 * h..3 * h).contains(&r) {
                gate.tanh()
            } else {
                sigmoid(*gate)
            };
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut hn = vec![0.0; h];
        for j in 0..h {
            c[j] = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
            tanh_c[j] = c[j].tanh();
            hn[j] = gates[3 * h + j] * tanh_c[j];
        }
        (gates, c, tanh_c, hn)
    }

    fn head(&self, step: usize, h: &[f64]) -> Vec<f64> {
        let v = self.space.vocab_size(step);
        let w = &self.theta[self.layout.head_w[step].clone()];
        let b = &self.theta[self.layout.head_b[step].clone()];
        let hs = self.config.hidden;
        (0..v)
            .map(|i| b[i] + w[i * hs..(i + 1) * hs].iter().zip(h).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    fn input(&self, step: usize, prev_action: Option<usize>) -> Vec<f64> {
        let d = self.config.embed;
        match prev_action {
            None => self.theta[self.layout.start.clone()].to_vec(),
            Some(a) => {
                let e = &self.theta[self.layout.embed[step - 1].clone()];
                e[a * d..(a + 1) * d].to_vec()
            }
        }
    }

    fn rollout(
        &self,
        constraints: &ConstraintSet,
        mut choose: Choose<'_>,
        stop_at: Option<usize>,
    ) -> Result<Rollout, ControllerError> {
        let hs = self.config.hidden;
        let n = stop_at.unwrap_or(self.space.n_steps());
        let mut h = vec![0.0; hs];
        let mut c = vec![0.0; hs];
        let mut actions: Vec<usize> = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        let mut logp_total = 0.0;
        let mut entropy = 0.0;
        for k in 0..n {
            let x = self.input(k, actions.last().copied());
            let (gates, c_new, tanh_c, h_new) = self.lstm_step(x.clone(), h.clone(), c.clone());
            let logits = self.head(k, &h_new);
            let mask = self.space.mask(k, &actions, constraints);
            let max = logits
                .iter()
                .zip(&mask)
                .filter(|(_, m)| **m)
                .map(|(z, _)| *z)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(ControllerError::EmptySupport { step: k });
            }
            let lse = max
                + logits
                    .iter()
                    .zip(&mask)
                    .filter(|(_, m)| **m)
                    .map(|(z, _)| (z - max).exp())
                    .sum::<f64>()
                    .ln();
            let logp: Vec<f64> = logits
                .iter()
                .zip(&mask)
                .map(|(z, m)| if *m { z - lse } else { f64::NEG_INFINITY })
                .collect();
            let probs: Vec<f64> = logp
                .iter()
                .zip(&mask)
                .map(|(l, m)| if *m { l.exp() } else { 0.0 })
                .collect();
            entropy += probs
                .iter()
                .zip(&logp)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, l)| -p * l)
                .sum::<f64>();
            let action = match &mut choose {
                Choose::Given(given) => {
                    let a = given[k];
                    if a >= mask.len() || !mask[a] {
                        return Err(ControllerError::InvalidPrefix {
                            step: k,
                            token: if a < mask.len() {
                                self.space.token(k, a).to_string()
                            } else {
                                format!("#{a}")
                            },
                        });
                    }
                    a
                }
                Choose::Sample(rng) => {
                    let u = rng.uniform();
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (i, p) in probs.iter().enumerate() {
                        if mask[i] {
                            acc += p;
                            pick = Some(i);
                            if u < acc {
                                break;
                            }
                        }
                    }
                    pick.expect("support is non-empty")
                }
            };
            logp_total += logp[action];
            actions.push(action);
            steps.push(StepCache {
                x,
                h_prev: std::mem::replace(&mut h, h_new.clone()),
                c_prev: std::mem::replace(&mut c, c_new),
                gates,
                tanh_c,
                h: h_new,
                logp,
                probs,
                mask,
                action,
            });
        }
        Ok(Rollout {
            steps,
            logp: logp_total,
            entropy,
        })
    }

    /// Backpropagates per-step logit gradients into `grad`.
    fn backward(&self, steps: &[StepCache], dlogits: &[Vec<f64>], grad: &mut [f64]) {
        let hs = self.config.hidden;
        let d = self.config.embed;
        let cols = d + hs;
        let l = &self.layout;
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        for k in (0..steps.len()).rev() {
            let s = &steps[k];
            let dz = &dlogits[k];
            let mut dh = dh_next.clone();
            let hw = l.head_w[k].start;
            let hb = l.head_b[k].start;
            for (i, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[hb + i] += g;
                let row = hw + i * hs;
                for j in 0..hs {
                    grad[row + j] += g * s.h[j];
                    dh[j] += g * self.theta[row + j];
                }
            }
            let gates = &s.gates;
            let mut da = vec![0.0; 4 * hs];
            let mut dc_prev = vec![0.0; hs];
            for j in 0..hs {
                let (ig, fg, gg, og) = (gates[j], gates[hs + j], gates[2 * hs + j], gates[3 * hs + j]);
                let dc = dh[j] * og * (1.0 - s.tanh_c[j] * s.tanh_c[j]) + dc_next[j];
                let do_ = dh[j] * s.tanh_c[j];
                da[j] = dc * gg * ig * (1.0 - ig);
                da[hs + j] = dc * s.c_prev[j] * fg * (1.0 - fg);
                da[2 * hs + j] = dc * ig * (1.0 - gg * gg);
                da[3 * hs + j] = do_ * og * (1.0 - og);
                dc_prev[j] = dc * fg;
            }
            let mut dx = vec![0.0; d];
            let mut dh_prev = vec![0.0; hs];
            for (r, &g) in da.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[l.b_lstm.start + r] += g;
                let row = l.w_lstm.start + r * cols;
                for j in 0..d {
                    grad[row + j] += g * s.x[j];
                    dx[j] += g * self.theta[row + j];
                }
                for j in 0..hs {
                    grad[row + d + j] += g * s.h_prev[j];
                    dh_prev[j] += g * self.theta[row + d + j];
                }
            }
            let target = if k == 0 {
                l.start.start
            } else {
                l.embed[k - 1].start + steps[k - 1].action * d
            };
            for j in 0..d {
                grad[target + j] += dx[j];
            }
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
    }

    /// Masked distribution for the next step after `prefix`.
    pub fn step_logits(
        &self,
        prefix: &[Token],
        constraints: &ConstraintSet,
    ) -> Result<StepDistribution, ControllerError> {
        let step = prefix.len();
        if step >= self.space.n_steps() {
            return Err(ControllerError::InvalidPrefix {
                step,
                token: "<end>".into(),
            });
        }
        let actions = prefix
            .iter()
            .enumerate()
            .map(|(k, t)| {
                self.space.index_of(k, t).ok_or_else(|| ControllerError::InvalidPrefix {
                    step: k,
                    token: t.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut padded = actions.clone();
        padded.push(0);
        // Roll out the prefix plus one dummy step; only the last step's
        // distribution is read, its action is never used.
        let mask = self.space.mask(step, &actions, constraints);
        let first_allowed = mask
            .iter()
            .position(|m| *m)
            .ok_or(ControllerError::EmptySupport { step })?;
        padded[step] = first_allowed;
        let r = self.rollout(constraints, Choose::Given(&padded), Some(step + 1))?;
        let last = r.steps.last().expect("at least one step");
        let logits = self.head(step, &last.h);
        Ok(StepDistribution {
            vocab: self.space.vocab(step),
            logits,
            probs: last.probs.clone(),
            mask: last.mask.clone(),
        })
    }

    fn trajectory(&self, r: &Rollout) -> Trajectory {
        Trajectory {
            actions: r.steps.iter().map(|s| s.action).collect(),
            tokens: r
                .steps
                .iter()
                .enumerate()
                .map(|(k, s)| self.space.token(k, s.action).to_string())
                .collect(),
            step_logps: r.steps.iter().map(|s| s.logp[s.action]).collect(),
            masked: r.steps.iter().map(|s| s.mask.iter().filter(|m| !**m).count()).collect(),
            reward: None,
        }
    }

    pub fn sample(
        &self,
        constraints: &ConstraintSet,
        rng: &mut RngStream,
    ) -> Result<(UpdateRuleProgram, Trajectory), ControllerError> {
        let r = self.rollout(constraints, Choose::Sample(rng), None)?;
        let t = self.trajectory(&r);
        Ok((self.space.decode(&t.actions)?, t))
    }

    pub fn sample_batch(
        &self,
        batch_size: usize,
        constraints: &ConstraintSet,
        rng: &mut RngStream,
    ) -> Result<Vec<(UpdateRuleProgram, Trajectory)>, ControllerError> {
        (0..batch_size).map(|_| self.sample(constraints, rng)).collect()
    }

    /// Log-probability of an action sequence and the sum of per-step
    /// entropies along it.
    pub fn score(&self, actions: &[usize], constraints: &ConstraintSet) -> Result<(f64, f64), ControllerError> {
        let r = self.rollout(constraints, Choose::Given(actions), None)?;
        Ok((r.logp, r.entropy))
    }
}

/// Monte-Carlo estimate of the sequence entropy: the mean over `budget`
/// samples of the summed per-step entropies.
pub fn entropy(
    policy: &ControllerPolicy,
    constraints: &ConstraintSet,
    budget: usize,
    rng: &mut RngStream,
) -> Result<f64, ControllerError> {
    if budget == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for _ in 0..budget {
        total += policy.rollout(constraints, Choose::Sample(rng), None)?.entropy;
    }
    Ok(total / budget as f64)
}

/// Clipped surrogate plus entropy bonus (to be maximised) and its gradient
/// with respect to θ.
pub fn surrogate(
    policy: &ControllerPolicy,
    batch: &[Trajectory],
    advantages: &[f64],
    constraints: &ConstraintSet,
    cfg: &PpoConfig,
) -> Result<(f64, Vec<f64>), ControllerError> {
    if batch.is_empty() {
        return Err(ControllerError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut objective = 0.0;
    for (traj, &adv) in batch.iter().zip(advantages) {
        let r = policy.rollout(constraints, Choose::Given(&traj.actions), None)?;
        let ratio = (r.logp - traj.logp()).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let unclipped_term = ratio * adv;
        let clipped_term = clipped * adv;
        objective += scale * (unclipped_term.min(clipped_term) + cfg.entropy_coef * r.entropy);
        // The min selects the clipped branch only when it is strictly smaller;
        // the clipped branch has zero gradient.
        let w = if clipped_term < unclipped_term {
            0.0
        } else {
            scale * adv * ratio
        };
        let ent = scale * cfg.entropy_coef;
        let dlogits: Vec<Vec<f64>> = r
            .steps
            .iter()
            .map(|s| {
                let h: f64 = s
                    .probs
                    .iter()
                    .zip(&s.logp)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, l)| -p * l)
                    .sum();
                (0..s.probs.len())
                    .map(|i| {
                        if !s.mask[i] {
                            return 0.0;
                        }
                        let p = s.probs[i];
                        let onehot = if i == s.action { 1.0 } else { 0.0 };
                        let dh = if p > 0.0 { -p * (s.logp[i] + h) } else { 0.0 };
                        w * (onehot - p) + ent * dh
                    })
                    .collect()
            })
            .collect();
        policy.backward(&r.steps, &dlogits, &mut grad);
    }
    Ok((objective, grad))
}

/// Adam state of the policy optimizer plus the reward baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub baseline: Option<f64>,
    pub updates: u64,
}

impl PpoState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            ..Self::default()
        }
    }

    fn adam_ascent(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powf(self.t as f64);
        let c2 = 1.0 - B2.powf(self.t as f64);
        for i in 0..theta.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            theta[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub mean_reward: f64,
    /// Baseline after the update.
    pub baseline: f64,
    /// Surrogate objective before the first step.
    pub surrogate: f64,
    /// Mean summed per-step entropy along the batch, before the update.
    pub entropy: f64,
    /// Mean of `logp_old - logp_new` after the update.
    pub kl: f64,
}

/// PPO update on one batch. On a non-finite gradient θ, the optimizer state
/// and the baseline are left as they were.
pub fn ppo_update(
    policy: &mut ControllerPolicy,
    state: &mut PpoState,
    batch: &[Trajectory],
    constraints: &ConstraintSet,
    cfg: &PpoConfig,
) -> Result<UpdateStats, ControllerError> {
    if batch.is_empty() {
        return Err(ControllerError::EmptyBatch);
    }
    if state.m.len() != policy.num_params() {
        *state = PpoState {
            baseline: state.baseline,
            updates: state.updates,
            ..PpoState::new(policy.num_params())
        };
    }
    let rewards = batch
        .iter()
        .enumerate()
        .map(|(i, t)| t.reward.ok_or(ControllerError::MissingReward(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let baseline = state.baseline.unwrap_or(mean);
    let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();

    let saved_theta = policy.theta.clone();
    let saved_state = state.clone();
    let mut first = None;
    let mut entropy = 0.0;
    for _ in 0..cfg.epochs {
        let (obj, grad) = surrogate(policy, batch, &advantages, constraints, cfg)?;
        if first.is_none() {
            first = Some(obj);
            entropy = batch
                .iter()
                .map(|t| policy.score(&t.actions, constraints).map(|(_, h)| h))
                .sum::<Result<f64, _>>()?
                / batch.len() as f64;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            policy.theta = saved_theta;
            *state = saved_state;
            return Err(ControllerError::NonFiniteGradient);
        }
        if grad.iter().all(|g| *g == 0.0) {
            continue;
        }
        state.adam_ascent(&mut policy.theta, &grad, cfg.lr);
    }
    if policy.theta.iter().any(|x| !x.is_finite()) {
        policy.theta = saved_theta;
        *state = saved_state;
        return Err(ControllerError::NonFiniteGradient);
    }
    let mut kl = 0.0;
    for t in batch {
        kl += t.logp() - policy.score(&t.actions, constraints)?.0;
    }
    kl /= batch.len() as f64;
    let new_baseline = cfg.baseline_decay * baseline + (1.0 - cfg.baseline_decay) * mean;
    state.baseline = Some(new_baseline);
    state.updates += 1;
    Ok(UpdateStats {
        mean_reward: mean,
        baseline: new_baseline,
        surrogate: first.unwrap_or(0.0),
        entropy,
        kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyRecord {
    pub operands: Vec<String>,
    pub unaries: Vec<String>,
    pub binaries: Vec<String>,
    pub n_groups: usize,
}

/// Serialized policy and trainer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub policy: PolicyConfig,
    pub vocabulary: VocabularyRecord,
    pub theta: Vec<f64>,
    pub ppo: PpoState,
}

impl Checkpoint {
    pub fn capture(policy: &ControllerPolicy, state: &PpoState) -> Self {
        let s = &policy.space;
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            policy: policy.config.clone(),
            vocabulary: VocabularyRecord {
                operands: s.operands.iter().map(ToString::to_string).collect(),
                unaries: s.unaries.iter().map(ToString::to_string).collect(),
                binaries: s.binaries.iter().map(ToString::to_string).collect(),
                n_groups: s.n_groups,
            },
            theta: policy.theta.clone(),
            ppo: state.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ControllerError> {
        let cp: Checkpoint = serde_json::from_str(text).map_err(|e| ControllerError::Checkpoint(e.to_string()))?;
        if cp.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ControllerError::Checkpoint(format!(
                "unsupported format version {}",
                cp.format_version
            )));
        }
        Ok(cp)
    }

    /// Rebuilds the policy and trainer state, checking sizes and finiteness.
    pub fn restore(&self) -> Result<(ControllerPolicy, PpoState), ControllerError> {
        let bad = |m: String| ControllerError::Checkpoint(m);
        self.policy.validate()?;
        let parse = |s: &String| Token::parse(s).ok_or_else(|| bad(format!("unknown token `{s}`")));
        let mut operands = Vec::new();
        for s in &self.vocabulary.operands {
            match parse(s)? {
                Token::Operand(o) if !o.is_output() => operands.push(o),
                _ => return Err(bad(format!("`{s}` is not a base operand"))),
            }
        }
        let mut unaries = Vec::new();
        for s in &self.vocabulary.unaries {
            match parse(s)? {
                Token::Unary(u) => unaries.push(u),
                _ => return Err(bad(format!("`{s}` is not a unary function"))),
            }
        }
        let mut binaries = Vec::new();
        for s in &self.vocabulary.binaries {
            match parse(s)? {
                Token::Binary(b) => binaries.push(b),
                _ => return Err(bad(format!("`{s}` is not a binary function"))),
            }
        }
        let space = SearchSpace::from_vocab(operands, unaries, binaries, self.vocabulary.n_groups)?;
        if space.n_groups != self.policy.n_groups {
            return Err(bad("n_groups mismatch".into()));
        }
        let layout = Layout::new(&self.policy, &space);
        if self.theta.len() != layout.len {
            return Err(bad(format!(
                "expected {} parameters, found {}",
                layout.len,
                self.theta.len()
            )));
        }
        let n = layout.len;
        let ppo = &self.ppo;
        if (ppo.t > 0 || !ppo.m.is_empty()) && (ppo.m.len() != n || ppo.v.len() != n) {
            return Err(bad("optimizer state size mismatch".into()));
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !finite(&self.theta) || !finite(&ppo.m) || !finite(&ppo.v) || ppo.baseline.is_some_and(|b| !b.is_finite()) {
            return Err(bad("non-finite values".into()));
        }
        if ppo.v.iter().any(|x| *x < 0.0) {
            return Err(bad("negative second moment".into()));
        }
        let policy = ControllerPolicy {
            config: self.policy.clone(),
            space,
            layout,
            theta: self.theta.clone(),
        };
        Ok((policy, ppo.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(constraints: &ConstraintSet, n_groups: usize, hidden: usize) -> ControllerPolicy {
        let cfg = PolicyConfig {
            hidden,
            embed: 4,
            n_groups,
            ..PolicyConfig::default()
        };
        let space = SearchSpace::new(constraints, n_groups).unwrap();
        ControllerPolicy::new(cfg, space, &mut RngStream::new(1, "init")).unwrap()
    }

    fn toy() -> (ControllerPolicy, ConstraintSet) {
        let c = ConstraintSet::new(
            AllowList::Only(vec![Operand::Grad, Operand::FirstMoment, Operand::SignGrad]),
            AllowList::Only(vec![Unary::Identity, Unary::Exp, Unary::Sign]),
            AllowList::Only(vec![Binary::Add, Binary::Mul, Binary::Left]),
        )
        .unwrap()
        .with_distinct_operands(true);
        let cfg = PolicyConfig {
            hidden: 5,
            embed: 3,
            init_scale: 0.5,
            n_groups: 1,
        };
        let space = SearchSpace::new(&c, 1).unwrap();
        (
            ControllerPolicy::new(cfg, space, &mut RngStream::new(3, "toy")).unwrap(),
            c,
        )
    }

    #[test]
    fn vocabulary_grows_with_bank() {
        let c = ConstraintSet::search_space();
        let p = small(&c, 2, 8);
        let s = p.space();
        assert_eq!(s.vocab_size(0), 22);
        assert_eq!(s.vocab_size(5), 23);
        assert!(s.vocab(5).contains(&Token::Operand(Operand::Output(1))));
        assert!(!s.vocab(0).contains(&Token::Operand(Operand::Output(1))));
        let prefix: Vec<Token> = "sign_g sign_m id id mul"
            .split(' ')
            .map(|t| Token::parse(t).unwrap())
            .collect();
        let d = p.step_logits(&prefix, &c).unwrap();
        assert!(d.vocab.contains(&Token::Operand(Operand::Output(1))));
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn final_add_masked() {
        let c = ConstraintSet::search_space().with_no_final_add(true);
        let p = small(&c, 1, 8);
        let prefix: Vec<Token> = "g m id id".split(' ').map(|t| Token::parse(t).unwrap()).collect();
        let d = p.step_logits(&prefix, &c).unwrap();
        let add = d.vocab.iter().position(|t| *t == Token::Binary(Binary::Add)).unwrap();
        assert_eq!(d.probs[add], 0.0);
    }

    #[test]
    fn near_uniform_at_init() {
        let c = ConstraintSet::search_space();
        let p = small(&c, 2, 150);
        let mut rng = RngStream::new(5, "s");
        let (_, t) = p.sample(&c, &mut rng).unwrap();
        let mut prefix = Vec::new();
        for k in 0..10 {
            let d = p.step_logits(&prefix, &c).unwrap();
            let allowed: Vec<f64> = d.probs.iter().copied().filter(|x| *x > 0.0).collect();
            let max = allowed.iter().cloned().fold(0.0, f64::max);
            let min = allowed.iter().cloned().fold(1.0, f64::min);
            assert!(max / min < 1.5, "step {k}: {}", max / min);
            prefix.push(Token::parse(&t.tokens[k]).unwrap());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_recorded() {
        let c = ConstraintSet::search_space().with_distinct_operands(true);
        let p = small(&c, 2, 16);
        let a = p.sample_batch(5, &c, &mut RngStream::new(9, "s")).unwrap();
        let b = p.sample_batch(5, &c, &mut RngStream::new(9, "s")).unwrap();
        assert_eq!(a, b);
        for (prog, t) in &a {
            assert_eq!(t.actions.len(), 10);
            assert_eq!(prog.len(), 2);
            assert!(prog.validate(&c).is_valid());
            let (logp, _) = p.score(&t.actions, &c).unwrap();
            assert_eq!(logp, t.logp());
            assert_eq!(p.space().encode(prog).unwrap(), t.actions);
        }
    }

    #[test]
    fn empty_support_reported() {
        let c = ConstraintSet::new(AllowList::Only(vec![Operand::Grad]), AllowList::All, AllowList::All)
            .unwrap()
            .with_distinct_operands(true);
        let p = small(&c, 1, 4);
        let err = p.sample(&c, &mut RngStream::new(0, "s")).unwrap_err();
        assert_eq!(err, ControllerError::EmptySupport { step: 1 });
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let (mut p, c) = toy();
        let cfg = PpoConfig {
            entropy_coef: 0.3,
            ..PpoConfig::default()
        };
        let mut rng = RngStream::new(4, "s");
        let batch: Vec<Trajectory> = p
            .sample_batch(4, &c, &mut rng)
            .unwrap()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let adv = [0.7, -0.4, 0.2, -1.1];
        // move θ away from the sampling point so ratios differ from 1
        let theta: Vec<f64> = p.theta().iter().map(|x| x + 0.05 * rng.standard_normal()).collect();
        p.set_theta(theta.clone());
        let (_, g) = surrogate(&p, &batch, &adv, &c, &cfg).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += h;
            b[i] -= h;
            p.set_theta(a);
            let fa = surrogate(&p, &batch, &adv, &c, &cfg).unwrap().0;
            p.set_theta(b);
            let fb = surrogate(&p, &batch, &adv, &c, &cfg).unwrap().0;
            let fd = (fa - fb) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-7);
            worst = worst.max((fd - g[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn fresh_policy_ratio_is_one() {
        let (p, c) = toy();
        let (_, t) = p.sample(&c, &mut RngStream::new(0, "s")).unwrap();
        let (logp, _) = p.score(&t.actions, &c).unwrap();
        assert_eq!((logp - t.logp()).exp(), 1.0);
    }

    #[test]
    fn zero_advantage_without_entropy_keeps_theta() {
        let (mut p, c) = toy();
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            lr: 0.01,
            ..PpoConfig::default()
        };
        let mut batch: Vec<Trajectory> = p
            .sample_batch(5, &c, &mut RngStream::new(1, "s"))
            .unwrap()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        batch.iter_mut().for_each(|t| t.reward = Some(0.5));
        let mut state = PpoState::new(p.num_params());
        state.baseline = Some(0.5);
        let before = p.theta().to_vec();
        ppo_update(&mut p, &mut state, &batch, &c, &cfg).unwrap();
        assert_eq!(p.theta(), &before[..]);
        assert_eq!(state.baseline, Some(0.5));
    }

    #[test]
    fn positive_advantage_raises_token_logps() {
        let (mut p, c) = toy();
        let cfg = PpoConfig {
            entropy_coef: 0.0,
            lr: 0.01,
            epochs: 1,
            ..PpoConfig::default()
        };
        let (_, mut t) = p.sample(&c, &mut RngStream::new(2, "s")).unwrap();
        t.reward = Some(1.0);
        let mut state = PpoState::new(p.num_params());
        state.baseline = Some(0.0);
        ppo_update(&mut p, &mut state, std::slice::from_ref(&t), &c, &cfg).unwrap();
        let r = p.rollout(&c, Choose::Given(&t.actions), None).unwrap();
        for (k, s) in r.steps.iter().enumerate() {
            assert!(s.logp[s.action] >= t.step_logps[k], "step {k}");
        }
        assert!((state.baseline.unwrap() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut p, c) = toy();
        let (_, mut t) = p.sample(&c, &mut RngStream::new(2, "s")).unwrap();
        t.reward = Some(f64::INFINITY);
        let mut state = PpoState::new(p.num_params());
        state.baseline = Some(0.0);
        let before = p.theta().to_vec();
        let err = ppo_update(&mut p, &mut state, &[t], &c, &PpoConfig::default()).unwrap_err();
        assert_eq!(err, ControllerError::NonFiniteGradient);
        assert_eq!(p.theta(), &before[..]);
        assert_eq!(state, {
            let mut s = PpoState::new(p.num_params());
            s.baseline = Some(0.0);
            s
        });
    }

    #[test]
    fn zero_init_samples_uniformly() {
        let c = ConstraintSet::search_space();
        let cfg = PolicyConfig {
            hidden: 4,
            embed: 2,
            init_scale: 0.0,
            n_groups: 1,
        };
        let space = SearchSpace::new(&c, 1).unwrap();
        let k = space.vocab_size(0);
        let p = ControllerPolicy::new(cfg, space, &mut RngStream::new(0, "i")).unwrap();
        let n = 44_000;
        let mut counts = vec![0usize; k];
        let mut rng = RngStream::new(1, "freq");
        for _ in 0..n {
            let (_, t) = p.sample(&c, &mut rng).unwrap();
            counts[t.actions[0]] += 1;
        }
        let q = 1.0 / k as f64;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        for (i, &got) in counts.iter().enumerate() {
            let z = (got as f64 - n as f64 * q) / sigma;
            assert!(z.abs() < 4.0, "token {i}: {got} draws, z = {z:.2}");
        }
    }

    #[test]
    fn uniform_entropy_closed_form() {
        let c = ConstraintSet::search_space();
        let cfg = PolicyConfig {
            hidden: 4,
            embed: 2,
            init_scale: 0.0,
            n_groups: 2,
        };
        let space = SearchSpace::new(&c, 2).unwrap();
        let expected: f64 = (0..10).map(|k| (space.vocab_size(k) as f64).ln()).sum();
        let p = ControllerPolicy::new(cfg, space, &mut RngStream::new(0, "i")).unwrap();
        let h = entropy(&p, &c, 20, &mut RngStream::new(0, "e")).unwrap();
        assert!((h - expected).abs() < 1e-9);
    }

    #[test]
    fn deterministic_policy_has_zero_entropy() {
        let (mut p, c) = toy();
        let mut theta = vec![0.0; p.num_params()];
        // large bias on the first allowed token of every head
        for k in 0..5 {
            theta[p.layout.head_b[k].start] = 800.0;
            theta[p.layout.head_b[k].start + 1] = if k == 1 { 800.0 } else { 0.0 };
        }
        p.set_theta(theta);
        let h = entropy(&p, &c, 10, &mut RngStream::new(0, "e")).unwrap();
        assert!(h < 1e-12, "{h}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let (p, _) = toy();
        let mut state = PpoState::new(p.num_params());
        state.baseline = Some(0.25);
        state.m[0] = 0.1 + 0.2;
        let json = Checkpoint::capture(&p, &state).to_json();
        let (q, s) = Checkpoint::from_json(&json).unwrap().restore().unwrap();
        assert_eq!(p, q);
        assert_eq!(state, s);
        let mut bad = Checkpoint::from_json(&json).unwrap();
        bad.format_version = 99;
        assert!(Checkpoint::from_json(&bad.to_json()).is_err());
        let mut short = Checkpoint::from_json(&json).unwrap();
        short.theta.pop();
        assert!(short.restore().is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
