//! Executes update rules: language programs and the native named optimizers.
//!
//! Every step first folds the current gradient into the running averages
//! (`observe`), then evaluates the rule. The caller applies `w <- w - lr * u`.

use std::f64::consts::E;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Binary, Group, Operand, StateRequirements, StateSlot, Unary, UpdateRuleProgram};
use crate::rng::RngStream;
use crate::runtime::{
    apply_binary, apply_unary, decay_value, sample_noise, DecaySpec, NoiseKind, RuntimeConfig, RuntimeError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("optimizer state has no `{}` slot", .0.name())]
    MissingState(StateSlot),
    #[error("{0} cannot be written as a program")]
    NotExpressible(String),
    #[error("unknown optimizer `{0}`")]
    UnknownOptimizer(String),
    #[error("invalid optimizer spec: {0}")]
    InvalidSpec(String),
    #[error("gradient has {got} entries, state expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

impl EngineError {
    pub fn is_overflow(&self) -> bool {
        matches!(self, EngineError::Runtime(RuntimeError::Overflow(_)))
    }
}

/// Per-parameter optimizer state. Only slots named in the requirements are
/// allocated.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    requirements: StateRequirements,
    len: usize,
    m: Option<Vec<f64>>,
    v: Option<Vec<f64>>,
    gamma: Option<Vec<f64>>,
    momentum: Option<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(requirements: StateRequirements, len: usize) -> Self {
        let alloc = |slot| requirements.contains(slot).then(|| vec![0.0; len]);
        Self {
            m: alloc(StateSlot::FirstMoment),
            v: alloc(StateSlot::SecondMoment),
            gamma: alloc(StateSlot::ThirdMoment),
            momentum: alloc(StateSlot::Momentum),
            requirements,
            len,
            step: 0,
        }
    }

    pub fn requirements(&self) -> &StateRequirements {
        &self.requirements
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of parameter-sized vectors currently allocated.
    pub fn allocated_vectors(&self) -> usize {
        [&self.m, &self.v, &self.gamma, &self.momentum]
            .iter()
            .filter(|s| s.is_some())
            .count()
    }

    /// Advances the step counter and folds `g` into every allocated average.
    pub fn observe(&mut self, g: &[f64], config: &RuntimeConfig) -> Result<(), EngineError> {
        if g.len() != self.len {
            return Err(EngineError::LengthMismatch {
                expected: self.len,
                got: g.len(),
            });
        }
        self.step += 1;
        let ema = |slot: &mut Option<Vec<f64>>, beta: f64, power: i32| {
            if let Some(avg) = slot {
                for (a, &x) in avg.iter_mut().zip(g) {
                    *a = beta * *a + (1.0 - beta) * x.powi(power);
                }
            }
        };
        ema(&mut self.m, config.beta1, 1);
        ema(&mut self.v, config.beta2, 2);
        ema(&mut self.gamma, config.beta3, 3);
        Ok(())
    }

    fn corrected(
        &self,
        slot: &Option<Vec<f64>>,
        which: StateSlot,
        beta: f64,
        config: &RuntimeConfig,
    ) -> Result<Vec<f64>, EngineError> {
        let raw = slot.as_ref().ok_or(EngineError::MissingState(which))?;
        if !config.bias_correction || self.step == 0 {
            return Ok(raw.clone());
        }
        let correction = 1.0 - beta.powf(self.step as f64);
        Ok(raw.iter().map(|x| x / correction).collect())
    }

    /// Raw (uncorrected) first moment.
    pub fn first_moment(&self) -> Option<&[f64]> {
        self.m.as_deref()
    }

    pub fn m_hat(&self, config: &RuntimeConfig) -> Result<Vec<f64>, EngineError> {
        self.corrected(&self.m, StateSlot::FirstMoment, config.beta1, config)
    }

    pub fn v_hat(&self, config: &RuntimeConfig) -> Result<Vec<f64>, EngineError> {
        self.corrected(&self.v, StateSlot::SecondMoment, config.beta2, config)
    }

    pub fn gamma_hat(&self, config: &RuntimeConfig) -> Result<Vec<f64>, EngineError> {
        self.corrected(&self.gamma, StateSlot::ThirdMoment, config.beta3, config)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn adam_direction(m_hat: &[f64], v_hat: &[f64], delta: f64) -> Vec<f64> {
    m_hat
        .iter()
        .zip(v_hat)
        .map(|(m, v)| m / (v.abs().sqrt() + delta))
        .collect()
}

/// Inputs shared by program and native evaluation for one step.
pub struct StepContext<'a> {
    pub g: &'a [f64],
    pub w: &'a [f64],
    pub horizon: u64,
    pub config: &'a RuntimeConfig,
}

fn operand_value(
    op: Operand,
    state: &OptimizerState,
    ctx: &StepContext<'_>,
    bank: &[Vec<f64>],
    rng: &mut RngStream,
) -> Result<Vec<f64>, EngineError> {
    let g = ctx.g;
    let n = g.len();
    let config = ctx.config;
    let t = state.step();
    let broadcast = |x: f64| vec![x; n];
    let value = match op {
        Operand::Grad => g.to_vec(),
        Operand::GradSquared => g.iter().map(|x| x * x).collect(),
        Operand::GradCubed => g.iter().map(|x| x * x * x).collect(),
        Operand::FirstMoment => state.m_hat(config)?,
        Operand::SecondMoment => state.v_hat(config)?,
        Operand::ThirdMoment => state.gamma_hat(config)?,
        Operand::SignGrad => g.iter().map(|&x| sign(x)).collect(),
        Operand::SignMoment => state.m_hat(config)?.into_iter().map(sign).collect(),
        Operand::One => broadcast(1.0),
        Operand::Two => broadcast(2.0),
        Operand::Noise => sample_noise(NoiseKind::Eps, t, n, rng, config),
        Operand::ScaledWeight(k) => {
            let scale = 10f64.powi(-i32::from(k));
            ctx.w.iter().map(|x| scale * x).collect()
        }
        Operand::Adam => adam_direction(&state.m_hat(config)?, &state.v_hat(config)?, config.delta),
        Operand::RmsProp => adam_direction(g, &state.v_hat(config)?, config.delta),
        Operand::LinearDecay => broadcast(decay_value(DecaySpec::Linear, t, ctx.horizon)?),
        Operand::CyclicalDecay(k) => broadcast(decay_value(DecaySpec::Cyclical(k), t, ctx.horizon)?),
        Operand::RestartDecay(k) => broadcast(decay_value(DecaySpec::Restart(f64::from(k)), t, ctx.horizon)?),
        Operand::AnnealedNoise => sample_noise(NoiseKind::AnnealedEps, t, n, rng, config),
        Operand::Output(k) => bank[k - 1].clone(),
    };
    if value.iter().all(|x| x.is_finite()) {
        Ok(value)
    } else {
        Err(RuntimeError::Overflow(format!("operand {op}")).into())
    }
}

/// Evaluates every group in order and returns the operand bank of group
/// outputs; the last entry is the update.
pub fn evaluate_program(
    program: &UpdateRuleProgram,
    state: &OptimizerState,
    ctx: &StepContext<'_>,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>, EngineError> {
    let mut bank: Vec<Vec<f64>> = Vec::with_capacity(program.len());
    for group in program.groups() {
        let a = operand_value(group.op1, state, ctx, &bank, rng)?;
        let b = operand_value(group.op2, state, ctx, &bank, rng)?;
        let a = apply_unary(group.u1, &a, rng, ctx.config)?;
        let b = apply_unary(group.u2, &b, rng, ctx.config)?;
        bank.push(apply_binary(group.binary, &a, &b, ctx.config)?);
    }
    Ok(bank)
}

/// Update `u` of a program for a state that has already observed `ctx.g`.
pub fn program_delta(
    program: &UpdateRuleProgram,
    state: &OptimizerState,
    ctx: &StepContext<'_>,
    rng: &mut RngStream,
) -> Result<Vec<f64>, EngineError> {
    let mut bank = evaluate_program(program, state, ctx, rng)?;
    Ok(bank.pop().expect("programs have at least one group"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerFamily {
    Sgd,
    Momentum,
    RmsProp,
    Adam,
    PowerSign,
    AddSign,
}

/// A native optimizer. `alpha` and `internal_decay` only matter for the
/// PowerSign and AddSign families, `momentum` only for Momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedOptimizerSpec {
    pub family: OptimizerFamily,
    pub alpha: f64,
    pub internal_decay: DecaySpec,
    pub momentum: f64,
}

impl NamedOptimizerSpec {
    fn of(family: OptimizerFamily, alpha: f64) -> Self {
        Self {
            family,
            alpha,
            internal_decay: DecaySpec::NONE,
            momentum: 0.9,
        }
    }

    pub fn sgd() -> Self {
        Self::of(OptimizerFamily::Sgd, 1.0)
    }

    pub fn momentum() -> Self {
        Self::of(OptimizerFamily::Momentum, 1.0)
    }

    pub fn rmsprop() -> Self {
        Self::of(OptimizerFamily::RmsProp, 1.0)
    }

    pub fn adam() -> Self {
        Self::of(OptimizerFamily::Adam, 1.0)
    }

    /// `e^{sign(g) sign(m)} g`
    pub fn power_sign() -> Self {
        Self::of(OptimizerFamily::PowerSign, E)
    }

    /// `(1 + sign(g) sign(m)) g`
    pub fn add_sign() -> Self {
        Self::of(OptimizerFamily::AddSign, 1.0)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_decay(mut self, decay: DecaySpec) -> Self {
        self.internal_decay = decay;
        self
    }

    pub fn is_sign_family(&self) -> bool {
        matches!(self.family, OptimizerFamily::PowerSign | OptimizerFamily::AddSign)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.is_sign_family() {
            if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                return Err(EngineError::InvalidSpec("alpha must be positive".into()));
            }
            if !self.internal_decay.is_valid() {
                return Err(EngineError::InvalidSpec("internal decay out of range".into()));
            }
        }
        if self.family == OptimizerFamily::Momentum && !(0.0..1.0).contains(&self.momentum) {
            return Err(EngineError::InvalidSpec("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn required_state(&self) -> StateRequirements {
        use StateSlot::*;
        match self.family {
            OptimizerFamily::Sgd => StateRequirements::default(),
            OptimizerFamily::Momentum => StateRequirements::from_slots([Momentum]),
            OptimizerFamily::RmsProp => StateRequirements::from_slots([SecondMoment, Step]),
            OptimizerFamily::Adam => StateRequirements::from_slots([FirstMoment, SecondMoment, Step]),
            OptimizerFamily::PowerSign | OptimizerFamily::AddSign => StateRequirements::from_slots([FirstMoment, Step]),
        }
    }

    /// Update for a state that has already observed `ctx.g`. Momentum
    /// advances its accumulator here.
    pub fn delta(&self, state: &mut OptimizerState, ctx: &StepContext<'_>) -> Result<Vec<f64>, EngineError> {
        let g = ctx.g;
        let config = ctx.config;
        let out = match self.family {
            OptimizerFamily::Sgd => g.to_vec(),
            OptimizerFamily::Momentum => {
                let mu = self.momentum;
                let buf = state
                    .momentum
                    .as_mut()
                    .ok_or(EngineError::MissingState(StateSlot::Momentum))?;
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b = mu * *b + x;
                }
                buf.clone()
            }
            OptimizerFamily::RmsProp => adam_direction(g, &state.v_hat(config)?, config.delta),
            OptimizerFamily::Adam => adam_direction(&state.m_hat(config)?, &state.v_hat(config)?, config.delta),
            OptimizerFamily::PowerSign | OptimizerFamily::AddSign => {
                let f = decay_value(self.internal_decay, state.step(), ctx.horizon)?;
                let m_hat = state.m_hat(config)?;
                let alpha = self.alpha;
                let power = self.family == OptimizerFamily::PowerSign;
                g.iter()
                    .zip(&m_hat)
                    .map(|(&gi, &mi)| {
                        let agreement = f * (sign(gi) * sign(mi));
                        let scale = if !power {
                            alpha + agreement
                        } else if alpha == E {
                            agreement.exp()
                        } else {
                            alpha.powf(agreement)
                        };
                        scale * gi
                    })
                    .collect()
            }
        };
        if out.iter().all(|x| x.is_finite()) {
            Ok(out)
        } else {
            Err(RuntimeError::Overflow(self.to_string()).into())
        }
    }

    /// The same rule written in the update language.
    pub fn as_program(&self) -> Result<UpdateRuleProgram, EngineError> {
        use Binary::*;
        use Unary::Identity as Id;
        let not_expressible = || EngineError::NotExpressible(self.to_string());
        let group = Group::new;
        let groups = match self.family {
            OptimizerFamily::Sgd => vec![group(Operand::Grad, Operand::Grad, Id, Id, Left)],
            OptimizerFamily::RmsProp => vec![group(Operand::Grad, Operand::SecondMoment, Id, Unary::Sqrt, Div)],
            OptimizerFamily::Adam => vec![group(Operand::FirstMoment, Operand::SecondMoment, Id, Unary::Sqrt, Div)],
            OptimizerFamily::Momentum => return Err(not_expressible()),
            OptimizerFamily::PowerSign | OptimizerFamily::AddSign => {
                let decay = match self.internal_decay {
                    DecaySpec::Constant(1.0) => None,
                    DecaySpec::Constant(0.0) => {
                        // f = 0 reduces both families to plain SGD
                        if self.family == OptimizerFamily::AddSign && self.alpha != 1.0 {
                            return Err(not_expressible());
                        }
                        return Ok(
                            UpdateRuleProgram::new(vec![group(Operand::Grad, Operand::Grad, Id, Id, Left)])
                                .expect("valid program"),
                        );
                    }
                    DecaySpec::Constant(_) => return Err(not_expressible()),
                    DecaySpec::Linear => Some(Operand::LinearDecay),
                    DecaySpec::Cyclical(n) => Some(Operand::CyclicalDecay(n)),
                    DecaySpec::Restart(n) if n.fract() == 0.0 && n >= 1.0 && n <= u32::MAX as f64 => {
                        Some(Operand::RestartDecay(n as u32))
                    }
                    DecaySpec::Restart(_) => return Err(not_expressible()),
                };
                let mut groups = vec![group(Operand::SignGrad, Operand::SignMoment, Id, Id, Mul)];
                if let Some(d) = decay {
                    groups.push(group(d, Operand::Output(1), Id, Id, Mul));
                }
                let agreement = Operand::Output(groups.len());
                if self.family == OptimizerFamily::PowerSign {
                    if self.alpha == E {
                        groups.push(group(agreement, Operand::Grad, Unary::Exp, Id, Mul));
                    } else if self.alpha == 2.0 {
                        groups.push(group(Operand::Two, agreement, Id, Id, Pow));
                        groups.push(group(Operand::Output(groups.len()), Operand::Grad, Id, Id, Mul));
                    } else {
                        return Err(not_expressible());
                    }
                } else {
                    let base = if self.alpha == 1.0 {
                        Operand::One
                    } else if self.alpha == 2.0 {
                        Operand::Two
                    } else {
                        return Err(not_expressible());
                    };
                    groups.push(group(base, agreement, Id, Id, Add));
                    groups.push(group(Operand::Output(groups.len()), Operand::Grad, Id, Id, Mul));
                }
                groups
            }
        };
        UpdateRuleProgram::new(groups).map_err(|_| not_expressible())
    }
}

impl fmt::Display for NamedOptimizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.family {
            OptimizerFamily::Sgd => return f.write_str("sgd"),
            OptimizerFamily::Momentum => return f.write_str("momentum"),
            OptimizerFamily::RmsProp => return f.write_str("rmsprop"),
            OptimizerFamily::Adam => return f.write_str("adam"),
            OptimizerFamily::PowerSign => "powersign",
            OptimizerFamily::AddSign => "addsign",
        };
        f.write_str(base)?;
        let default_alpha = if self.family == OptimizerFamily::PowerSign {
            E
        } else {
            1.0
        };
        match self.internal_decay {
            DecaySpec::Constant(1.0) => {}
            DecaySpec::Constant(c) => write!(f, "-const{c}")?,
            DecaySpec::Linear => f.write_str("-ld")?,
            DecaySpec::Cyclical(0.5) => f.write_str("-cd")?,
            DecaySpec::Cyclical(n) => write!(f, "-cd{n}")?,
            DecaySpec::Restart(n) => write!(f, "-rd{n}")?,
        }
        if self.alpha != default_alpha {
            write!(f, "@{}", self.alpha)?;
        }
        Ok(())
    }
}

/// Optimizer identifiers: `sgd`, `momentum`, `rmsprop`, `adam`, and
/// `powersign` / `addsign` with an optional `-ld`, `-cd`, `-cd<n>`, `-rd<n>`
/// or `-const<c>` internal decay and an optional `@<alpha>` base.
impl FromStr for NamedOptimizerSpec {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || EngineError::UnknownOptimizer(s.to_string());
        let (body, alpha) = match s.split_once('@') {
            Some((body, alpha)) => (body, Some(parse_positive(alpha).ok_or_else(unknown)?)),
            None => (s, None),
        };
        let (name, decay) = match body.split_once('-') {
            Some((name, decay)) => (name, Some(decay)),
            None => (body, None),
        };
        let mut spec = match name {
            "sgd" => Self::sgd(),
            "momentum" => Self::momentum(),
            "rmsprop" => Self::rmsprop(),
            "adam" => Self::adam(),
            "powersign" => Self::power_sign(),
            "addsign" => Self::add_sign(),
            _ => return Err(unknown()),
        };
        if !spec.is_sign_family() && (decay.is_some() || alpha.is_some()) {
            return Err(unknown());
        }
        if let Some(decay) = decay {
            spec.internal_decay = parse_decay(decay).ok_or_else(unknown)?;
        }
        if let Some(alpha) = alpha {
            spec.alpha = alpha;
        }
        spec.validate().map_err(|_| unknown())?;
        Ok(spec)
    }
}

fn parse_positive(s: &str) -> Option<f64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit() || b == b'.') {
        return None;
    }
    let x: f64 = s.parse().ok()?;
    (x.is_finite() && x > 0.0).then_some(x)
}

/// Internal decay names: `ld`, `cd`, `cd<n>`, `rd<n>`, `const<c>`, `zero`, `none`.
pub fn parse_decay(s: &str) -> Option<DecaySpec> {
    match s {
        "ld" => Some(DecaySpec::Linear),
        "cd" => Some(DecaySpec::COSINE),
        "none" => Some(DecaySpec::NONE),
        "zero" => Some(DecaySpec::Constant(0.0)),
        _ => {
            if let Some(n) = s.strip_prefix("cd") {
                parse_positive(n).map(DecaySpec::Cyclical)
            } else if let Some(n) = s.strip_prefix("rd") {
                let n = parse_positive(n)?;
                (n.fract() == 0.0).then_some(DecaySpec::Restart(n))
            } else if let Some(c) = s.strip_prefix("const") {
                if c.is_empty() || !c.bytes().all(|b| b.is_ascii_digit() || b == b'.') {
                    return None;
                }
                let c: f64 = c.parse().ok()?;
                (0.0..=1.0).contains(&c).then_some(DecaySpec::Constant(c))
            } else {
                None
            }
        }
    }
}

/// Either a language program or a native optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateRule {
    Program(UpdateRuleProgram),
    Named(NamedOptimizerSpec),
}

impl UpdateRule {
    /// Named identifiers win; anything else is read as a program.
    pub fn parse(s: &str) -> Result<Self, EngineError> {
        if let Ok(spec) = s.trim().parse::<NamedOptimizerSpec>() {
            return Ok(UpdateRule::Named(spec));
        }
        match s.parse::<UpdateRuleProgram>() {
            Ok(p) => Ok(UpdateRule::Program(p)),
            Err(_) => Err(EngineError::UnknownOptimizer(s.to_string())),
        }
    }

    pub fn required_state(&self) -> StateRequirements {
        match self {
            UpdateRule::Program(p) => p.required_state(),
            UpdateRule::Named(n) => n.required_state(),
        }
    }

    pub fn init_state(&self, len: usize) -> OptimizerState {
        OptimizerState::new(self.required_state(), len)
    }

    /// One full step: observe `g`, then compute the update.
    pub fn step(
        &self,
        state: &mut OptimizerState,
        ctx: &StepContext<'_>,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>, EngineError> {
        state.observe(ctx.g, ctx.config)?;
        match self {
            UpdateRule::Program(p) => program_delta(p, state, ctx, rng),
            UpdateRule::Named(n) => n.delta(state, ctx),
        }
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UpdateRule::Program(p) => p.fmt(f),
            UpdateRule::Named(n) => n.fmt(f),
        }
    }
}
