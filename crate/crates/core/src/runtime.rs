//! Element-wise semantics of the language's functions, decay operands, and
//! noise sources.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Binary, Unary};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("non-finite value produced by {0}")]
    Overflow(String),
    #[error("horizon must be positive")]
    InvalidHorizon,
    #[error("invalid runtime config: {0}")]
    InvalidConfig(&'static str),
}

/// How the second parameter of `N(0, s)` in the noise operands is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    #[default]
    Variance,
    StdDev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    /// Division guard δ.
    pub delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub bias_correction: bool,
    /// Floor inside `log(|x| + guard)`.
    pub log_guard: f64,
    pub noise: NoiseConvention,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            delta: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            beta3: 0.999,
            bias_correction: true,
            log_guard: 1e-12,
            noise: NoiseConvention::Variance,
        }
    }
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(RuntimeError::InvalidConfig("delta must be positive"));
        }
        if !(self.log_guard > 0.0 && self.log_guard.is_finite()) {
            return Err(RuntimeError::InvalidConfig("log_guard must be positive"));
        }
        for beta in [self.beta1, self.beta2, self.beta3] {
            if !(beta > 0.0 && beta < 1.0) {
                return Err(RuntimeError::InvalidConfig("betas must lie in (0, 1)"));
            }
        }
        Ok(())
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

fn clip(x: f64, bound: f64) -> f64 {
    x.max(-bound).min(bound)
}

fn check_finite(values: Vec<f64>, what: &dyn std::fmt::Display) -> Result<Vec<f64>, RuntimeError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(values)
    } else {
        Err(RuntimeError::Overflow(what.to_string()))
    }
}

/// Applies a unary function element-wise. `drop*` zeroes each element
/// independently with its probability and does not rescale survivors.
pub fn apply_unary(
    func: Unary,
    x: &[f64],
    rng: &mut RngStream,
    config: &RuntimeConfig,
) -> Result<Vec<f64>, RuntimeError> {
    let drop = |p: f64, rng: &mut RngStream| -> Vec<f64> {
        x.iter().map(|&v| if rng.uniform() < p { 0.0 } else { v }).collect()
    };
    let out: Vec<f64> = match func {
        Unary::Identity => x.to_vec(),
        Unary::Neg => x.iter().map(|v| -v).collect(),
        Unary::Exp => x.iter().map(|v| v.exp()).collect(),
        Unary::Log => x.iter().map(|v| (v.abs() + config.log_guard).ln()).collect(),
        Unary::Sqrt => x.iter().map(|v| v.abs().sqrt()).collect(),
        Unary::Clip5 => x.iter().map(|&v| clip(v, 1e-5)).collect(),
        Unary::Clip4 => x.iter().map(|&v| clip(v, 1e-4)).collect(),
        Unary::Clip3 => x.iter().map(|&v| clip(v, 1e-3)).collect(),
        Unary::Drop1 => drop(0.1, rng),
        Unary::Drop3 => drop(0.3, rng),
        Unary::Drop5 => drop(0.5, rng),
        Unary::Sign => x.iter().map(|&v| sign(v)).collect(),
        Unary::Sigmoid => x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
    };
    check_finite(out, &func)
}

/// `sign(x)·|x|^y`, with `|x|` floored at δ for non-positive exponents.
pub fn signed_pow(x: f64, y: f64, delta: f64) -> f64 {
    let base = if y > 0.0 { x.abs() } else { x.abs().max(delta) };
    sign(x) * base.powf(y)
}

pub fn apply_binary(func: Binary, x: &[f64], y: &[f64], config: &RuntimeConfig) -> Result<Vec<f64>, RuntimeError> {
    assert_eq!(x.len(), y.len(), "binary operands must have equal length");
    let zip = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect() };
    let out = match func {
        Binary::Add => zip(&|a, b| a + b),
        Binary::Sub => zip(&|a, b| a - b),
        Binary::Mul => zip(&|a, b| a * b),
        Binary::Div => zip(&|a, b| a / (b + config.delta)),
        Binary::Pow => zip(&|a, b| signed_pow(a, b, config.delta)),
        Binary::Left => x.to_vec(),
    };
    check_finite(out, &func)
}

/// Decay schedules available to the language and as internal decays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "n", rename_all = "snake_case")]
pub enum DecaySpec {
    /// Constant value in [0, 1]; `Constant(1.0)` is "no decay".
    Constant(f64),
    /// `1 - t/T`
    Linear,
    /// `0.5 (1 + cos(2π n t/T))`
    Cyclical(f64),
    /// `0.5 (1 + cos(π ((t n) mod T) / T))`
    Restart(f64),
}

impl DecaySpec {
    pub const NONE: DecaySpec = DecaySpec::Constant(1.0);
    /// Cosine decay without restarts.
    pub const COSINE: DecaySpec = DecaySpec::Cyclical(0.5);

    pub fn is_valid(&self) -> bool {
        match *self {
            DecaySpec::Constant(c) => (0.0..=1.0).contains(&c),
            DecaySpec::Linear => true,
            DecaySpec::Cyclical(n) | DecaySpec::Restart(n) => n.is_finite() && n > 0.0,
        }
    }
}

/// Value of a decay at step `t` of `horizon`. Steps past the horizon are
/// clamped to it.
pub fn decay_value(spec: DecaySpec, t: u64, horizon: u64) -> Result<f64, RuntimeError> {
    if horizon == 0 {
        return Err(RuntimeError::InvalidHorizon);
    }
    let t = t.min(horizon) as f64;
    let horizon = horizon as f64;
    let value = match spec {
        DecaySpec::Constant(c) => c,
        DecaySpec::Linear => 1.0 - t / horizon,
        DecaySpec::Cyclical(n) => 0.5 * (1.0 + (2.0 * PI * n * (t / horizon)).cos()),
        DecaySpec::Restart(n) => 0.5 * (1.0 + (PI * ((t * n) % horizon) / horizon).cos()),
    };
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// `N(0, 0.01)`
    Eps,
    /// `N(0, 1/(1+t)^0.55)`
    AnnealedEps,
}

pub fn noise_std(kind: NoiseKind, t: u64, convention: NoiseConvention) -> f64 {
    let param = match kind {
        NoiseKind::Eps => 0.01,
        NoiseKind::AnnealedEps => (1.0 + t as f64).powf(-0.55),
    };
    match convention {
        NoiseConvention::Variance => param.sqrt(),
        NoiseConvention::StdDev => param,
    }
}

pub fn sample_noise(kind: NoiseKind, t: u64, len: usize, rng: &mut RngStream, config: &RuntimeConfig) -> Vec<f64> {
    let std = noise_std(kind, t, config.noise);
    (0..len).map(|_| std * rng.standard_normal()).collect()
}
