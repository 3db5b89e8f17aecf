//! Learning-rate schedules, including linear cosine and noisy linear cosine
//! decay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::runtime::{decay_value, noise_std, DecaySpec, NoiseKind, RuntimeConfig};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unknown schedule `{0}`")]
pub struct UnknownSchedule(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScheduleKind {
    Constant,
    /// Multiply by `factor` at each milestone (fractions of the horizon).
    Stepwise {
        milestones: Vec<f64>,
        factor: f64,
    },
    /// `cd` (cosine decay without restarts)
    Cosine,
    /// `ld * cd`
    LinearCosine,
    /// `(ld + eps_t) * cd + 0.001`
    NoisyLinearCosine,
    /// `rd<n>`
    Restart(f64),
}

impl ScheduleKind {
    pub fn stepwise() -> Self {
        ScheduleKind::Stepwise {
            milestones: vec![0.5, 0.75],
            factor: 0.1,
        }
    }

    /// Multiplier applied to the base learning rate at step `t` of `horizon`.
    /// Only the noisy schedule draws from `rng`.
    pub fn multiplier(&self, t: u64, horizon: u64, rng: &mut RngStream, config: &RuntimeConfig) -> f64 {
        let horizon = horizon.max(1);
        let decay = |spec| decay_value(spec, t, horizon).expect("horizon is positive");
        match self {
            ScheduleKind::Constant => 1.0,
            ScheduleKind::Stepwise { milestones, factor } => {
                let frac = t.min(horizon) as f64 / horizon as f64;
                let passed = milestones.iter().filter(|m| frac >= **m).count();
                factor.powi(passed as i32)
            }
            ScheduleKind::Cosine => decay(DecaySpec::COSINE),
            ScheduleKind::LinearCosine => decay(DecaySpec::Linear) * decay(DecaySpec::COSINE),
            ScheduleKind::NoisyLinearCosine => {
                let eps = noise_std(NoiseKind::AnnealedEps, t, config.noise) * rng.standard_normal();
                (decay(DecaySpec::Linear) + eps) * decay(DecaySpec::COSINE) + 0.001
            }
            ScheduleKind::Restart(n) => decay(DecaySpec::Restart(*n)),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Constant => f.write_str("constant"),
            ScheduleKind::Stepwise { .. } => f.write_str("stepwise"),
            ScheduleKind::Cosine => f.write_str("cosine"),
            ScheduleKind::LinearCosine => f.write_str("linear-cosine"),
            ScheduleKind::NoisyLinearCosine => f.write_str("noisy-linear-cosine"),
            ScheduleKind::Restart(n) => write!(f, "restart{n}"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = UnknownSchedule;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "constant" => ScheduleKind::Constant,
            "stepwise" => ScheduleKind::stepwise(),
            "cosine" => ScheduleKind::Cosine,
            "linear-cosine" => ScheduleKind::LinearCosine,
            "noisy-linear-cosine" => ScheduleKind::NoisyLinearCosine,
            _ => {
                let n = s
                    .strip_prefix("restart")
                    .filter(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()))
                    .and_then(|n| n.parse::<u32>().ok())
                    .filter(|n| *n >= 1)
                    .ok_or_else(|| UnknownSchedule(s.to_string()))?;
                ScheduleKind::Restart(f64::from(n))
            }
        })
    }
}

impl TryFrom<String> for ScheduleKind {
    type Error = UnknownSchedule;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ScheduleKind> for String {
    fn from(value: ScheduleKind) -> Self {
        value.to_string()
    }
}

/// A schedule kind with its base learning rate λ.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, base_lr: f64) -> Self {
        Self { kind, base_lr }
    }

    pub fn learning_rate(&self, t: u64, horizon: u64, rng: &mut RngStream, config: &RuntimeConfig) -> f64 {
        self.base_lr * self.kind.multiplier(t, horizon, rng, config)
    }
}

pub fn lr_multiplier(spec: &ScheduleSpec, t: u64, horizon: u64, rng: &mut RngStream, config: &RuntimeConfig) -> f64 {
    spec.kind.multiplier(t, horizon, rng, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mult(kind: &ScheduleKind, t: u64, horizon: u64) -> f64 {
        kind.multiplier(t, horizon, &mut RngStream::new(4, "lr"), &RuntimeConfig::default())
    }

    #[test]
    fn boundaries() {
        let horizon = 4000;
        assert_eq!(mult(&ScheduleKind::LinearCosine, 0, horizon), 1.0);
        assert_eq!(mult(&ScheduleKind::LinearCosine, horizon, horizon), 0.0);
        assert_eq!(mult(&ScheduleKind::Cosine, horizon / 2, horizon), 0.5);
        assert_eq!(mult(&ScheduleKind::Cosine, 0, horizon), 1.0);
        assert_eq!(mult(&ScheduleKind::Constant, 17, horizon), 1.0);
        for seed in 0..50 {
            let v = ScheduleKind::NoisyLinearCosine.multiplier(
                horizon,
                horizon,
                &mut RngStream::new(seed, "lr"),
                &RuntimeConfig::default(),
            );
            assert_eq!(v, 0.001);
        }
    }

    #[test]
    fn stepwise_drops_at_milestones() {
        let s = ScheduleKind::stepwise();
        assert_eq!(mult(&s, 0, 100), 1.0);
        assert_eq!(mult(&s, 49, 100), 1.0);
        assert!((mult(&s, 50, 100) - 0.1).abs() < 1e-15);
        assert!((mult(&s, 80, 100) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_negative_except_noisy() {
        for kind in [
            ScheduleKind::Constant,
            ScheduleKind::stepwise(),
            ScheduleKind::Cosine,
            ScheduleKind::LinearCosine,
            ScheduleKind::Restart(10.0),
        ] {
            for t in 0..=200 {
                assert!(mult(&kind, t, 200) >= 0.0);
            }
        }
    }

    #[test]
    fn noisy_mean_tracks_linear_cosine() {
        let horizon = 100;
        let t = 30;
        let mut rng = RngStream::new(8, "lr");
        let c = RuntimeConfig::default();
        let n = 200_000;
        let mean = (0..n)
            .map(|_| ScheduleKind::NoisyLinearCosine.multiplier(t, horizon, &mut rng, &c))
            .sum::<f64>()
            / n as f64;
        let expected = mult(&ScheduleKind::LinearCosine, t, horizon) + 0.001;
        assert!((mean - expected).abs() < 0.01, "{mean} vs {expected}");
    }

    #[test]
    fn identifiers() {
        for id in [
            "constant",
            "stepwise",
            "cosine",
            "linear-cosine",
            "noisy-linear-cosine",
            "restart10",
        ] {
            let k: ScheduleKind = id.parse().unwrap();
            assert_eq!(k.to_string(), id);
        }
        assert!("linear".parse::<ScheduleKind>().is_err());
        assert!("restart0".parse::<ScheduleKind>().is_err());
        let spec = ScheduleSpec::new(ScheduleKind::Cosine, 0.1);
        assert_eq!(
            spec.learning_rate(0, 10, &mut RngStream::new(0, "x"), &RuntimeConfig::default()),
            0.1
        );
    }
}
