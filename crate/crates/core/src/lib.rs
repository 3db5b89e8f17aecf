//! Search for optimizer update rules.
//!
//! The pieces, bottom-up:
//!
//! - [`dsl`]: the update-rule language and its constraints.
//! - [`runtime`]: element-wise semantics of operands and functions.
//! - [`engine`]: runs programs and native optimizers (SGD, Momentum,
//!   RMSProp, Adam, PowerSign, AddSign) against per-parameter state.
//! - [`schedule`]: learning-rate schedules.
//! - [`tasks`]: small training problems used to score candidates.
//! - [`controller`]: autoregressive LSTM policy trained with PPO.
//! - [`harness`]: worker queue, learning-rate sweep protocol, search loop.
//! - [`bench`]: side-by-side optimizer comparisons.

pub mod bench;
pub mod controller;
pub mod dsl;
pub mod engine;
pub mod harness;
pub mod rng;
pub mod runtime;
pub mod schedule;
pub mod tasks;
