//! Admission control for new sessions: a cap on concurrent sessions plus a
//! continuously refilled token bucket.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SentinelError {
    #[error("refill time {now} is before the last refill at {last}")]
    ClockWentBackwards { now: SimTime, last: SimTime },
    #[error("release with no active session")]
    Underflow,
    #[error("invalid sentinel config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SentinelConfig {
    /// Most sessions allowed at once.
    pub n_max: u32,
    /// Bucket capacity in tokens.
    pub t_max: f64,
    /// Refill rate in tokens per second.
    pub rho: f64,
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig { n_max: 1, t_max: 1.0, rho: 1.0 / 15.0 }
    }
}

impl SentinelConfig {
    pub fn validate(&self) -> Result<(), SentinelError> {
        if self.n_max < 1 {
            return Err(SentinelError::InvalidConfig("n_max must be at least 1"));
        }
        if !(self.t_max >= 1.0) || !self.t_max.is_finite() {
            return Err(SentinelError::InvalidConfig("t_max must be a finite number >= 1"));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(SentinelError::InvalidConfig("rho must be a positive finite number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Admitted,
    RejectedConcurrency,
    RejectedRate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentinelTallies {
    pub admitted: u64,
    pub rejected_concurrency: u64,
    pub rejected_rate: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentinelState {
    config: SentinelConfig,
    n_active: u32,
    tokens: f64,
    last_refill: SimTime,
    tallies: SentinelTallies,
}

impl SentinelState {
    /// Starts with a full bucket and no active sessions.
    pub fn new(config: SentinelConfig, now: SimTime) -> Result<Self, SentinelError> {
        config.validate()?;
        Ok(Self::with_state(config, 0, config.t_max, now))
    }

    /// A state with explicit counters; `tokens` is clamped to `[0, t_max]`
    /// and `n_active` to `n_max`.
    pub fn with_state(config: SentinelConfig, n_active: u32, tokens: f64, now: SimTime) -> Self {
        SentinelState {
            config,
            n_active: n_active.min(config.n_max),
            tokens: tokens.clamp(0.0, config.t_max),
            last_refill: now,
            tallies: SentinelTallies::default(),
        }
    }

    pub fn config(&self) -> &SentinelConfig {
        &self.config
    }

    pub fn n_active(&self) -> u32 {
        self.n_active
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    pub fn last_refill(&self) -> SimTime {
        self.last_refill
    }

    pub fn tallies(&self) -> SentinelTallies {
        self.tallies
    }

    pub fn refill(&mut self, now: SimTime) -> Result<(), SentinelError> {
        if now < self.last_refill {
            return Err(SentinelError::ClockWentBackwards { now, last: self.last_refill });
        }
        let elapsed = (now - self.last_refill).as_secs_f64();
        self.tokens = (self.tokens + self.config.rho * elapsed).min(self.config.t_max);
        self.last_refill = now;
        Ok(())
    }

    /// Refills, then admits iff a session slot is free and a whole token is
    /// available. The concurrency cap is checked first. A `now` earlier than
    /// the last refill is treated as no elapsed time.
    pub fn admit(&mut self, now: SimTime) -> Decision {
        self.refill(now.max(self.last_refill)).expect("refill time is not before the last refill");
        if self.n_active >= self.config.n_max {
            self.tallies.rejected_concurrency += 1;
            Decision::RejectedConcurrency
        } else if self.tokens < 1.0 {
            self.tallies.rejected_rate += 1;
            Decision::RejectedRate
        } else {
            self.tokens -= 1.0;
            self.n_active += 1;
            self.tallies.admitted += 1;
            Decision::Admitted
        }
    }

    pub fn release(&mut self) -> Result<(), SentinelError> {
        self.n_active = self.n_active.checked_sub(1).ok_or(SentinelError::Underflow)?;
        Ok(())
    }
}
