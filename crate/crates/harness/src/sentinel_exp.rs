//! Admission experiment: clients arrive at a fixed mean rate and each
//! admitted session holds its slot for a random time.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use lotls_core::sentinel::{Decision, SentinelConfig, SentinelError, SentinelState, SentinelTallies};
use lotls_core::SimTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::metrics::{mean, std_dev};
use crate::scenario::{ArrivalProcess, HoldTimeModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentinelExperiment {
    /// Clients per second. Zero means a single client with no contention.
    pub rate: f64,
    pub clients: usize,
    pub runs: usize,
    pub seed: u64,
    pub process: ArrivalProcess,
    pub hold: HoldTimeModel,
    pub sentinel: SentinelConfig,
}

impl SentinelExperiment {
    pub fn new(rate: f64) -> Self {
        SentinelExperiment {
            rate,
            clients: 20,
            runs: 10,
            seed: 1,
            process: ArrivalProcess::Poisson,
            hold: HoldTimeModel::default(),
            sentinel: SentinelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std_dev: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        MeanStd { mean: mean(values), std_dev: std_dev(values) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rate: f64,
    pub runs: Vec<SentinelTallies>,
    pub admitted: MeanStd,
    pub rejected_concurrency: MeanStd,
    pub rejected_rate: MeanStd,
}

fn arrival_times(exp: &SentinelExperiment, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if !(exp.rate > 0.0) {
        return vec![0.0; exp.clients.min(1)];
    }
    match exp.process {
        ArrivalProcess::Deterministic => (0..exp.clients).map(|i| i as f64 / exp.rate).collect(),
        ArrivalProcess::Poisson => {
            let gap = Exp::new(exp.rate).expect("rate is positive");
            let mut t = 0.0;
            (0..exp.clients)
                .map(|_| {
                    t += gap.sample(rng);
                    t
                })
                .collect()
        }
    }
}

/// One seeded run. Sessions that end at or before an arrival free their
/// slot before that arrival is judged. Rejected clients do not retry.
pub fn run_once(exp: &SentinelExperiment, seed: u64) -> Result<SentinelTallies, SentinelError> {
    exp.sentinel.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hold = Normal::new(exp.hold.mean, exp.hold.std_dev.max(0.0)).expect("hold spread is finite");
    let mut state = SentinelState::new(exp.sentinel, SimTime::ZERO)?;
    let mut ends: BinaryHeap<Reverse<SimTime>> = BinaryHeap::new();
    for t in arrival_times(exp, &mut rng) {
        let now = SimTime::from_secs_f64(t);
        while ends.peek().is_some_and(|Reverse(end)| *end <= now) {
            ends.pop();
            state.release()?;
        }
        if state.admit(now) == Decision::Admitted {
            let held = hold.sample(&mut rng).clamp(exp.hold.min, exp.hold.max);
            ends.push(Reverse(SimTime::from_secs_f64(t + held)));
        }
    }
    Ok(state.tallies())
}

/// Runs `exp.runs` seeded repetitions and summarises them.
pub fn sentinel_experiment(exp: &SentinelExperiment) -> Result<ExperimentResult, SentinelError> {
    let runs = (0..exp.runs as u64)
        .map(|i| run_once(exp, exp.seed.wrapping_mul(1_000_003).wrapping_add(i)))
        .collect::<Result<Vec<_>, _>>()?;
    let column = |f: fn(&SentinelTallies) -> u64| runs.iter().map(|t| f(t) as f64).collect::<Vec<_>>();
    Ok(ExperimentResult {
        rate: exp.rate,
        admitted: MeanStd::of(&column(|t| t.admitted)),
        rejected_concurrency: MeanStd::of(&column(|t| t.rejected_concurrency)),
        rejected_rate: MeanStd::of(&column(|t| t.rejected_rate)),
        runs,
    })
}
