//! Asynchrony model: who is active each iteration, how their step sizes are
//! rescaled, and how long an iteration takes in simulated time.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Asynchronous: only the active set computes gradients.
    Argus,
    /// Synchronous: every agent is active every iteration.
    #[serde(rename = "argus-s")]
    ArgusS,
}

impl Mode {
    pub fn label(self) -> &'static str {
        match self {
            Mode::Argus => "argus",
            Mode::ArgusS => "argus-s",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = ArgusError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argus" => Ok(Mode::Argus),
            "argus-s" => Ok(Mode::ArgusS),
            other => Err(ArgusError::invalid(format!("unknown mode {other:?} (expected argus or argus-s)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub t: usize,
    members: Vec<usize>,
    mask: Vec<bool>,
}

impl ActiveSet {
    pub fn from_mask(t: usize, mask: Vec<bool>) -> Self {
        let members = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        Self { t, members, mask }
    }

    pub fn all(t: usize, agents: usize) -> Self {
        Self::from_mask(t, vec![true; agents])
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, agent: usize) -> bool {
        self.mask[agent]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Bernoulli activation with a hard staleness bound `tau`.
#[derive(Debug, Clone)]
pub struct ActivationSchedule {
    probs: Vec<f64>,
    tau: usize,
    miss_count: Vec<usize>,
}

impl ActivationSchedule {
    pub fn new(probs: Vec<f64>, tau: usize) -> Result<Self> {
        if tau == 0 {
            return Err(ArgusError::invalid("staleness bound tau must be >= 1"));
        }
        if probs.is_empty() {
            return Err(ArgusError::invalid("activation schedule needs at least one agent"));
        }
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(ArgusError::invalid(format!("activation probability {p} outside (0, 1]")));
        }
        let miss_count = vec![0; probs.len()];
        Ok(Self { probs, tau, miss_count })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn miss_count(&self) -> &[usize] {
        &self.miss_count
    }

    /// Independent Bernoulli(p_i) draws, one per agent substream, followed
    /// by staleness enforcement.
    pub fn draw_active_set(&mut self, t: usize, rngs: &mut [SimRng]) -> ActiveSet {
        let candidates = self
            .probs
            .iter()
            .zip(rngs.iter_mut())
            .map(|(&p, rng)| p >= 1.0 || rng.random::<f64>() < p)
            .collect();
        self.enforce(t, candidates)
    }

    /// Forces in every agent that has missed `tau - 1` consecutive
    /// iterations, falls back to the lowest index when nobody is left, and
    /// updates the miss counters.
    pub fn enforce(&mut self, t: usize, mut mask: Vec<bool>) -> ActiveSet {
        for (i, m) in mask.iter_mut().enumerate() {
            if self.miss_count[i] + 1 >= self.tau {
                *m = true;
            }
        }
        if !mask.iter().any(|m| *m) {
            mask[0] = true;
        }
        for (i, &m) in mask.iter().enumerate() {
            self.miss_count[i] = if m { 0 } else { self.miss_count[i] + 1 };
        }
        ActiveSet::from_mask(t, mask)
    }
}

/// Step size rescaled so that its expectation under activation probability
/// `p` equals `eta`.
pub fn effective_step(eta: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(ArgusError::invalid(format!("activation probability {p} outside (0, 1]")));
    }
    if !(eta > 0.0) {
        return Err(ArgusError::invalid(format!("base step {eta} must be positive")));
    }
    Ok(eta / p)
}

/// Duration of one iteration and the agents that finish within it.
///
/// Synchronous rounds wait for the slowest agent. Asynchronous rounds last
/// `round_length` and admit the agents whose delay fits.
pub fn simulate_round_time(delays: &[f64], mode: Mode, round_length: f64) -> Result<(f64, Vec<usize>)> {
    if let Some(d) = delays.iter().find(|d| !(**d > 0.0)) {
        return Err(ArgusError::invalid(format!("delay {d} is not positive")));
    }
    match mode {
        Mode::ArgusS => {
            let dur = delays.iter().copied().fold(0.0, f64::max);
            Ok((dur, (0..delays.len()).collect()))
        }
        Mode::Argus => {
            if !(round_length > 0.0) {
                return Err(ArgusError::invalid(format!("round length {round_length} must be positive")));
            }
            let eligible = delays
                .iter()
                .enumerate()
                .filter(|(_, d)| **d <= round_length)
                .map(|(i, _)| i)
                .collect();
            Ok((round_length, eligible))
        }
    }
}

/// Per-agent iteration delay: compute time plus communication time, each
/// uniformly jittered around its mean, with a random subset of stragglers
/// slowed by a multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub compute_mean: Vec<f64>,
    pub compute_jitter: f64,
    pub comm_mean: f64,
    pub comm_jitter: f64,
    pub stragglers_per_round: usize,
    pub straggler_multiplier: f64,
    pub round_length: f64,
}

impl DelayModel {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let agents = self.compute_mean.len();
        if self.compute_mean.iter().any(|m| !(*m > 0.0)) {
            errs.push("delay.compute_mean entries must be > 0".to_string());
        }
        if !(0.0..1.0).contains(&self.compute_jitter) {
            errs.push(format!("delay.compute_jitter must lie in [0, 1), got {}", self.compute_jitter));
        }
        if !(self.comm_mean >= 0.0) {
            errs.push(format!("delay.comm_mean must be >= 0, got {}", self.comm_mean));
        }
        if !(0.0..1.0).contains(&self.comm_jitter) {
            errs.push(format!("delay.comm_jitter must lie in [0, 1), got {}", self.comm_jitter));
        }
        if self.stragglers_per_round >= agents.max(1) {
            errs.push(format!(
                "stragglers_per_round ({}) must be below the agent count ({agents})",
                self.stragglers_per_round
            ));
        }
        if !(self.straggler_multiplier >= 1.0) {
            errs.push(format!("straggler_multiplier must be >= 1, got {}", self.straggler_multiplier));
        }
        if !(self.round_length > 0.0) {
            errs.push(format!("round_length must be > 0, got {}", self.round_length));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    fn jittered<R: Rng + ?Sized>(mean: f64, jitter: f64, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        mean * (1.0 - jitter + 2.0 * jitter * u)
    }

    /// One delay per agent for one iteration.
    pub fn sample(&self, agent_rngs: &mut [SimRng], straggler_rng: &mut SimRng) -> Vec<f64> {
        let agents = self.compute_mean.len();
        let mut delays: Vec<f64> = (0..agents)
            .map(|i| {
                let rng = &mut agent_rngs[i];
                Self::jittered(self.compute_mean[i], self.compute_jitter, rng)
                    + Self::jittered(self.comm_mean, self.comm_jitter, rng)
            })
            .collect();
        if self.stragglers_per_round > 0 {
            for s in sample(straggler_rng, agents, self.stragglers_per_round) {
                delays[s] *= self.straggler_multiplier;
            }
        }
        delays
    }

    /// Monte-Carlo estimate of `P(delay_i <= round_length)` per agent,
    /// floored at `1 / samples` so the estimate stays a valid probability.
    pub fn activation_probabilities(&self, samples: usize, agent_rngs: &mut [SimRng], straggler_rng: &mut SimRng) -> Vec<f64> {
        let agents = self.compute_mean.len();
        let mut hits = vec![0usize; agents];
        for _ in 0..samples {
            let d = self.sample(agent_rngs, straggler_rng);
            for (h, di) in hits.iter_mut().zip(&d) {
                if *di <= self.round_length {
                    *h += 1;
                }
            }
        }
        hits.iter()
            .map(|&h| (h.max(1) as f64 / samples as f64).min(1.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{per_agent, substream, Stream};

    #[test]
    fn full_probability_activates_everyone() {
        let mut s = ActivationSchedule::new(vec![1.0; 5], 3).unwrap();
        let mut rngs = per_agent(1, Stream::Activation, 5);
        for t in 0..20 {
            assert_eq!(s.draw_active_set(t, &mut rngs).len(), 5);
        }
    }

    #[test]
    fn forced_activation_after_tau_minus_one_misses() {
        let tau = 5;
        let mut s = ActivationSchedule::new(vec![0.5; 6], tau).unwrap();
        let mut mask = vec![true; 6];
        mask[3] = false;
        for t in 0..tau - 1 {
            let a = s.enforce(t, mask.clone());
            assert!(!a.contains(3));
        }
        assert_eq!(s.miss_count()[3], tau - 1);
        let a = s.enforce(tau - 1, mask.clone());
        assert!(a.contains(3));
        assert_eq!(s.miss_count()[3], 0);
    }

    #[test]
    fn empty_draw_falls_back_to_lowest_index() {
        let mut s = ActivationSchedule::new(vec![0.5; 4], 10).unwrap();
        let a = s.enforce(0, vec![false; 4]);
        assert_eq!(a.members(), &[0]);
    }

    #[test]
    fn invalid_schedules() {
        assert!(ActivationSchedule::new(vec![0.0], 2).is_err());
        assert!(ActivationSchedule::new(vec![1.5], 2).is_err());
        assert!(ActivationSchedule::new(vec![0.5], 0).is_err());
    }

    #[test]
    fn effective_step_examples() {
        assert!((effective_step(0.01, 0.5).unwrap() - 0.02).abs() < 1e-15);
        assert_eq!(effective_step(0.01, 1.0).unwrap(), 0.01);
        assert!(effective_step(0.01, 0.0).is_err());
    }

    #[test]
    fn round_time_examples() {
        let (d, e) = simulate_round_time(&[1.0, 2.0, 10.0], Mode::ArgusS, 3.0).unwrap();
        assert_eq!((d, e), (10.0, vec![0, 1, 2]));
        let (d, e) = simulate_round_time(&[1.0, 2.0, 10.0], Mode::Argus, 3.0).unwrap();
        assert_eq!((d, e), (3.0, vec![0, 1]));
        let (d, e) = simulate_round_time(&[2.5; 3], Mode::Argus, 2.5).unwrap();
        assert_eq!((d, e), (2.5, vec![0, 1, 2]));
        assert!(simulate_round_time(&[1.0], Mode::Argus, 0.0).is_err());
        assert!(simulate_round_time(&[0.0], Mode::ArgusS, 1.0).is_err());
    }

    #[test]
    fn stragglers_are_slowed() {
        let model = DelayModel {
            compute_mean: vec![1.0; 10],
            compute_jitter: 0.0,
            comm_mean: 0.0,
            comm_jitter: 0.0,
            stragglers_per_round: 2,
            straggler_multiplier: 10.0,
            round_length: 1.5,
        };
        model.validate().unwrap();
        let mut rngs = per_agent(3, Stream::Delay, 10);
        let mut srng = substream(3, Stream::Straggler, 0);
        let d = model.sample(&mut rngs, &mut srng);
        assert_eq!(d.iter().filter(|v| **v == 10.0).count(), 2);
        assert_eq!(d.iter().filter(|v| **v == 1.0).count(), 8);
        let p = model.activation_probabilities(5000, &mut rngs, &mut srng);
        for pi in p {
            assert!((pi - 0.8).abs() < 0.03, "{pi}");
        }
    }
}
