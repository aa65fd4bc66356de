//! Decentralized estimate of the lower-level solution `y*(x)`.
//!
//! Each of the `K` rounds takes a proximal gradient step on the linearized
//! augmented Lagrangian of the lower problem, starting from the gossip
//! average of the neighbors' iterates, and then an ascent step on the pairwise
//! consensus duals. The Taylor point of the linearization is the current
//! upper variable, so the linearized lower objective has exactly the
//! y-gradient of `g_i`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};
use crate::network::MixingMatrix;
use crate::problem::{BilevelProblem, BlockKind, VariableBlock};
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LowerLevelParams {
    /// Communication rounds `K`.
    pub rounds: usize,
    pub step_y: f64,
    pub step_dual: f64,
    /// Consensus penalty `mu`.
    pub penalty: f64,
}

impl LowerLevelParams {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(ArgusError::invalid("lower-level rounds K must be >= 1"));
        }
        if !(self.step_y > 0.0 && self.step_dual > 0.0) {
            return Err(ArgusError::invalid("lower-level step sizes must be positive"));
        }
        if !(self.penalty > 0.0) {
            return Err(ArgusError::invalid("lower-level penalty mu must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LowerLevelState {
    pub y_prime: Vec<Vec<f64>>,
    /// `phi[(i, j)]`, owned by agent `i`, one per ordered neighbor pair.
    pub phi: BTreeMap<(usize, usize), Vec<f64>>,
    /// Taylor point of each agent's linearization.
    pub anchor_x: Vec<Vec<f64>>,
    pub round: usize,
}

impl LowerLevelState {
    /// Round-0 state: `y' = y_init`, all duals zero on the edges of `w`.
    pub fn new(x: &VariableBlock, y_init: &VariableBlock, w: &MixingMatrix) -> Result<Self> {
        if x.kind() != BlockKind::Upper || y_init.kind() != BlockKind::Lower {
            return Err(ArgusError::invalid("expected an upper block for x and a lower block for y"));
        }
        let agents = w.agents();
        if x.rows().len() != agents || y_init.rows().len() != agents {
            return Err(ArgusError::invalid("block sizes do not match the mixing matrix"));
        }
        let m = y_init.row(0).len();
        let mut phi = BTreeMap::new();
        for i in 0..agents {
            for j in w.neighbors(i).filter(|&j| j != i) {
                phi.insert((i, j), vec![0.0; m]);
            }
        }
        Ok(Self {
            y_prime: y_init.rows().to_vec(),
            phi,
            anchor_x: x.rows().to_vec(),
            round: 0,
        })
    }
}

/// Gradient of the linearized augmented Lagrangian in `y'_i`:
/// `grad_y g_i + sum_j (phi_ij - phi_ji) + 2 mu sum_j (y'_i - y'_j)`.
pub fn lower_grad_y(
    problem: &dyn BilevelProblem,
    state: &LowerLevelState,
    w: &MixingMatrix,
    agent: usize,
    penalty: f64,
) -> Result<Vec<f64>> {
    let yi = &state.y_prime[agent];
    let mut grad = problem.lower_grad_y(agent, &state.anchor_x[agent], yi);
    for j in w.neighbors(agent).filter(|&j| j != agent) {
        let yj = state.y_prime.get(j).ok_or(ArgusError::Staleness { agent, peer: j })?;
        if let Some(p) = state.phi.get(&(agent, j)) {
            vecops::axpy(1.0, p, &mut grad);
        }
        if let Some(p) = state.phi.get(&(j, agent)) {
            vecops::axpy(-1.0, p, &mut grad);
        }
        for ((g, a), b) in grad.iter_mut().zip(yi).zip(yj) {
            *g += 2.0 * penalty * (a - b);
        }
    }
    Ok(grad)
}

/// Argument of the proximal map in the next round, per agent:
/// `sum_j W_ij y'_j - step_y * lower_grad_y`.
pub fn prox_arguments(
    problem: &dyn BilevelProblem,
    state: &LowerLevelState,
    w: &MixingMatrix,
    params: &LowerLevelParams,
) -> Result<Vec<Vec<f64>>> {
    let mixed = w.mix(&state.y_prime);
    (0..w.agents())
        .map(|i| {
            let g = lower_grad_y(problem, state, w, i, params.penalty)?;
            let mut v = mixed[i].clone();
            vecops::axpy(-params.step_y, &g, &mut v);
            Ok(v)
        })
        .collect()
}

/// One primal round followed by one dual round.
pub fn lower_round(
    problem: &dyn BilevelProblem,
    state: &mut LowerLevelState,
    w: &MixingMatrix,
    params: &LowerLevelParams,
) -> Result<()> {
    let args = prox_arguments(problem, state, w, params)?;
    let next: Vec<Vec<f64>> = args.iter().map(|v| problem.lower_prox(v, params.step_y)).collect();
    for (i, row) in next.iter().enumerate() {
        if !vecops::all_finite(row) {
            return Err(ArgusError::Divergence {
                iteration: state.round + 1,
                agent: Some(i),
                what: "lower-level estimate is not finite".into(),
            });
        }
    }
    state.y_prime = next;
    for (&(i, j), p) in state.phi.iter_mut() {
        for ((pk, a), b) in p.iter_mut().zip(&state.y_prime[i]).zip(&state.y_prime[j]) {
            *pk += params.step_dual * (a - b);
        }
    }
    state.round += 1;
    Ok(())
}

/// `K` rounds from `y' = y_init`, `phi = 0`; returns `y'^(K)` as `y*`.
pub fn estimate_lower_solution(
    problem: &dyn BilevelProblem,
    x: &VariableBlock,
    y_init: &VariableBlock,
    w: &MixingMatrix,
    params: &LowerLevelParams,
) -> Result<VariableBlock> {
    params.validate()?;
    let mut state = LowerLevelState::new(x, y_init, w)?;
    for _ in 0..params.rounds {
        lower_round(problem, &mut state, w, params)?;
    }
    VariableBlock::new(BlockKind::Lower, problem.dims(), state.y_prime)
}
