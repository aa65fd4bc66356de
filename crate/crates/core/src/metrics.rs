//! Convergence diagnostics and communication / computation counters.
//!
//! `psi = ||G||^2 + L_est^2 * C` where `G` stacks the proximal gradient
//! mapping of every `x_i` against the averaged x-gradient, the averaged
//! y-gradient, every plane's slack and every ordered neighbor difference,
//! and `C` is the consensus error.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::{primal_grads, AgentState, HyperParams, LocalPoint};
use crate::error::Result;
use crate::network::MixingMatrix;
use crate::problem::{BilevelProblem, ProblemDims};
use crate::vecops;

pub const CSV_HEADER: &str =
    "t,psi,gap_sq,consensus,upper_loss,lower_loss,task_metric,active_count,avg_cuts,comm_bits_cum,flops_cum,virtual_time";

/// One CSV row. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub t: usize,
    pub psi: f64,
    pub gap_sq: f64,
    pub consensus: f64,
    pub upper_loss: f64,
    pub lower_loss: f64,
    pub task_metric: f64,
    pub active_count: usize,
    pub avg_cuts: f64,
    pub comm_bits_cum: f64,
    pub flops_cum: f64,
    pub virtual_time: f64,
}

/// `(a - prox(a - eta b, eta)) / eta`; `b` itself when `eta <= 0`.
pub fn prox_grad_mapping(a: &[f64], b: &[f64], eta: f64, prox: impl Fn(&[f64], f64) -> Vec<f64>) -> Vec<f64> {
    if !(eta > 0.0) {
        return b.to_vec();
    }
    let mut arg = a.to_vec();
    vecops::axpy(-eta, b, &mut arg);
    let p = prox(&arg, eta);
    a.iter().zip(&p).map(|(u, v)| (u - v) / eta).collect()
}

/// `sum_i ||x_i - mean x||^2 + ||y_i - mean y||^2`.
pub fn consensus_error(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let spread = |rows: &[Vec<f64>]| {
        if rows.is_empty() {
            return 0.0;
        }
        let mean = vecops::mean(rows);
        rows.iter().map(|r| vecops::dist_sq(r, &mean)).sum::<f64>()
    };
    spread(xs) + spread(ys)
}

/// Squared norms of the four blocks of the stationary gap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct GapBlocks {
    pub mapping_x: f64,
    pub grad_y: f64,
    pub slack: f64,
    pub pairs: f64,
}

impl GapBlocks {
    pub fn total(&self) -> f64 {
        self.mapping_x + self.grad_y + self.slack + self.pairs
    }
}

/// Squared norm of the stationary gap of the unregularized Lagrangian at base
/// steps `eta_x`, `eta_lambda`.
pub fn stationary_gap(problem: &dyn BilevelProblem, agents: &[AgentState], w: &MixingMatrix, eta_x: f64, eta_lambda: f64) -> Result<f64> {
    Ok(gap_blocks(problem, agents, w, eta_x, eta_lambda)?.total())
}

/// Multiplier block of the gap: the projected-ascent mapping
/// `(max(0, lambda + eta s) - lambda) / eta`, which equals the slack `s`
/// unless the projection onto `lambda >= 0` is active.
pub fn dual_mapping(lambda: f64, slack: f64, eta: f64) -> f64 {
    ((lambda + eta * slack).max(0.0) - lambda) / eta
}

pub fn gap_blocks(
    problem: &dyn BilevelProblem,
    agents: &[AgentState],
    w: &MixingMatrix,
    eta_x: f64,
    eta_lambda: f64,
) -> Result<GapBlocks> {
    let n_agents = agents.len();
    if n_agents == 0 {
        return Ok(GapBlocks::default());
    }
    let xs: Vec<Vec<f64>> = agents.iter().map(|a| a.x.clone()).collect();
    let ys: Vec<Vec<f64>> = agents.iter().map(|a| a.y.clone()).collect();
    let mut gx_sum = vec![0.0; xs[0].len()];
    let mut gy_sum = vec![0.0; ys[0].len()];
    let mut slack_sq = 0.0;
    let mut pair_sq = 0.0;
    for (i, a) in agents.iter().enumerate() {
        let neighbors: Vec<usize> = w.neighbors(i).filter(|&j| j != i).collect();
        let point = LocalPoint {
            agent: i,
            xs: &xs,
            ys: &ys,
            planes: &a.polytope.planes,
            lambda: &a.lambda,
            theta: &a.theta,
            neighbors: &neighbors,
        };
        let (gx, gy) = primal_grads(problem, &point);
        vecops::axpy(1.0, &gx, &mut gx_sum);
        vecops::axpy(1.0, &gy, &mut gy_sum);
        for (pl, &lam) in a.polytope.planes.iter().zip(&a.lambda) {
            let s = pl.slack(|j| xs.get(j).map(Vec::as_slice), |j| ys.get(j).map(Vec::as_slice))?;
            slack_sq += dual_mapping(lam, s, eta_lambda).powi(2);
        }
        for &j in &neighbors {
            pair_sq += vecops::dist_sq(&xs[i], &xs[j]);
        }
    }
    let inv = 1.0 / n_agents as f64;
    let gx_bar = vecops::scaled(inv, &gx_sum);
    let gy_bar = vecops::scaled(inv, &gy_sum);
    let mapping_sq: f64 = xs
        .iter()
        .map(|x| vecops::norm_sq(&prox_grad_mapping(x, &gx_bar, eta_x, |v, s| problem.upper_prox(v, s))))
        .sum();
    Ok(GapBlocks {
        mapping_x: mapping_sq,
        grad_y: vecops::norm_sq(&gy_bar),
        slack: slack_sq,
        pairs: pair_sq,
    })
}

/// Cumulative bits on the wire and floating-point operations.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostCounters {
    pub comm_bits_cum: f64,
    pub flops_cum: f64,
    /// Share of `comm_bits_cum` from periodic cut refreshes.
    pub cut_bits_cum: f64,
    pub cut_flops_cum: f64,
    pub cut_epochs: usize,
    pub d_trace: Vec<f64>,
}

/// Per-iteration bits: `32 d (N (m + n) + sum_i p_i (|P_i| + n d))`.
pub fn iteration_bits(d: f64, dims: ProblemDims, probs: &[f64], cuts: &[usize]) -> f64 {
    let n_agents = dims.agents as f64;
    let per_agent: f64 = probs.iter().zip(cuts).map(|(p, &c)| p * (c as f64 + dims.n as f64 * d)).sum();
    32.0 * d * (n_agents * (dims.m + dims.n) as f64 + per_agent)
}

/// Bits of one cut refresh: `32 N d (K (m + m d) + d (n + m) + 1)`.
pub fn cut_epoch_bits(d: f64, dims: ProblemDims, rounds: usize) -> f64 {
    let (n, m) = (dims.n as f64, dims.m as f64);
    32.0 * dims.agents as f64 * d * (rounds as f64 * (m + m * d) + d * (n + m) + 1.0)
}

/// Per-iteration FLOPs: `sum_i |P_i|^2 d (n + m) + N d^2 n`.
pub fn iteration_flops(d: f64, dims: ProblemDims, cuts: &[usize]) -> f64 {
    let (n, m) = (dims.n as f64, dims.m as f64);
    let planes: f64 = cuts.iter().map(|&c| (c * c) as f64 * d * (n + m)).sum();
    planes + dims.agents as f64 * d * d * n
}

/// FLOPs of one cut refresh: `N d (n + m) + N m K`.
pub fn cut_epoch_flops(d: f64, dims: ProblemDims, rounds: usize) -> f64 {
    let (n, m, agents) = (dims.n as f64, dims.m as f64, dims.agents as f64);
    agents * d * (n + m) + agents * m * rounds as f64
}

impl CostCounters {
    pub fn update(&mut self, d: f64, dims: ProblemDims, probs: &[f64], cuts: &[usize], rounds: usize, cut_epoch: bool) {
        self.d_trace.push(d);
        self.comm_bits_cum += iteration_bits(d, dims, probs, cuts);
        self.flops_cum += iteration_flops(d, dims, cuts);
        if cut_epoch {
            let bits = cut_epoch_bits(d, dims, rounds);
            let flops = cut_epoch_flops(d, dims, rounds);
            self.comm_bits_cum += bits;
            self.cut_bits_cum += bits;
            self.flops_cum += flops;
            self.cut_flops_cum += flops;
            self.cut_epochs += 1;
        }
    }
}

/// Metrics of the state after iteration `t`.
#[allow(clippy::too_many_arguments)]
pub fn record(
    problem: &dyn BilevelProblem,
    agents: &[AgentState],
    w: &MixingMatrix,
    hp: &HyperParams,
    t: usize,
    active_count: usize,
    counters: &CostCounters,
    virtual_time: f64,
) -> Result<MetricsRecord> {
    let xs: Vec<Vec<f64>> = agents.iter().map(|a| a.x.clone()).collect();
    let ys: Vec<Vec<f64>> = agents.iter().map(|a| a.y.clone()).collect();
    let gap_sq = stationary_gap(problem, agents, w, hp.eta_x, hp.eta_lambda)?;
    let consensus = consensus_error(&xs, &ys);
    let upper_loss = (0..agents.len())
        .map(|i| problem.upper_value(i, &xs[i], &ys[i]) + problem.upper_reg(&xs[i]))
        .sum();
    let lower_loss = (0..agents.len())
        .map(|i| problem.lower_value(i, &xs[i], &ys[i]) + problem.lower_reg(&ys[i]))
        .sum();
    let avg_cuts = if agents.is_empty() {
        0.0
    } else {
        agents.iter().map(|a| a.polytope.len()).sum::<usize>() as f64 / agents.len() as f64
    };
    Ok(MetricsRecord {
        t,
        psi: gap_sq + hp.l_est * hp.l_est * consensus,
        gap_sq,
        consensus,
        upper_loss,
        lower_loss,
        task_metric: problem.task_metric(&xs, &ys),
        active_count,
        avg_cuts,
        comm_bits_cum: counters.comm_bits_cum,
        flops_cum: counters.flops_cum,
        virtual_time,
    })
}

/// Streams records to a CSV sink, header first.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(CSV_HEADER.split(','))?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        self.inner.serialize(rec)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_trace<W: Write>(sink: W, trace: &[MetricsRecord]) -> Result<()> {
    let mut w = TraceWriter::new(sink)?;
    for r in trace {
        w.write(r)?;
    }
    w.flush()
}
