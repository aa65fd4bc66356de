//! The iteration loop: gossip mixing, asynchronous proximal primal steps on
//! stale gradients, regularized dual ascent and periodic cut refresh.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cuts::{build_cut, maintain_polytope, CutGradMode, CutPoint, CuttingPlane, Polytope, Sensitivity};
use crate::error::{ArgusError, Result};
use crate::lower_level::{estimate_lower_solution, prox_arguments, LowerLevelParams, LowerLevelState};
use crate::metrics::{self, CostCounters, MetricsRecord};
use crate::network::{metropolis_weights, sample_er_topology, MixingMatrix, Topology};
use crate::problem::{BilevelProblem, BlockKind, VariableBlock};
use crate::rng::{per_agent, substream, SimRng, Stream};
use crate::scheduler::{effective_step, ActivationSchedule, ActiveSet, DelayModel, Mode};
use crate::vecops;

/// Finite-difference step for `dy*/dx`.
pub const CUT_FD_STEP: f64 = 1e-6;

/// Monte-Carlo draws used to calibrate delay-driven activation probabilities.
pub const CALIBRATION_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub eta_x: f64,
    pub eta_y: f64,
    pub eta_lambda: f64,
    pub eta_theta: f64,
    pub eta_y_ll: f64,
    pub eta_phi: f64,
    pub mu: f64,
    pub lambda1: f64,
    pub epsilon: f64,
    pub iota: usize,
    #[serde(rename = "T1")]
    pub t1: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "L_est")]
    pub l_est: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta_x: 0.05,
            eta_y: 0.1,
            eta_lambda: 0.01,
            eta_theta: 0.05,
            eta_y_ll: 0.5,
            eta_phi: 0.05,
            mu: 0.1,
            lambda1: 0.5,
            epsilon: 1e-3,
            iota: 10,
            t1: 50,
            k: 1,
            m: 20,
            t: 500,
            l_est: 1.0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("eta_x", self.eta_x),
            ("eta_y", self.eta_y),
            ("eta_lambda", self.eta_lambda),
            ("eta_theta", self.eta_theta),
            ("eta_y_ll", self.eta_y_ll),
            ("eta_phi", self.eta_phi),
            ("mu", self.mu),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be a positive number, got {v}"));
            }
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            errs.push(format!("lambda1 must be >= 0, got {}", self.lambda1));
        }
        if !(self.l_est >= 0.0 && self.l_est.is_finite()) {
            errs.push(format!("L_est must be >= 0, got {}", self.l_est));
        }
        if self.iota == 0 {
            errs.push("iota: cut period must be >= 1".into());
        }
        if self.k == 0 {
            errs.push("K: lower-level rounds must be >= 1".into());
        }
        if self.m == 0 {
            errs.push("M: polytope cap must be >= 1".into());
        }
        if self.t1 > self.t {
            errs.push(format!("T1 ({}) must not exceed T ({})", self.t1, self.t));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn lower_params(&self) -> LowerLevelParams {
        LowerLevelParams {
            rounds: self.k,
            step_y: self.eta_y_ll,
            step_dual: self.eta_phi,
            penalty: self.mu,
        }
    }
}

/// How agents become active each iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationParams {
    /// Bernoulli probability per agent.
    pub p_active: Vec<f64>,
    pub tau: usize,
    /// Delay-driven eligibility; `None` means one time unit per iteration.
    pub delay: Option<DelayModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub mode: Mode,
    pub seed: u64,
    pub p_c: f64,
    pub static_topology: bool,
    pub activation: ActivationParams,
    pub hyper: HyperParams,
    pub cut_grad: CutGradMode,
    pub stop_tol: Option<f64>,
}

/// Arguments an agent's gradients were last evaluated at.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Multipliers by plane id.
    pub lambda: BTreeMap<u64, f64>,
    pub theta: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub polytope: Polytope,
    /// Aligned with `polytope.planes`.
    pub lambda: Vec<f64>,
    /// `theta[j]` multiplies `x_i - x_j`.
    pub theta: BTreeMap<usize, Vec<f64>>,
    pub t_hat: usize,
    pub snapshot: Snapshot,
    pub mixed_x: Vec<f64>,
    pub mixed_y: Vec<f64>,
}

impl AgentState {
    fn new(agent: usize, x: Vec<f64>, y: Vec<f64>, cap: usize) -> Self {
        let snapshot = Snapshot {
            x: x.clone(),
            y: y.clone(),
            lambda: BTreeMap::new(),
            theta: BTreeMap::new(),
        };
        Self {
            mixed_x: x.clone(),
            mixed_y: y.clone(),
            x,
            y,
            polytope: Polytope::new(agent, cap),
            lambda: Vec::new(),
            theta: BTreeMap::new(),
            t_hat: 0,
            snapshot,
        }
    }

    fn refresh_snapshot(&mut self, t: usize) {
        self.snapshot = Snapshot {
            x: self.x.clone(),
            y: self.y.clone(),
            lambda: self.polytope.planes.iter().map(|p| p.id).zip(self.lambda.iter().copied()).collect(),
            theta: self.theta.clone(),
        };
        self.t_hat = t;
    }

    /// Multipliers of the current planes as of the snapshot (0 for newer planes).
    pub fn snapshot_lambda(&self) -> Vec<f64> {
        self.polytope
            .planes
            .iter()
            .map(|p| self.snapshot.lambda.get(&p.id).copied().unwrap_or(0.0))
            .collect()
    }
}

/// `c1 = 1 / (eta_lambda sqrt(t+1))`, `c2 = 1 / (eta_theta sqrt(t+1))`.
pub fn regularization_coeffs(t: usize, eta_lambda: f64, eta_theta: f64) -> (f64, f64) {
    let s = ((t + 1) as f64).sqrt();
    (1.0 / (eta_lambda * s), 1.0 / (eta_theta * s))
}

/// `(sum_j W_ij x_j, sum_j W_ij y_j)` over the row's support.
pub fn mix_neighbors(agent: usize, w_row: &[f64], xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut d = vec![0.0; xs[agent].len()];
    let mut u = vec![0.0; ys[agent].len()];
    for (j, &wij) in w_row.iter().enumerate() {
        if wij == 0.0 {
            continue;
        }
        let (xj, yj) = match (xs.get(j), ys.get(j)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(ArgusError::Staleness { agent, peer: j }),
        };
        vecops::axpy(wij, xj, &mut d);
        vecops::axpy(wij, yj, &mut u);
    }
    Ok((d, u))
}

/// Per-agent Lagrangian pieces at an explicit point. `xs`/`ys` hold every
/// agent's values as seen by `agent`; its own entries are the evaluation
/// point for `x_i`, `y_i`.
#[derive(Debug, Clone, Copy)]
pub struct LocalPoint<'a> {
    pub agent: usize,
    pub xs: &'a [Vec<f64>],
    pub ys: &'a [Vec<f64>],
    pub planes: &'a [Arc<CuttingPlane>],
    pub lambda: &'a [f64],
    pub theta: &'a BTreeMap<usize, Vec<f64>>,
    /// Current neighbors, self excluded.
    pub neighbors: &'a [usize],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    pub theta: BTreeMap<usize, Vec<f64>>,
}

fn theta_of<'a>(theta: &'a BTreeMap<usize, Vec<f64>>, j: usize) -> Option<&'a Vec<f64>> {
    theta.get(&j)
}

fn plane_slacks(p: &LocalPoint<'_>) -> Result<Vec<f64>> {
    p.planes
        .iter()
        .map(|pl| pl.slack(|j| p.xs.get(j).map(Vec::as_slice), |j| p.ys.get(j).map(Vec::as_slice)))
        .collect()
}

/// Smooth primal partials of the local Lagrangian:
/// `g_x = grad_x G_i + sum_l lambda_l a_{i,l} + sum_j theta_ij`,
/// `g_y = grad_y G_i + sum_l lambda_l b_{i,l}`.
pub fn primal_grads(problem: &dyn BilevelProblem, p: &LocalPoint<'_>) -> (Vec<f64>, Vec<f64>) {
    let i = p.agent;
    let (xi, yi) = (&p.xs[i], &p.ys[i]);
    let mut gx = problem.upper_grad_x(i, xi, yi);
    let mut gy = problem.upper_grad_y(i, xi, yi);
    for (pl, &lam) in p.planes.iter().zip(p.lambda) {
        if lam == 0.0 {
            continue;
        }
        if let Some(a) = pl.a.get(&i) {
            vecops::axpy(lam, a, &mut gx);
        }
        if let Some(b) = pl.b.get(&i) {
            vecops::axpy(lam, b, &mut gy);
        }
    }
    for &j in p.neighbors {
        if let Some(th) = theta_of(p.theta, j) {
            vecops::axpy(1.0, th, &mut gx);
        }
    }
    (gx, gy)
}

/// All four partials of the regularized local Lagrangian
/// `G_i + sum_l lambda_l s_l + sum_j theta_ij^T (x_i - x_j)
///  - c1/2 ||lambda||^2 - c2/2 sum_j ||theta_ij||^2`.
pub fn local_lagrangian_grads(problem: &dyn BilevelProblem, p: &LocalPoint<'_>, c1: f64, c2: f64) -> Result<LocalGrads> {
    let (x, y) = primal_grads(problem, p);
    let slacks = plane_slacks(p)?;
    let lambda = slacks.iter().zip(p.lambda).map(|(s, l)| s - c1 * l).collect();
    let i = p.agent;
    let mut theta = BTreeMap::new();
    for &j in p.neighbors {
        let xj = p.xs.get(j).ok_or(ArgusError::Staleness { agent: i, peer: j })?;
        let mut g = vecops::sub(&p.xs[i], xj);
        if let Some(th) = theta_of(p.theta, j) {
            vecops::axpy(-c2, th, &mut g);
        }
        theta.insert(j, g);
    }
    Ok(LocalGrads { x, y, lambda, theta })
}

/// Scalar whose partials `local_lagrangian_grads` returns.
pub fn local_lagrangian_value(problem: &dyn BilevelProblem, p: &LocalPoint<'_>, c1: f64, c2: f64) -> Result<f64> {
    let i = p.agent;
    let mut v = problem.upper_value(i, &p.xs[i], &p.ys[i]);
    for (s, l) in plane_slacks(p)?.iter().zip(p.lambda) {
        v += l * s - 0.5 * c1 * l * l;
    }
    for &j in p.neighbors {
        let xj = p.xs.get(j).ok_or(ArgusError::Staleness { agent: i, peer: j })?;
        if let Some(th) = theta_of(p.theta, j) {
            v += vecops::dot(th, &vecops::sub(&p.xs[i], xj)) - 0.5 * c2 * vecops::norm_sq(th);
        }
    }
    Ok(v)
}

/// `x = prox_{step_x R}(d - step_x g_x)`, `y = u - step_y g_y`.
#[allow(clippy::too_many_arguments)]
pub fn primal_step(
    problem: &dyn BilevelProblem,
    t: usize,
    agent: usize,
    d: &[f64],
    u: &[f64],
    gx: &[f64],
    gy: &[f64],
    step_x: f64,
    step_y: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut vx = d.to_vec();
    vecops::axpy(-step_x, gx, &mut vx);
    let x = problem.upper_prox(&vx, step_x);
    let mut y = u.to_vec();
    vecops::axpy(-step_y, gy, &mut y);
    if !vecops::all_finite(&x) || !vecops::all_finite(&y) {
        return Err(ArgusError::Divergence {
            iteration: t,
            agent: Some(agent),
            what: "primal iterate is not finite".into(),
        });
    }
    Ok((x, y))
}

/// Projected ascent: `lambda = max(0, lambda + step g_lambda)`,
/// `theta_j += step g_theta_j`.
pub fn dual_step(
    lambda: &mut [f64],
    theta: &mut BTreeMap<usize, Vec<f64>>,
    grads: &LocalGrads,
    step_lambda: f64,
    step_theta: f64,
) {
    for (l, g) in lambda.iter_mut().zip(&grads.lambda) {
        *l = (*l + step_lambda * g).max(0.0);
    }
    for (j, g) in &grads.theta {
        let th = theta.entry(*j).or_insert_with(|| vec![0.0; g.len()]);
        vecops::axpy(step_theta, g, th);
    }
}

/// Activation bookkeeping for the staleness and step-equalization checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ActivityStats {
    pub iterations: usize,
    pub activations: Vec<usize>,
    pub max_gap: Vec<usize>,
    /// Probability used to rescale each agent's steps.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub mode: Mode,
    pub agents: Vec<AgentState>,
    pub trace: Vec<MetricsRecord>,
    pub counters: CostCounters,
    pub activity: ActivityStats,
    pub stopped_early: bool,
}

/// A run in progress; `step` advances one iteration.
pub struct Simulation {
    problem: Arc<dyn BilevelProblem>,
    cfg: EngineConfig,
    agents: Vec<AgentState>,
    topology: Topology,
    w: MixingMatrix,
    schedule: ActivationSchedule,
    step_probs: Vec<f64>,
    topo_rng: SimRng,
    act_rngs: Vec<SimRng>,
    delay_rngs: Vec<SimRng>,
    straggler_rng: SimRng,
    next_plane_id: u64,
    t: usize,
    virtual_time: f64,
    counters: CostCounters,
    trace: Vec<MetricsRecord>,
    activity: ActivityStats,
    last_active: Vec<usize>,
    stopped: bool,
}

impl Simulation {
    pub fn new(problem: Arc<dyn BilevelProblem>, cfg: EngineConfig) -> Result<Self> {
        cfg.hyper.validate().map_err(ArgusError::Config)?;
        let dims = problem.dims();
        let n_agents = dims.agents;
        if cfg.activation.p_active.len() != n_agents {
            return Err(ArgusError::Config(vec![format!(
                "p_active has {} entries for {} agents",
                cfg.activation.p_active.len(),
                n_agents
            )]));
        }
        if let Some(d) = &cfg.activation.delay {
            d.validate().map_err(ArgusError::Config)?;
            if d.compute_mean.len() != n_agents {
                return Err(ArgusError::Config(vec![format!(
                    "delay.compute_mean has {} entries for {} agents",
                    d.compute_mean.len(),
                    n_agents
                )]));
            }
        }
        if cfg.cut_grad == CutGradMode::Analytic {
            if cfg.hyper.k != 1 {
                return Err(ArgusError::Config(vec!["cut_grad \"analytic\" requires K = 1".into()]));
            }
            let (x0, y0) = problem.initial_point(0);
            if problem.lower_cross_jvp(0, &x0, &y0, &vec![0.0; dims.n]).is_none() {
                return Err(ArgusError::Config(vec![format!(
                    "problem {} has no mixed-derivative oracle; use cut_grad \"fd\"",
                    problem.name()
                )]));
            }
        }

        let mut topo_rng = substream(cfg.seed, Stream::Topology, 0);
        let topology = if n_agents == 1 {
            Topology::complete(1)
        } else {
            sample_er_topology(n_agents, cfg.p_c, 0, &mut topo_rng)?
        };
        let w = metropolis_weights(&topology)?;

        let mut calib_agents = per_agent(cfg.seed, Stream::Calibration, n_agents);
        let mut calib_straggler = substream(cfg.seed, Stream::Calibration, u64::MAX);
        let eligible_probs = match &cfg.activation.delay {
            Some(d) => d.activation_probabilities(CALIBRATION_SAMPLES, &mut calib_agents, &mut calib_straggler),
            None => vec![1.0; n_agents],
        };
        let step_probs: Vec<f64> = match cfg.mode {
            Mode::ArgusS => vec![1.0; n_agents],
            Mode::Argus => cfg.activation.p_active.iter().zip(&eligible_probs).map(|(a, b)| a * b).collect(),
        };
        let schedule = ActivationSchedule::new(cfg.activation.p_active.clone(), cfg.activation.tau)?;

        let agents: Vec<AgentState> = (0..n_agents)
            .map(|i| {
                let (x, y) = problem.initial_point(i);
                AgentState::new(i, x, y, cfg.hyper.m)
            })
            .collect();
        for (i, a) in agents.iter().enumerate() {
            if a.x.len() != dims.n || a.y.len() != dims.m {
                return Err(ArgusError::Consistency(format!("initial point of agent {i} has the wrong shape")));
            }
        }

        Ok(Self {
            act_rngs: per_agent(cfg.seed, Stream::Activation, n_agents),
            delay_rngs: per_agent(cfg.seed, Stream::Delay, n_agents),
            straggler_rng: substream(cfg.seed, Stream::Straggler, 0),
            activity: ActivityStats {
                iterations: 0,
                activations: vec![0; n_agents],
                max_gap: vec![0; n_agents],
                probs: step_probs.clone(),
            },
            last_active: vec![0; n_agents],
            problem,
            agents,
            topology,
            w,
            schedule,
            step_probs,
            topo_rng,
            next_plane_id: 0,
            t: 0,
            virtual_time: 0.0,
            counters: CostCounters::default(),
            trace: Vec::new(),
            stopped: false,
            cfg,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn problem(&self) -> &dyn BilevelProblem {
        &*self.problem
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn mixing(&self) -> &MixingMatrix {
        &self.w
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn trace(&self) -> &[MetricsRecord] {
        &self.trace
    }

    pub fn counters(&self) -> &CostCounters {
        &self.counters
    }

    pub fn activity(&self) -> &ActivityStats {
        &self.activity
    }

    pub fn step_probs(&self) -> &[f64] {
        &self.step_probs
    }

    /// True once `T` iterations ran or the stopping tolerance was met.
    pub fn finished(&self) -> bool {
        self.stopped || self.t >= self.cfg.hyper.t
    }

    fn xs(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.x.clone()).collect()
    }

    fn ys(&self) -> Vec<Vec<f64>> {
        self.agents.iter().map(|a| a.y.clone()).collect()
    }

    /// Active set and simulated duration of the coming iteration.
    fn draw_activity(&mut self, t: usize) -> Result<(ActiveSet, f64)> {
        let n_agents = self.agents.len();
        match &self.cfg.activation.delay {
            Some(model) => {
                let delays = model.sample(&mut self.delay_rngs, &mut self.straggler_rng);
                match self.cfg.mode {
                    Mode::ArgusS => {
                        let (dur, _) = crate::scheduler::simulate_round_time(&delays, Mode::ArgusS, model.round_length)?;
                        Ok((ActiveSet::all(t, n_agents), dur))
                    }
                    Mode::Argus => {
                        let (_, eligible) =
                            crate::scheduler::simulate_round_time(&delays, Mode::Argus, model.round_length)?;
                        let mut mask = vec![false; n_agents];
                        for i in eligible {
                            mask[i] = true;
                        }
                        for (i, m) in mask.iter_mut().enumerate() {
                            let p = self.cfg.activation.p_active[i];
                            if *m && p < 1.0 {
                                *m = rand::Rng::random::<f64>(&mut self.act_rngs[i]) < p;
                            }
                        }
                        let set = self.schedule.enforce(t, mask);
                        let slowest = set.members().iter().map(|&i| delays[i]).fold(0.0, f64::max);
                        Ok((set, model.round_length.max(slowest)))
                    }
                }
            }
            None => match self.cfg.mode {
                Mode::ArgusS => Ok((ActiveSet::all(t, n_agents), 1.0)),
                Mode::Argus => Ok((self.schedule.draw_active_set(t, &mut self.act_rngs), 1.0)),
            },
        }
    }

    /// Runs one iteration and returns its metrics record.
    pub fn step(&mut self) -> Result<&MetricsRecord> {
        if self.finished() {
            return Err(ArgusError::Precondition(format!("run already finished at iteration {}", self.t)));
        }
        let t = self.t;
        let hp = self.cfg.hyper.clone();
        let problem = Arc::clone(&self.problem);
        let problem = &*problem;
        let n_agents = self.agents.len();

        if n_agents > 1 && !self.cfg.static_topology {
            self.topology = sample_er_topology(n_agents, self.cfg.p_c, t + 1, &mut self.topo_rng)?;
            self.w = metropolis_weights(&self.topology)?;
        }

        let (active, duration) = self.draw_activity(t)?;

        let xs = self.xs();
        let ys = self.ys();
        for i in 0..n_agents {
            let (d, u) = mix_neighbors(i, self.w.row(i), &xs, &ys)?;
            self.agents[i].mixed_x = d;
            self.agents[i].mixed_y = u;
        }

        let neighbors: Vec<Vec<usize>> = (0..n_agents).map(|i| self.w.neighbors(i).filter(|&j| j != i).collect()).collect();

        let mut next: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let a = &self.agents[i];
            if !active.contains(i) {
                next.push((a.mixed_x.clone(), a.mixed_y.clone()));
                continue;
            }
            let mut sx = xs.clone();
            let mut sy = ys.clone();
            sx[i] = a.snapshot.x.clone();
            sy[i] = a.snapshot.y.clone();
            let snap_lambda = a.snapshot_lambda();
            let point = LocalPoint {
                agent: i,
                xs: &sx,
                ys: &sy,
                planes: &a.polytope.planes,
                lambda: &snap_lambda,
                theta: &a.snapshot.theta,
                neighbors: &neighbors[i],
            };
            let (gx, gy) = primal_grads(problem, &point);
            let p = self.step_probs[i];
            let step_x = effective_step(hp.eta_x, p)?;
            let step_y = effective_step(hp.eta_y, p)?;
            next.push(primal_step(problem, t + 1, i, &a.mixed_x, &a.mixed_y, &gx, &gy, step_x, step_y)?);
        }
        for (a, (x, y)) in self.agents.iter_mut().zip(next) {
            a.x = x;
            a.y = y;
        }

        let lambda_before: Vec<Vec<f64>> = self.agents.iter().map(|a| a.lambda.clone()).collect();
        let (c1, c2) = regularization_coeffs(t, hp.eta_lambda, hp.eta_theta);
        let xs = self.xs();
        let ys = self.ys();
        let mut dual_updates = Vec::new();
        for &i in active.members() {
            let a = &self.agents[i];
            let snap_lambda = a.snapshot_lambda();
            let reg_point = LocalPoint {
                agent: i,
                xs: &xs,
                ys: &ys,
                planes: &a.polytope.planes,
                lambda: &snap_lambda,
                theta: &a.snapshot.theta,
                neighbors: &neighbors[i],
            };
            let grads = local_lagrangian_grads(problem, &reg_point, c1, c2)?;
            let p = self.step_probs[i];
            let mut lambda = a.lambda.clone();
            let mut theta = a.theta.clone();
            dual_step(
                &mut lambda,
                &mut theta,
                &grads,
                effective_step(hp.eta_lambda, p)?,
                effective_step(hp.eta_theta, p)?,
            );
            if lambda.iter().any(|l| !l.is_finite()) || theta.values().any(|v| !vecops::all_finite(v)) {
                return Err(ArgusError::Divergence {
                    iteration: t + 1,
                    agent: Some(i),
                    what: "dual iterate is not finite".into(),
                });
            }
            dual_updates.push((i, lambda, theta));
        }
        for (i, lambda, theta) in dual_updates {
            self.agents[i].lambda = lambda;
            self.agents[i].theta = theta;
        }

        let cut_epoch = (t + 1) % hp.iota == 0 && t < hp.t1;
        if cut_epoch {
            self.cut_epoch(t, &lambda_before)?;
        }

        for &i in active.members() {
            self.agents[i].refresh_snapshot(t + 1);
            let gap = t + 1 - self.last_active[i];
            self.activity.max_gap[i] = self.activity.max_gap[i].max(gap);
            self.activity.activations[i] += 1;
            self.last_active[i] = t + 1;
        }
        self.activity.iterations += 1;
        self.virtual_time += duration;

        let cuts: Vec<usize> = self.agents.iter().map(|a| a.polytope.len()).collect();
        let d_t = self.w.average_degree();
        let dims = problem.dims();
        self.counters.update(d_t, dims, &self.step_probs, &cuts, hp.k, cut_epoch);

        let record = metrics::record(
            problem,
            &self.agents,
            &self.w,
            &hp,
            t + 1,
            active.len(),
            &self.counters,
            self.virtual_time,
        )?;
        if !(record.psi.is_finite()) {
            return Err(ArgusError::Divergence {
                iteration: t + 1,
                agent: None,
                what: "convergence metric is not finite".into(),
            });
        }
        self.t += 1;
        if let Some(tol) = self.cfg.stop_tol {
            if record.psi <= tol {
                self.stopped = true;
            }
        }
        self.trace.push(record);
        Ok(self.trace.last().expect("just pushed"))
    }

    fn cut_epoch(&mut self, t: usize, lambda_before: &[Vec<f64>]) -> Result<()> {
        let hp = &self.cfg.hyper;
        let problem = Arc::clone(&self.problem);
        let problem = &*problem;
        let dims = problem.dims();
        let xs = self.xs();
        let ys = self.ys();
        let xb = VariableBlock::new(BlockKind::Upper, dims, xs.clone())?;
        let yb = VariableBlock::new(BlockKind::Lower, dims, ys.clone())?;
        let params = hp.lower_params();
        let y_star = estimate_lower_solution(problem, &xb, &yb, &self.w, &params)?.into_rows();

        let mut sens = match self.cfg.cut_grad {
            CutGradMode::Fd => {
                let w = self.w.clone();
                let yb = yb.clone();
                Sensitivity::finite_difference(
                    Box::new(move |x: &[Vec<f64>]| {
                        let xb = VariableBlock::new(BlockKind::Upper, dims, x.to_vec())?;
                        Ok(estimate_lower_solution(problem, &xb, &yb, &w, &params)?.into_rows())
                    }),
                    xs.clone(),
                    CUT_FD_STEP,
                )
            }
            CutGradMode::Analytic => {
                let state = LowerLevelState::new(&xb, &yb, &self.w)?;
                let args = prox_arguments(problem, &state, &self.w, &params)?;
                Sensitivity::analytic(problem, xs.clone(), ys.clone(), args, params.step_y)
            }
        };

        for i in 0..self.agents.len() {
            let nbrs: Vec<usize> = self.w.neighbors(i).collect();
            let point = CutPoint {
                agents: nbrs.clone(),
                x: nbrs.iter().map(|&j| xs[j].as_slice()).collect(),
                y: nbrs.iter().map(|&j| ys[j].as_slice()).collect(),
                y_star: nbrs.iter().map(|&j| y_star[j].as_slice()).collect(),
            };
            let h = point.h(hp.lambda1)?;
            let candidate = if h > hp.epsilon {
                let id = self.next_plane_id;
                self.next_plane_id += 1;
                Some(build_cut(i, t + 1, id, &point, hp.lambda1, hp.epsilon, &mut sens)?)
            } else {
                None
            };
            let agent = &mut self.agents[i];
            let edit = maintain_polytope(&mut agent.polytope, &mut agent.lambda, &lambda_before[i], candidate)?;
            log::debug!("t={} agent={} h={:.3e} edit={:?}", t + 1, i, h, edit);
        }
        Ok(())
    }

    /// Steps until finished; on error the trace so far stays available.
    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_result(self) -> RunResult {
        RunResult {
            seed: self.cfg.seed,
            mode: self.cfg.mode,
            agents: self.agents,
            trace: self.trace,
            counters: self.counters,
            activity: self.activity,
            stopped_early: self.stopped,
        }
    }
}

/// Builds and runs a simulation to completion.
pub fn run(problem: Arc<dyn BilevelProblem>, cfg: EngineConfig) -> Result<RunResult> {
    let mut sim = Simulation::new(problem, cfg)?;
    sim.run_to_end()?;
    Ok(sim.into_result())
}
