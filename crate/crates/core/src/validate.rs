//! Built-in invariant suites behind `argus validate`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cuts::{build_cut, CutPoint, CuttingPlane, Sensitivity};
use crate::engine::{local_lagrangian_grads, local_lagrangian_value, ActivationParams, EngineConfig, HyperParams, LocalPoint, Simulation};
use crate::cuts::CutGradMode;
use crate::lower_level::{estimate_lower_solution, LowerLevelParams};
use crate::metrics::iteration_bits;
use crate::network::{metropolis_weights, sample_er_topology, MixingMatrix, Topology};
use crate::problem::{finite_diff_grad, grad_check, prox_l1, relative_error, BilevelProblem, BlockKind, ProblemDims, VariableBlock};
use crate::problems::{gen_continual, gen_hyperclean, gen_quadratic, ContinualParams, HyperCleanParams, QuadraticInstance, QuadraticParams};
use crate::rng::{substream, SimRng, Stream};
use crate::scheduler::Mode;
use crate::vecops;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: crate::Result<(bool, String)>) -> Self {
        match r {
            Ok((p, d)) => Self::new(name, p, d),
            Err(e) => Self::new(name, false, format!("error: {e}")),
        }
    }
}

pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:<6}  detail\n", "check", "result");
    for o in outcomes {
        let tag = if o.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<width$}  {:<6}  {}\n", o.name, tag, o.detail));
    }
    s
}

fn gauss(rng: &mut SimRng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = vec![prox_closed_form(10_000, 1), prox_idempotence(1000, 2), prox_optimality(20, 1000, 3)];
    out.extend(grad_check_instances(20, 4));
    out.push(lagrangian_grads(5));
    out.push(mixing_suite(200, 6));
    out.push(path_graph_rho());
    out.push(consensus_contraction(50, 7));
    out.push(topology_determinism(8));
    out.push(lower_level_scalar());
    out.push(lower_level_quadratic(9));
    out.push(lower_level_monotone(10));
    out.push(cut_separation(11));
    out.push(run_invariants(12));
    out.push(sync_async_collapse(13));
    out.push(worked_cost_example());
    out
}

pub fn prox_closed_form(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = substream(seed, Stream::Data, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let v: f64 = 3.0 * rng.sample::<f64, _>(StandardNormal);
        let s: f64 = 2.0 * rng.random::<f64>();
        let want = if v > s {
            v - s
        } else if v < -s {
            v + s
        } else {
            0.0
        };
        match prox_l1(&[v], s) {
            Ok(got) => worst = worst.max((got[0] - want).abs()),
            Err(e) => return CheckOutcome::new("prox.closed_form", false, e.to_string()),
        }
    }
    CheckOutcome::new("prox.closed_form", worst <= 1e-12, format!("{cases} cases, max err {worst:.1e}"))
}

pub fn prox_idempotence(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = substream(seed, Stream::Data, 0);
    let ok = (0..cases).all(|_| {
        let v = gauss(&mut rng, 5, 2.0);
        let s = rng.random::<f64>();
        let p = prox_l1(&v, s).expect("finite input");
        prox_l1(&p, 0.0).expect("finite input") == p
    });
    CheckOutcome::new("prox.idempotence", ok, format!("{cases} cases"))
}

pub fn prox_optimality(points: usize, trials: usize, seed: u64) -> CheckOutcome {
    let mut rng = substream(seed, Stream::Data, 0);
    let obj = |u: &[f64], v: &[f64], s: f64| s * vecops::norm_l1(u) + 0.5 * vecops::dist_sq(u, v);
    for _ in 0..points {
        let v = gauss(&mut rng, 4, 2.0);
        let s = rng.random::<f64>() * 1.5;
        let best = prox_l1(&v, s).expect("finite input");
        let f_best = obj(&best, &v, s);
        for _ in 0..trials {
            let u = gauss(&mut rng, 4, 2.0);
            if obj(&u, &v, s) < f_best - 1e-12 {
                return CheckOutcome::new("prox.optimality", false, format!("better point found for v = {v:?}, s = {s}"));
            }
        }
    }
    CheckOutcome::new("prox.optimality", true, format!("{points} x {trials} comparisons"))
}

/// Oracle gradients against central differences at `points` random points.
pub fn grad_check_suite(problem: &dyn BilevelProblem, points: usize, scale: f64, seed: u64) -> CheckOutcome {
    let name = format!("grad_check.{}", problem.name());
    let d = problem.dims();
    let mut rng = substream(seed, Stream::Data, 0);
    let mut worst: f64 = 0.0;
    for k in 0..points {
        let agent = k % d.agents;
        let x = gauss(&mut rng, d.n, scale);
        let y = gauss(&mut rng, d.m, scale);
        let report = grad_check(problem, agent, &x, &y, 1e-5);
        worst = worst.max(report.max_error());
        if !report.passed() {
            let bad: Vec<String> = report.failures().iter().map(|e| format!("{} ({:.1e})", e.oracle, e.max_rel_err)).collect();
            return CheckOutcome::new(&name, false, format!("point {k}, agent {agent}: {}", bad.join(", ")));
        }
    }
    CheckOutcome::new(&name, true, format!("{points} points, max rel err {worst:.1e}"))
}

fn small_hyperclean(seed: u64) -> crate::Result<crate::problems::HyperCleanInstance> {
    let p = HyperCleanParams { d_f: 4, n_train: 12, n_val: 8, ..HyperCleanParams::default() };
    gen_hyperclean(seed, 3, &p)
}

pub fn grad_check_instances(points: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    match gen_quadratic(seed, 3, &QuadraticParams { n: 4, m: 3, ..QuadraticParams::default() }) {
        Ok(p) => out.push(grad_check_suite(&p, points, 1.0, seed)),
        Err(e) => out.push(CheckOutcome::new("grad_check.quadratic", false, e.to_string())),
    }
    match small_hyperclean(seed) {
        Ok(p) => out.push(grad_check_suite(&p, points, 0.5, seed)),
        Err(e) => out.push(CheckOutcome::new("grad_check.hyperclean", false, e.to_string())),
    }
    let cp = ContinualParams { d_f: 3, samples_per_task: 10, ..ContinualParams::default() };
    match gen_continual(seed, 3, &cp) {
        Ok(p) => out.push(grad_check_suite(&p, points, 0.5, seed)),
        Err(e) => out.push(CheckOutcome::new("grad_check.continual", false, e.to_string())),
    }
    out
}

/// Builds one cut per agent at a random point of a quadratic instance.
fn quadratic_cuts(
    inst: &QuadraticInstance,
    w: &MixingMatrix,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    params: &LowerLevelParams,
    lambda1: f64,
    eps: f64,
) -> crate::Result<Vec<Option<CuttingPlane>>> {
    let dims = inst.dims();
    let xb = VariableBlock::new(BlockKind::Upper, dims, xs.to_vec())?;
    let yb = VariableBlock::new(BlockKind::Lower, dims, ys.to_vec())?;
    let y_star = estimate_lower_solution(inst, &xb, &yb, w, params)?.into_rows();
    let yb2 = yb.clone();
    let map = Box::new(move |x: &[Vec<f64>]| {
        let xb = VariableBlock::new(BlockKind::Upper, dims, x.to_vec())?;
        Ok(estimate_lower_solution(inst, &xb, &yb2, w, params)?.into_rows())
    });
    let mut sens = Sensitivity::finite_difference(map, xs.to_vec(), crate::engine::CUT_FD_STEP);
    let mut cuts = Vec::new();
    for i in 0..dims.agents {
        let nb: Vec<usize> = w.neighbors(i).collect();
        let point = CutPoint {
            agents: nb.clone(),
            x: nb.iter().map(|&j| xs[j].as_slice()).collect(),
            y: nb.iter().map(|&j| ys[j].as_slice()).collect(),
            y_star: nb.iter().map(|&j| y_star[j].as_slice()).collect(),
        };
        if point.h(lambda1)? > eps {
            cuts.push(Some(build_cut(i, 0, i as u64, &point, lambda1, eps, &mut sens)?));
        } else {
            cuts.push(None);
        }
    }
    Ok(cuts)
}

pub fn lagrangian_grads(seed: u64) -> CheckOutcome {
    let name = "lagrangian.local_grads";
    CheckOutcome::from_result(
        name,
        (|| {
            let inst = gen_quadratic(seed, 4, &QuadraticParams::default())?;
            let mut rng = substream(seed, Stream::Data, 1);
            let w = metropolis_weights(&Topology::complete(4))?;
            let xs: Vec<Vec<f64>> = (0..4).map(|_| gauss(&mut rng, 3, 1.0)).collect();
            let ys: Vec<Vec<f64>> = (0..4).map(|_| gauss(&mut rng, 3, 1.0)).collect();
            let params = HyperParams::default().lower_params();
            let planes: Vec<Arc<CuttingPlane>> =
                quadratic_cuts(&inst, &w, &xs, &ys, &params, 0.5, 1e-3)?.into_iter().flatten().map(Arc::new).collect();
            let agent = 0;
            let nbrs = vec![1, 2, 3];
            let lambda: Vec<f64> = planes.iter().map(|_| rng.random::<f64>()).collect();
            let theta: BTreeMap<usize, Vec<f64>> = nbrs.iter().map(|&j| (j, gauss(&mut rng, 3, 1.0))).collect();
            let (c1, c2) = (0.3, 0.7);
            let at = |xs: &[Vec<f64>], ys: &[Vec<f64>], l: &[f64], th: &BTreeMap<usize, Vec<f64>>| {
                let p = LocalPoint { agent, xs, ys, planes: &planes, lambda: l, theta: th, neighbors: &nbrs };
                local_lagrangian_value(&inst, &p, c1, c2).unwrap_or(f64::NAN)
            };
            let p = LocalPoint { agent, xs: &xs, ys: &ys, planes: &planes, lambda: &lambda, theta: &theta, neighbors: &nbrs };
            let g = local_lagrangian_grads(&inst, &p, c1, c2)?;
            let h = 1e-6;
            let mut errs = Vec::new();
            errs.push(relative_error(
                &g.x,
                &finite_diff_grad(|v| { let mut s = xs.clone(); s[agent] = v.to_vec(); at(&s, &ys, &lambda, &theta) }, &xs[agent], h)?,
            ));
            errs.push(relative_error(
                &g.y,
                &finite_diff_grad(|v| { let mut s = ys.clone(); s[agent] = v.to_vec(); at(&xs, &s, &lambda, &theta) }, &ys[agent], h)?,
            ));
            errs.push(relative_error(&g.lambda, &finite_diff_grad(|v| at(&xs, &ys, v, &theta), &lambda, h)?));
            for &j in &nbrs {
                let fd = finite_diff_grad(
                    |v| {
                        let mut th = theta.clone();
                        th.insert(j, v.to_vec());
                        at(&xs, &ys, &lambda, &th)
                    },
                    &theta[&j],
                    h,
                )?;
                errs.push(relative_error(&g.theta[&j], &fd));
            }
            let worst = errs.iter().copied().fold(0.0, f64::max);
            Ok((worst <= 1e-5, format!("{} planes, max rel err {worst:.1e}", planes.len())))
        })(),
    )
}

pub fn mixing_suite(graphs: usize, seed: u64) -> CheckOutcome {
    let mut rng = substream(seed, Stream::Topology, 0);
    let mut worst_rho: f64 = 0.0;
    for g in 0..graphs {
        let res = sample_er_topology(10, 0.5, g, &mut rng).and_then(|t| metropolis_weights(&t).map(|w| (t, w)));
        let (topo, w) = match res {
            Ok(v) => v,
            Err(e) => return CheckOutcome::new("mixing.er_suite", false, format!("graph {g}: {e}")),
        };
        if let Err(msgs) = w.check_assumptions(&topo, 1e-12) {
            return CheckOutcome::new("mixing.er_suite", false, format!("graph {g}: {}", msgs.join("; ")));
        }
        worst_rho = worst_rho.max(w.rho);
    }
    CheckOutcome::new("mixing.er_suite", worst_rho < 1.0, format!("{graphs} graphs, max rho {worst_rho:.4}"))
}

pub fn path_graph_rho() -> CheckOutcome {
    match metropolis_weights(&Topology::path(3)) {
        Ok(w) => {
            let err = (w.rho - 2.0 / 3.0).abs();
            CheckOutcome::new("mixing.path3_rho", err <= 1e-12, format!("rho {:.15}", w.rho))
        }
        Err(e) => CheckOutcome::new("mixing.path3_rho", false, e.to_string()),
    }
}

pub fn consensus_contraction(graphs: usize, seed: u64) -> CheckOutcome {
    let mut rng = substream(seed, Stream::Topology, 0);
    for g in 0..graphs {
        let w = match sample_er_topology(10, 0.5, g, &mut rng).and_then(|t| metropolis_weights(&t)) {
            Ok(w) => w,
            Err(e) => return CheckOutcome::new("mixing.contraction", false, e.to_string()),
        };
        let mut z: Vec<Vec<f64>> = (0..10).map(|_| gauss(&mut rng, 3, 1.0)).collect();
        let mean = vecops::mean(&z);
        for r in &mut z {
            vecops::axpy(-1.0, &mean, r);
        }
        let before: f64 = z.iter().map(|r| vecops::norm_sq(r)).sum::<f64>().sqrt();
        let after: f64 = w.mix(&z).iter().map(|r| vecops::norm_sq(r)).sum::<f64>().sqrt();
        if after > w.rho * before * (1.0 + 1e-12) + 1e-15 {
            return CheckOutcome::new("mixing.contraction", false, format!("graph {g}: {after} > {} * {before}", w.rho));
        }
    }
    CheckOutcome::new("mixing.contraction", true, format!("{graphs} graphs"))
}

pub fn topology_determinism(seed: u64) -> CheckOutcome {
    let draw = || {
        let mut rng = substream(seed, Stream::Topology, 0);
        (0..20).map(|t| sample_er_topology(10, 0.5, t, &mut rng).map(|g| format!("{g:?}"))).collect::<crate::Result<Vec<_>>>()
    };
    match (draw(), draw()) {
        (Ok(a), Ok(b)) => CheckOutcome::new("mixing.determinism", a == b, "20 graphs redrawn"),
        (Err(e), _) | (_, Err(e)) => CheckOutcome::new("mixing.determinism", false, e.to_string()),
    }
}

fn scalar_quadratic() -> crate::Result<QuadraticInstance> {
    QuadraticInstance::from_parts(ProblemDims::new(1, 1, 1)?, vec![vec![0.0]], vec![vec![1.0]], 0.0, 0.0)
}

pub fn lower_level_scalar() -> CheckOutcome {
    CheckOutcome::from_result(
        "lower_level.scalar_recursion",
        (|| {
            let inst = scalar_quadratic()?;
            let d = inst.dims();
            let w = metropolis_weights(&Topology::complete(1))?;
            let params = LowerLevelParams { rounds: 10, step_y: 0.5, step_dual: 0.1, penalty: 1.0 };
            let y = estimate_lower_solution(
                &inst,
                &VariableBlock::zeros(BlockKind::Upper, d),
                &VariableBlock::zeros(BlockKind::Lower, d),
                &w,
                &params,
            )?;
            let err = (y.row(0)[0] - (1.0 - 0.5f64.powi(10))).abs();
            Ok((err <= 1e-12, format!("err {err:.1e}")))
        })(),
    )
}

/// Consensus-form quadratic with `K = 200` on the complete graph.
pub fn lower_level_quadratic(seed: u64) -> CheckOutcome {
    CheckOutcome::from_result(
        "lower_level.quadratic_closed_form",
        (|| {
            let inst = gen_quadratic(seed, 3, &QuadraticParams::default())?;
            let d = inst.dims();
            let mut rng = substream(seed, Stream::Data, 7);
            let x_bar = gauss(&mut rng, d.n, 1.0);
            let xb = VariableBlock::new(BlockKind::Upper, d, vec![x_bar.clone(); 3])?;
            let w = metropolis_weights(&Topology::complete(3))?;
            let params = LowerLevelParams { rounds: 200, step_y: 0.1, step_dual: 0.1, penalty: 0.5 };
            let y = estimate_lower_solution(&inst, &xb, &VariableBlock::zeros(BlockKind::Lower, d), &w, &params)?;
            let target = inst.closed_form_lower(&x_bar);
            let worst = y
                .rows()
                .iter()
                .map(|r| vecops::norm(&vecops::sub(r, &target)) / vecops::norm(&target).max(1e-12))
                .fold(0.0, f64::max);
            Ok((worst <= 1e-3, format!("max rel err {worst:.1e}")))
        })(),
    )
}

/// Residual to the closed form does not grow with `K` at a small step.
pub fn lower_level_monotone(seed: u64) -> CheckOutcome {
    CheckOutcome::from_result(
        "lower_level.monotone_residual",
        (|| {
            let inst = gen_quadratic(seed, 3, &QuadraticParams::default())?;
            let d = inst.dims();
            let mut rng = substream(seed, Stream::Data, 7);
            let x_bar = gauss(&mut rng, d.n, 1.0);
            let xb = VariableBlock::new(BlockKind::Upper, d, vec![x_bar.clone(); 3])?;
            let w = metropolis_weights(&Topology::complete(3))?;
            let target = inst.closed_form_lower(&x_bar);
            let mut prev = f64::INFINITY;
            for k in 1..=30 {
                // g_i has unit curvature in y, so lambda_max = 1.
                let params = LowerLevelParams { rounds: k, step_y: 0.1, step_dual: 0.01, penalty: 0.1 };
                let y = estimate_lower_solution(&inst, &xb, &VariableBlock::zeros(BlockKind::Lower, d), &w, &params)?;
                let r: f64 = y.rows().iter().map(|row| vecops::dist_sq(row, &target)).sum::<f64>().sqrt();
                if r > prev * (1.0 + 1e-12) {
                    return Ok((false, format!("residual rose at K = {k}: {r} > {prev}")));
                }
                prev = r;
            }
            Ok((true, format!("K = 1..30, final residual {prev:.3e}")))
        })(),
    )
}

/// Positive slack at the generating point, non-positive slack at 100
/// feasible points per cut (`y = y*(x')` for perturbed `x'`).
pub fn cut_separation(seed: u64) -> CheckOutcome {
    CheckOutcome::from_result(
        "cuts.separation",
        (|| {
            let inst = gen_quadratic(seed, 4, &QuadraticParams::default())?;
            let d = inst.dims();
            let mut rng = substream(seed, Stream::Data, 3);
            let topo = sample_er_topology(4, 0.7, 0, &mut rng)?;
            let w = metropolis_weights(&topo)?;
            let xs: Vec<Vec<f64>> = (0..4).map(|_| gauss(&mut rng, d.n, 1.0)).collect();
            let ys: Vec<Vec<f64>> = (0..4).map(|_| gauss(&mut rng, d.m, 1.0)).collect();
            let params = HyperParams::default().lower_params();
            let (lambda1, eps) = (0.5, 1e-3);
            let cuts = quadratic_cuts(&inst, &w, &xs, &ys, &params, lambda1, eps)?;
            let yb = VariableBlock::new(BlockKind::Lower, d, ys.clone())?;
            let mut worst_feasible = f64::NEG_INFINITY;
            let mut min_generating = f64::INFINITY;
            let mut count = 0;
            for cut in cuts.iter().flatten() {
                count += 1;
                let s = cut.slack(|j| xs.get(j).map(Vec::as_slice), |j| ys.get(j).map(Vec::as_slice))?;
                min_generating = min_generating.min(s);
                for _ in 0..100 {
                    let xp: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect()).collect();
                    let xb = VariableBlock::new(BlockKind::Upper, d, xp.clone())?;
                    let yp = estimate_lower_solution(&inst, &xb, &yb, &w, &params)?.into_rows();
                    let s = cut.slack(|j| xp.get(j).map(Vec::as_slice), |j| yp.get(j).map(Vec::as_slice))?;
                    worst_feasible = worst_feasible.max(s);
                }
            }
            let ok = count > 0 && min_generating > 0.0 && worst_feasible <= 1e-9;
            Ok((ok, format!("{count} cuts, min generating slack {min_generating:.3e}, max feasible slack {worst_feasible:.3e}")))
        })(),
    )
}

fn small_run_config(seed: u64, mode: Mode, p_active: f64, agents: usize, t: usize) -> EngineConfig {
    EngineConfig {
        mode,
        seed,
        p_c: 0.5,
        static_topology: false,
        activation: ActivationParams { p_active: vec![p_active; agents], tau: 4, delay: None },
        hyper: HyperParams { t, t1: t, m: 3, iota: 2, ..HyperParams::default() },
        cut_grad: CutGradMode::Analytic,
        stop_tol: None,
    }
}

/// Polytope cap, dual non-negativity, staleness bound and the metric
/// decomposition along one asynchronous run.
pub fn run_invariants(seed: u64) -> CheckOutcome {
    CheckOutcome::from_result(
        "engine.run_invariants",
        (|| {
            let inst = Arc::new(gen_quadratic(seed, 5, &QuadraticParams::default())?);
            let cfg = small_run_config(seed, Mode::Argus, 0.5, 5, 60);
            let tau = cfg.activation.tau;
            let cap = cfg.hyper.m;
            let l2 = cfg.hyper.l_est * cfg.hyper.l_est;
            let mut sim = Simulation::new(inst, cfg)?;
            while !sim.finished() {
                let rec = sim.step()?.clone();
                if (rec.psi - (rec.gap_sq + l2 * rec.consensus)).abs() > 1e-12 * rec.psi.abs().max(1.0) {
                    return Ok((false, format!("t = {}: psi decomposition broken", rec.t)));
                }
                for a in sim.agents() {
                    if a.polytope.len() > cap {
                        return Ok((false, format!("t = {}: polytope of agent {} exceeds M", rec.t, a.polytope.owner)));
                    }
                    if a.lambda.iter().any(|l| *l < 0.0) {
                        return Ok((false, format!("t = {}: negative multiplier", rec.t)));
                    }
                    if rec.t - a.t_hat > tau {
                        return Ok((false, format!("t = {}: agent {} snapshot older than tau", rec.t, a.polytope.owner)));
                    }
                }
            }
            let max_gap = sim.activity().max_gap.iter().copied().max().unwrap_or(0);
            Ok((max_gap <= tau, format!("max activation gap {max_gap} (tau {tau})")))
        })(),
    )
}

pub fn sync_async_collapse(seed: u64) -> CheckOutcome {
    CheckOutcome::from_result(
        "engine.sync_async_collapse",
        (|| {
            let inst = Arc::new(gen_quadratic(seed, 4, &QuadraticParams::default())?);
            let mut csvs = Vec::new();
            for mode in [Mode::Argus, Mode::ArgusS] {
                let r = crate::engine::run(inst.clone(), small_run_config(seed, mode, 1.0, 4, 30))?;
                let mut buf = Vec::new();
                crate::metrics::write_trace(&mut buf, &r.trace)?;
                csvs.push(buf);
            }
            Ok((csvs[0] == csvs[1], "argus vs argus-s with p = 1".to_string()))
        })(),
    )
}

pub fn worked_cost_example() -> CheckOutcome {
    CheckOutcome::from_result(
        "metrics.worked_cost_example",
        (|| {
            let bits = iteration_bits(4.0, ProblemDims::new(5, 5, 10)?, &[1.0; 10], &[2; 10]);
            Ok((bits == 40960.0, format!("{bits} bits")))
        })(),
    )
}
