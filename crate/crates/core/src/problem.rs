//! The bilevel problem interface and the numerical utilities shared by every
//! instance: soft-thresholding, central finite differences and gradient
//! checking.
//!
//! An instance supplies, per agent `i`, the smooth upper objective `G_i`, the
//! smooth lower objective `g_i` and their partial gradients, together with the
//! shared non-smooth terms (`R` on the upper variable, `r` on the lower one)
//! through their proximal maps. A proximal map called with scale `s` is the
//! prox of `s * term`, so `s = 0` is the identity.

use serde::Serialize;

use crate::error::{ArgusError, Result};
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProblemDims {
    /// Upper-variable dimension per agent.
    pub n: usize,
    /// Lower-variable dimension per agent.
    pub m: usize,
    pub agents: usize,
}

impl ProblemDims {
    pub fn new(n: usize, m: usize, agents: usize) -> Result<Self> {
        if n == 0 || m == 0 || agents == 0 {
            return Err(ArgusError::invalid(format!(
                "problem dimensions must be positive (n={n}, m={m}, agents={agents})"
            )));
        }
        Ok(Self { n, m, agents })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BlockKind {
    Upper,
    Lower,
}

/// One dense vector per agent, all of the block's dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableBlock {
    kind: BlockKind,
    rows: Vec<Vec<f64>>,
}

impl VariableBlock {
    pub fn new(kind: BlockKind, dims: ProblemDims, rows: Vec<Vec<f64>>) -> Result<Self> {
        let width = match kind {
            BlockKind::Upper => dims.n,
            BlockKind::Lower => dims.m,
        };
        if rows.len() != dims.agents {
            return Err(ArgusError::invalid(format!(
                "{kind:?} block has {} rows, expected {}",
                rows.len(),
                dims.agents
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(ArgusError::invalid(format!(
                    "{kind:?} block row {i} has length {}, expected {width}",
                    r.len()
                )));
            }
            if let Some(k) = r.iter().position(|v| !v.is_finite()) {
                return Err(ArgusError::Numeric {
                    coordinate: k,
                    what: format!("{kind:?} block row {i} is not finite"),
                });
            }
        }
        Ok(Self { kind, rows })
    }

    pub fn zeros(kind: BlockKind, dims: ProblemDims) -> Self {
        let width = match kind {
            BlockKind::Upper => dims.n,
            BlockKind::Lower => dims.m,
        };
        Self {
            kind,
            rows: vec![vec![0.0; width]; dims.agents],
        }
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, agent: usize) -> &[f64] {
        &self.rows[agent]
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }
}

/// Oracle bundle of a decentralized bilevel problem.
///
/// All methods are pure; instances are shared read-only between agents.
pub trait BilevelProblem: Send + Sync {
    fn name(&self) -> &str;

    fn dims(&self) -> ProblemDims;

    /// `G_i(x, y)`.
    fn upper_value(&self, agent: usize, x: &[f64], y: &[f64]) -> f64;
    fn upper_grad_x(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn upper_grad_y(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64>;

    /// `g_i(x, y)`.
    fn lower_value(&self, agent: usize, x: &[f64], y: &[f64]) -> f64;
    fn lower_grad_x(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64>;
    fn lower_grad_y(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64>;

    /// `R(x)`.
    fn upper_reg(&self, x: &[f64]) -> f64;
    fn upper_prox(&self, v: &[f64], scale: f64) -> Vec<f64>;

    /// `r(y)`.
    fn lower_reg(&self, y: &[f64]) -> f64;
    fn lower_prox(&self, v: &[f64], scale: f64) -> Vec<f64>;

    /// Mixed derivative `(d/dx grad_y g_i)(x, y) * v`, when the instance can
    /// evaluate it in closed form.
    fn lower_cross_jvp(&self, _agent: usize, _x: &[f64], _y: &[f64], _v: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Directional derivative of `lower_prox(., scale)` at `v` along `dir`.
    fn lower_prox_jvp(&self, v: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
        let h = 1e-7;
        let plus: Vec<f64> = v.iter().zip(dir).map(|(a, d)| a + h * d).collect();
        let minus: Vec<f64> = v.iter().zip(dir).map(|(a, d)| a - h * d).collect();
        let p = self.lower_prox(&plus, scale);
        let q = self.lower_prox(&minus, scale);
        p.iter().zip(&q).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }

    fn initial_point(&self, _agent: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.dims();
        (vec![0.0; d.n], vec![0.0; d.m])
    }

    /// Problem-specific quality measure (e.g. accuracy); NaN when undefined.
    fn task_metric(&self, _xs: &[Vec<f64>], _ys: &[Vec<f64>]) -> f64 {
        f64::NAN
    }
}

/// Soft-thresholding, the proximal map of `s * ||.||_1`.
pub fn prox_l1(v: &[f64], s: f64) -> Result<Vec<f64>> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(ArgusError::invalid(format!("prox scale must be a finite non-negative number, got {s}")));
    }
    if let Some(k) = v.iter().position(|x| !x.is_finite()) {
        return Err(ArgusError::Numeric {
            coordinate: k,
            what: "prox input is not finite".into(),
        });
    }
    Ok(soft_threshold(v, s))
}

/// Unchecked soft-threshold used on hot paths.
pub(crate) fn soft_threshold(v: &[f64], s: f64) -> Vec<f64> {
    v.iter()
        .map(|&x| vecops::sign(x) * (x.abs() - s).max(0.0))
        .collect()
}

/// Weighted l1 penalty `weight * ||.||_1` (the zero function when weight is 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct L1Penalty {
    pub weight: f64,
}

impl L1Penalty {
    pub fn new(weight: f64) -> Self {
        Self { weight }
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.weight * vecops::norm_l1(v)
        }
    }

    pub fn prox(&self, v: &[f64], scale: f64) -> Vec<f64> {
        if self.weight == 0.0 || scale == 0.0 {
            v.to_vec()
        } else {
            soft_threshold(v, self.weight * scale)
        }
    }

    pub fn prox_jvp(&self, v: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
        let t = self.weight * scale;
        v.iter()
            .zip(dir)
            .map(|(&x, &d)| if x.abs() > t || t == 0.0 { d } else { 0.0 })
            .collect()
    }
}

/// Central finite-difference gradient of `f` at `point` with step `h`.
pub fn finite_diff_grad<F>(f: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(ArgusError::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut p = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let orig = p[k];
        p[k] = orig + h;
        let fp = f(&p);
        p[k] = orig - h;
        let fm = f(&p);
        p[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(ArgusError::Numeric {
                coordinate: k,
                what: format!("function value not finite ({fp}, {fm})"),
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub oracle: &'static str,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub agent: usize,
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err > self.tol).collect()
    }
}

/// Step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;
const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = vecops::norm(&vecops::sub(analytic, numeric));
    diff / vecops::norm(analytic).max(vecops::norm(numeric)).max(GRAD_CHECK_FLOOR)
}

/// Compares the four oracle gradients of agent `agent` against central
/// differences of the corresponding value oracles.
pub fn grad_check(problem: &dyn BilevelProblem, agent: usize, x: &[f64], y: &[f64], tol: f64) -> GradCheckReport {
    let h = GRAD_CHECK_STEP;
    let check = |analytic: Vec<f64>, numeric: Result<Vec<f64>>| match numeric {
        Ok(fd) => relative_error(&analytic, &fd),
        Err(_) => f64::INFINITY,
    };
    let entries = vec![
        GradCheckEntry {
            oracle: "upper_grad_x",
            max_rel_err: check(
                problem.upper_grad_x(agent, x, y),
                finite_diff_grad(|p| problem.upper_value(agent, p, y), x, h),
            ),
        },
        GradCheckEntry {
            oracle: "upper_grad_y",
            max_rel_err: check(
                problem.upper_grad_y(agent, x, y),
                finite_diff_grad(|p| problem.upper_value(agent, x, p), y, h),
            ),
        },
        GradCheckEntry {
            oracle: "lower_grad_x",
            max_rel_err: check(
                problem.lower_grad_x(agent, x, y),
                finite_diff_grad(|p| problem.lower_value(agent, p, y), x, h),
            ),
        },
        GradCheckEntry {
            oracle: "lower_grad_y",
            max_rel_err: check(
                problem.lower_grad_y(agent, x, y),
                finite_diff_grad(|p| problem.lower_value(agent, x, p), y, h),
            ),
        },
    ];
    GradCheckReport { agent, tol, entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(prox_l1(&[2.0, -0.5, 0.1], 0.5).unwrap(), vec![1.5, 0.0, 0.0]);
        let v = [0.3, -7.0, 0.0, 1e-9];
        assert_eq!(prox_l1(&v, 0.0).unwrap(), v.to_vec());
        let out = prox_l1(&[-3.2], 1.0).unwrap();
        assert!((out[0] + 2.2).abs() < 1e-15);
    }

    #[test]
    fn negative_scale_rejected() {
        assert!(matches!(prox_l1(&[1.0], -0.1), Err(ArgusError::InvalidArgument(_))));
        assert!(prox_l1(&[f64::NAN], 0.1).is_err());
    }

    #[test]
    fn finite_differences_examples() {
        let g = finite_diff_grad(|z| z[0] * z[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        let g = finite_diff_grad(|z| vecops::norm_l1(z), &[2.0, -1.0], 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-5 && (g[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn finite_differences_report_bad_coordinate() {
        let err = finite_diff_grad(|z| if z[1] > 1.0 { f64::NAN } else { z[0] }, &[0.0, 1.0], 1e-3).unwrap_err();
        assert!(matches!(err, ArgusError::Numeric { coordinate: 1, .. }));
        assert!(finite_diff_grad(|z| z[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn dims_reject_zero() {
        assert!(ProblemDims::new(0, 1, 1).is_err());
        assert!(ProblemDims::new(1, 1, 1).is_ok());
    }

    #[test]
    fn variable_block_validates_shape() {
        let d = ProblemDims::new(2, 1, 2).unwrap();
        assert!(VariableBlock::new(BlockKind::Upper, d, vec![vec![0.0; 2]; 2]).is_ok());
        assert!(VariableBlock::new(BlockKind::Upper, d, vec![vec![0.0; 1]; 2]).is_err());
        assert!(VariableBlock::new(BlockKind::Lower, d, vec![vec![f64::INFINITY]; 2]).is_err());
    }

    proptest! {
        #[test]
        fn soft_threshold_is_idempotent_at_zero(v in prop::collection::vec(-10.0..10.0f64, 1..8), s in 0.0..5.0f64) {
            let p = prox_l1(&v, s).unwrap();
            prop_assert_eq!(prox_l1(&p, 0.0).unwrap(), p);
        }

        #[test]
        fn soft_threshold_is_nonexpansive(
            a in prop::collection::vec(-10.0..10.0f64, 4),
            b in prop::collection::vec(-10.0..10.0f64, 4),
            s in 0.0..5.0f64,
        ) {
            let pa = prox_l1(&a, s).unwrap();
            let pb = prox_l1(&b, s).unwrap();
            prop_assert!(vecops::dist_sq(&pa, &pb) <= vecops::dist_sq(&a, &b) + 1e-12);
        }

        #[test]
        fn soft_threshold_minimizes_prox_objective(
            v in prop::collection::vec(-5.0..5.0f64, 3),
            s in 0.0..3.0f64,
            us in prop::collection::vec(prop::collection::vec(-6.0..6.0f64, 3), 50),
        ) {
            let obj = |u: &[f64]| s * vecops::norm_l1(u) + 0.5 * vecops::dist_sq(u, &v);
            let star = prox_l1(&v, s).unwrap();
            let best = obj(&star);
            for u in &us {
                prop_assert!(best <= obj(u) + 1e-12);
            }
        }
    }
}
