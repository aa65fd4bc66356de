//! Feasibility function `h`, cutting-plane construction and per-agent
//! polytope maintenance.
//!
//! For agent `i` with neighborhood `N_i` (itself included),
//! `h = sum_j ||y_j - y*_j||_1 + lambda1 * ||y_j - y*_j||^2` over `j` in
//! `N_i`. When `h > eps` at the current point, the linearization of `h`
//! shifted by `eps` gives a half-space that cuts the point off while keeping
//! every point with `h <= eps` whenever `h` is convex.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};
use crate::problem::BilevelProblem;
use crate::vecops;

/// `sum_j a_j^T x_j + sum_j b_j^T y_j + c <= 0`, keyed by agent id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CuttingPlane {
    pub id: u64,
    pub owner: usize,
    pub created_t: usize,
    pub a: BTreeMap<usize, Vec<f64>>,
    pub b: BTreeMap<usize, Vec<f64>>,
    pub c: f64,
}

impl CuttingPlane {
    /// Left-hand side at the given point. `x_of(j)` / `y_of(j)` supply the
    /// variables of each agent the plane references.
    pub fn slack<'v>(
        &self,
        x_of: impl Fn(usize) -> Option<&'v [f64]>,
        y_of: impl Fn(usize) -> Option<&'v [f64]>,
    ) -> Result<f64> {
        let mut total = self.c;
        for (&j, a) in &self.a {
            let x = x_of(j).ok_or(ArgusError::Staleness { agent: self.owner, peer: j })?;
            total += vecops::dot(a, x);
        }
        for (&j, b) in &self.b {
            let y = y_of(j).ok_or(ArgusError::Staleness { agent: self.owner, peer: j })?;
            total += vecops::dot(b, y);
        }
        Ok(total)
    }

    pub fn norm_a(&self) -> f64 {
        self.a.values().map(|v| vecops::norm_sq(v)).sum::<f64>().sqrt()
    }

    pub fn norm_b(&self) -> f64 {
        self.b.values().map(|v| vecops::norm_sq(v)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.c.is_finite()
            && self.a.values().all(|v| vecops::all_finite(v))
            && self.b.values().all(|v| vecops::all_finite(v))
    }
}

/// `h` over a neighborhood, given matching lists of `y_j` and `y*_j`.
pub fn eval_h(y: &[&[f64]], y_star: &[&[f64]], lambda1: f64) -> Result<f64> {
    if y.len() != y_star.len() {
        return Err(ArgusError::invalid(format!(
            "h needs matching blocks, got {} and {}",
            y.len(),
            y_star.len()
        )));
    }
    if lambda1 < 0.0 {
        return Err(ArgusError::invalid(format!("lambda1 must be >= 0, got {lambda1}")));
    }
    let mut total = 0.0;
    for (a, b) in y.iter().zip(y_star) {
        if a.len() != b.len() {
            return Err(ArgusError::invalid(format!("h block length mismatch: {} vs {}", a.len(), b.len())));
        }
        for (u, v) in a.iter().zip(b.iter()) {
            let d = u - v;
            total += d.abs() + lambda1 * d * d;
        }
    }
    Ok(total)
}

/// A neighborhood point at which `h` is evaluated or a cut is generated.
#[derive(Debug, Clone)]
pub struct CutPoint<'a> {
    /// Agent ids, increasing; the owner is among them.
    pub agents: Vec<usize>,
    pub x: Vec<&'a [f64]>,
    pub y: Vec<&'a [f64]>,
    pub y_star: Vec<&'a [f64]>,
}

impl CutPoint<'_> {
    pub fn h(&self, lambda1: f64) -> Result<f64> {
        eval_h(&self.y, &self.y_star, lambda1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutGradMode {
    /// Central differences of `y*(x)` through the full lower-level estimator.
    Fd,
    /// Closed form through the mixed derivative; single lower-level round only.
    Analytic,
}

type SolutionMap<'a> = Box<dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + 'a>;

enum Source<'a> {
    FiniteDifference {
        map: SolutionMap<'a>,
        x: Vec<Vec<f64>>,
        step: f64,
    },
    Analytic {
        problem: &'a dyn BilevelProblem,
        x: Vec<Vec<f64>>,
        y_init: Vec<Vec<f64>>,
        prox_args: Vec<Vec<f64>>,
        step_y: f64,
    },
}

/// One Jacobian column: per agent `l`, `d y*_l / d x_{j,k}` (empty = zero).
pub type SensitivityColumn = Vec<Vec<f64>>;

/// Lazily computed sensitivity of `y*` to each agent's upper variable.
pub struct Sensitivity<'a> {
    source: Source<'a>,
    cache: Vec<Option<Vec<SensitivityColumn>>>,
}

impl<'a> Sensitivity<'a> {
    /// Finite differences of an arbitrary map `x -> y*(x)` with step `step`.
    pub fn finite_difference(map: SolutionMap<'a>, x: Vec<Vec<f64>>, step: f64) -> Self {
        let agents = x.len();
        Self {
            source: Source::FiniteDifference { map, x, step },
            cache: vec![None; agents],
        }
    }

    /// Exact sensitivity of a single-round estimate
    /// `y*_l = prox(v_l)`, `v_l = mix_l - step_y * grad_y g_l(x_l, y_l) - ...`,
    /// where only `v_j` depends on `x_j`.
    pub fn analytic(
        problem: &'a dyn BilevelProblem,
        x: Vec<Vec<f64>>,
        y_init: Vec<Vec<f64>>,
        prox_args: Vec<Vec<f64>>,
        step_y: f64,
    ) -> Self {
        let agents = x.len();
        Self {
            source: Source::Analytic { problem, x, y_init, prox_args, step_y },
            cache: vec![None; agents],
        }
    }

    pub fn columns(&mut self, j: usize) -> Result<&[SensitivityColumn]> {
        if self.cache[j].is_none() {
            let cols = match &self.source {
                Source::FiniteDifference { map, x, step } => {
                    let n = x[j].len();
                    let mut cols = Vec::with_capacity(n);
                    let mut xp = x.clone();
                    for k in 0..n {
                        let orig = x[j][k];
                        xp[j][k] = orig + step;
                        let plus = map(&xp)?;
                        xp[j][k] = orig - step;
                        let minus = map(&xp)?;
                        xp[j][k] = orig;
                        let col: SensitivityColumn = plus
                            .iter()
                            .zip(&minus)
                            .enumerate()
                            .map(|(l, (p, q))| {
                                let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b) / (2.0 * step)).collect();
                                if vecops::all_finite(&d) {
                                    Ok(d)
                                } else {
                                    Err(ArgusError::Numeric {
                                        coordinate: k,
                                        what: format!("finite-difference sensitivity of agent {l} to agent {j} diverged"),
                                    })
                                }
                            })
                            .collect::<Result<_>>()?;
                        cols.push(col);
                    }
                    cols
                }
                Source::Analytic { problem, x, y_init, prox_args, step_y } => {
                    let n = x[j].len();
                    let agents = x.len();
                    let mut e = vec![0.0; n];
                    let mut cols = Vec::with_capacity(n);
                    for k in 0..n {
                        e[k] = 1.0;
                        let cross = problem.lower_cross_jvp(j, &x[j], &y_init[j], &e).ok_or_else(|| {
                            ArgusError::Precondition(format!(
                                "problem {} has no mixed-derivative oracle for analytic cuts",
                                problem.name()
                            ))
                        })?;
                        e[k] = 0.0;
                        let dir = vecops::scaled(-step_y, &cross);
                        let mut col = vec![Vec::new(); agents];
                        col[j] = problem.lower_prox_jvp(&prox_args[j], *step_y, &dir);
                        cols.push(col);
                    }
                    cols
                }
            };
            self.cache[j] = Some(cols);
        }
        Ok(self.cache[j].as_deref().expect("filled above"))
    }
}

/// Partial derivatives of `h` at `point`: `b_j` in closed form (with
/// `sign(0) = 0`) and `a_j` by the chain rule through `y*(x)`.
pub fn cut_gradients(
    point: &CutPoint<'_>,
    lambda1: f64,
    sensitivity: &mut Sensitivity<'_>,
) -> Result<(BTreeMap<usize, Vec<f64>>, BTreeMap<usize, Vec<f64>>)> {
    let mut b = BTreeMap::new();
    for (idx, &l) in point.agents.iter().enumerate() {
        let s: Vec<f64> = point.y[idx]
            .iter()
            .zip(point.y_star[idx])
            .map(|(u, v)| {
                let d = u - v;
                vecops::sign(d) + 2.0 * lambda1 * d
            })
            .collect();
        b.insert(l, s);
    }
    let mut a = BTreeMap::new();
    for &j in &point.agents {
        let cols = sensitivity.columns(j)?;
        let coeffs: Vec<f64> = cols
            .iter()
            .map(|col| {
                -point
                    .agents
                    .iter()
                    .filter(|&&l| !col[l].is_empty())
                    .map(|l| vecops::dot(&col[*l], &b[l]))
                    .sum::<f64>()
            })
            .collect();
        a.insert(j, coeffs);
    }
    Ok((a, b))
}

/// Supporting-hyperplane cut at an infeasible point (`h > eps`).
pub fn build_cut(
    owner: usize,
    created_t: usize,
    id: u64,
    point: &CutPoint<'_>,
    lambda1: f64,
    epsilon: f64,
    sensitivity: &mut Sensitivity<'_>,
) -> Result<CuttingPlane> {
    let h = point.h(lambda1)?;
    if !(h > epsilon) {
        return Err(ArgusError::Precondition(format!(
            "cut requested at a feasible point (h = {h}, eps = {epsilon})"
        )));
    }
    let (a, b) = cut_gradients(point, lambda1, sensitivity)?;
    let mut linear = 0.0;
    for (idx, j) in point.agents.iter().enumerate() {
        linear += vecops::dot(&a[j], point.x[idx]) + vecops::dot(&b[j], point.y[idx]);
    }
    let plane = CuttingPlane {
        id,
        owner,
        created_t,
        a,
        b,
        c: h - linear - epsilon,
    };
    if !plane.is_finite() {
        return Err(ArgusError::Numeric {
            coordinate: 0,
            what: format!("cut {id} of agent {owner} has non-finite coefficients"),
        });
    }
    Ok(plane)
}

/// Cutting planes of one agent, at most `cap` of them.
#[derive(Debug, Clone)]
pub struct Polytope {
    pub owner: usize,
    pub planes: Vec<Arc<CuttingPlane>>,
    pub cap: usize,
}

impl Polytope {
    pub fn new(owner: usize, cap: usize) -> Self {
        Self { owner, planes: Vec::new(), cap }
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    /// Appends `t,owner,plane_id,c,norm_a,norm_b` rows.
    pub fn write_rows<W: Write>(&self, t: usize, out: &mut W) -> std::io::Result<()> {
        for p in &self.planes {
            writeln!(out, "{},{},{},{},{},{}", t, self.owner, p.id, p.c, p.norm_a(), p.norm_b())?;
        }
        Ok(())
    }
}

pub const CUT_DUMP_HEADER: &str = "t,owner,plane_id,c,norm_a,norm_b";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PolytopeEdit {
    pub removed: Vec<u64>,
    pub evicted: Option<u64>,
    pub added: Option<u64>,
}

/// Drops planes whose multiplier was zero at both the previous and the
/// current iteration, then inserts `candidate` with a zero multiplier,
/// evicting the oldest of the smallest-multiplier planes when at the cap.
pub fn maintain_polytope(
    polytope: &mut Polytope,
    multipliers: &mut Vec<f64>,
    previous: &[f64],
    candidate: Option<CuttingPlane>,
) -> Result<PolytopeEdit> {
    if multipliers.len() != polytope.planes.len() || previous.len() != polytope.planes.len() {
        return Err(ArgusError::Consistency(format!(
            "agent {}: {} planes but {} current / {} previous multipliers",
            polytope.owner,
            polytope.planes.len(),
            multipliers.len(),
            previous.len()
        )));
    }
    let mut edit = PolytopeEdit::default();
    let mut keep_planes = Vec::with_capacity(polytope.planes.len());
    let mut keep_mult = Vec::with_capacity(polytope.planes.len());
    for ((plane, &now), &before) in polytope.planes.iter().zip(multipliers.iter()).zip(previous) {
        if now == 0.0 && before == 0.0 {
            edit.removed.push(plane.id);
        } else {
            keep_planes.push(Arc::clone(plane));
            keep_mult.push(now);
        }
    }
    if let Some(new) = candidate {
        if polytope.cap == 0 {
            return Err(ArgusError::Consistency("polytope cap must be >= 1".into()));
        }
        if keep_planes.len() >= polytope.cap {
            let victim = (0..keep_planes.len())
                .min_by(|&p, &q| {
                    keep_mult[p]
                        .total_cmp(&keep_mult[q])
                        .then(keep_planes[p].created_t.cmp(&keep_planes[q].created_t))
                        .then(keep_planes[p].id.cmp(&keep_planes[q].id))
                })
                .expect("non-empty at cap");
            edit.evicted = Some(keep_planes.remove(victim).id);
            keep_mult.remove(victim);
        }
        edit.added = Some(new.id);
        keep_planes.push(Arc::new(new));
        keep_mult.push(0.0);
    }
    polytope.planes = keep_planes;
    *multipliers = keep_mult;
    Ok(edit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_map() -> SolutionMap<'static> {
        Box::new(|x: &[Vec<f64>]| Ok(x.to_vec()))
    }

    fn zero_map(m: usize) -> SolutionMap<'static> {
        Box::new(move |x: &[Vec<f64>]| Ok(x.iter().map(|_| vec![0.0; m]).collect()))
    }

    #[test]
    fn h_examples() {
        let y = [1.0, 2.0];
        assert_eq!(eval_h(&[&y], &[&y], 0.7).unwrap(), 0.0);
        let ys = [0.0, 3.0];
        assert!((eval_h(&[&y], &[&ys], 0.5).unwrap() - 3.0).abs() < 1e-15);
        assert!(eval_h(&[&y], &[], 0.5).is_err());
        assert!(eval_h(&[&y[..1]], &[&ys], 0.5).is_err());
    }

    #[test]
    fn b_coefficients_closed_form() {
        let x = [0.0];
        let y = [0.5, -2.0];
        let ys = [0.0, 0.0];
        let point = CutPoint { agents: vec![0], x: vec![&x], y: vec![&y], y_star: vec![&ys] };
        let mut sens = Sensitivity::finite_difference(zero_map(2), vec![vec![0.0]], 1e-6);
        let (_, b) = cut_gradients(&point, 1.0, &mut sens).unwrap();
        assert_eq!(b[&0], vec![2.0, -5.0]);

        let point = CutPoint { agents: vec![0], x: vec![&x], y: vec![&ys], y_star: vec![&ys] };
        let (_, b) = cut_gradients(&point, 1.0, &mut sens).unwrap();
        assert_eq!(b[&0], vec![0.0, 0.0]);
    }

    #[test]
    fn chain_rule_through_identity_solution() {
        // y*(x) = x, so dh/dx = -dh/dy.
        let x = [0.3, -1.0];
        let y = [1.0, 0.5];
        let ys = x;
        let point = CutPoint { agents: vec![0], x: vec![&x], y: vec![&y], y_star: vec![&ys] };
        let mut sens = Sensitivity::finite_difference(identity_map(), vec![x.to_vec()], 1e-6);
        let (a, b) = cut_gradients(&point, 0.8, &mut sens).unwrap();
        for (u, v) in a[&0].iter().zip(&b[&0]) {
            assert!((u + v).abs() < 1e-4);
        }
    }

    #[test]
    fn scalar_cut() {
        let x = [0.0];
        let y = [2.0];
        let ys = [0.0];
        let point = CutPoint { agents: vec![0], x: vec![&x], y: vec![&y], y_star: vec![&ys] };
        let mut sens = Sensitivity::finite_difference(zero_map(1), vec![vec![0.0]], 1e-6);
        let cut = build_cut(0, 0, 1, &point, 0.5, 0.1, &mut sens).unwrap();
        assert_eq!(cut.a[&0], vec![0.0]);
        assert_eq!(cut.b[&0], vec![3.0]);
        assert!((cut.c + 2.1).abs() < 1e-12);
        let at = |yv: f64| {
            let yy = [yv];
            cut.slack(|_| Some(&x[..]), |_| Some(&yy[..])).unwrap()
        };
        assert!((at(2.0) - 3.9).abs() < 1e-12);
        assert!((at(0.0) + 2.1).abs() < 1e-12);
    }

    #[test]
    fn cut_requires_infeasible_point() {
        let x = [0.0];
        let y = [0.01];
        let ys = [0.0];
        let point = CutPoint { agents: vec![0], x: vec![&x], y: vec![&y], y_star: vec![&ys] };
        let mut sens = Sensitivity::finite_difference(zero_map(1), vec![vec![0.0]], 1e-6);
        assert!(matches!(
            build_cut(0, 0, 1, &point, 0.5, 0.1, &mut sens),
            Err(ArgusError::Precondition(_))
        ));
    }

    fn plane(id: u64, t: usize) -> CuttingPlane {
        CuttingPlane {
            id,
            owner: 0,
            created_t: t,
            a: BTreeMap::from([(0, vec![1.0])]),
            b: BTreeMap::from([(0, vec![1.0])]),
            c: -1.0,
        }
    }

    #[test]
    fn inactive_plane_removed() {
        let mut poly = Polytope::new(0, 4);
        poly.planes = vec![Arc::new(plane(1, 0)), Arc::new(plane(2, 5))];
        let mut lam = vec![0.0, 0.3];
        let edit = maintain_polytope(&mut poly, &mut lam, &[0.0, 0.0], None).unwrap();
        assert_eq!(edit.removed, vec![1]);
        assert_eq!(poly.len(), 1);
        assert_eq!(lam, vec![0.3]);
    }

    #[test]
    fn candidate_appended_with_zero_multiplier() {
        let mut poly = Polytope::new(0, 4);
        let mut lam = vec![];
        let edit = maintain_polytope(&mut poly, &mut lam, &[], Some(plane(9, 3))).unwrap();
        assert_eq!(edit.added, Some(9));
        assert_eq!(lam, vec![0.0]);
    }

    #[test]
    fn cap_evicts_oldest_smallest() {
        let mut poly = Polytope::new(0, 3);
        poly.planes = vec![Arc::new(plane(1, 0)), Arc::new(plane(2, 5)), Arc::new(plane(3, 10))];
        let mut lam = vec![0.5, 0.1, 0.1];
        let edit = maintain_polytope(&mut poly, &mut lam, &[0.5, 0.1, 0.1], Some(plane(4, 15))).unwrap();
        assert_eq!(edit.evicted, Some(2));
        assert_eq!(poly.len(), 3);
        let ids: Vec<u64> = poly.planes.iter().map(|p| p.id).collect();
        assert_eq!(ids, vec![1, 3, 4]);
    }

    #[test]
    fn misaligned_multipliers_rejected() {
        let mut poly = Polytope::new(0, 3);
        poly.planes = vec![Arc::new(plane(1, 0))];
        let mut lam = vec![];
        assert!(matches!(
            maintain_polytope(&mut poly, &mut lam, &[], None),
            Err(ArgusError::Consistency(_))
        ));
    }
}
