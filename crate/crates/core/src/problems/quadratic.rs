//! Quadratic instance with a closed-form lower solution.
//!
//! `G_i(x, y) = 0.5 ||E x - y||^2`, `g_i(x, y) = 0.5 ||y - B_i x - c_i||^2`,
//! where `E` is the `m x n` identity embedding (`E = I` when `n = m`).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};
use crate::problem::{BilevelProblem, L1Penalty, ProblemDims};
use crate::rng::{substream, Stream};
use crate::vecops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticParams {
    pub n: usize,
    pub m: usize,
    /// Weight of `||x||_1`.
    pub l1_upper: f64,
    /// Weight of `||y||_1`.
    pub l1_lower: f64,
    /// Spectral-norm bound used when scaling each `B_i`.
    pub b_scale: f64,
}

impl Default for QuadraticParams {
    fn default() -> Self {
        Self { n: 3, m: 3, l1_upper: 0.0, l1_lower: 0.0, b_scale: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticInstance {
    dims: ProblemDims,
    /// Row-major `m x n`.
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    upper: L1Penalty,
    lower: L1Penalty,
}

impl QuadraticInstance {
    /// Builds an instance from explicit `B_i` (row-major `m x n`) and `c_i`.
    pub fn from_parts(dims: ProblemDims, b: Vec<Vec<f64>>, c: Vec<Vec<f64>>, l1_upper: f64, l1_lower: f64) -> Result<Self> {
        if b.len() != dims.agents || c.len() != dims.agents {
            return Err(ArgusError::invalid("need one B_i and c_i per agent"));
        }
        if b.iter().any(|bi| bi.len() != dims.m * dims.n) || c.iter().any(|ci| ci.len() != dims.m) {
            return Err(ArgusError::invalid("B_i must be m x n and c_i of length m"));
        }
        if !(l1_upper >= 0.0 && l1_lower >= 0.0) {
            return Err(ArgusError::invalid("l1 weights must be >= 0"));
        }
        Ok(Self { dims, b, c, upper: L1Penalty::new(l1_upper), lower: L1Penalty::new(l1_lower) })
    }

    fn bx(&self, agent: usize, x: &[f64]) -> Vec<f64> {
        let n = self.dims.n;
        (0..self.dims.m).map(|r| vecops::dot(&self.b[agent][r * n..(r + 1) * n], x)).collect()
    }

    fn bt(&self, agent: usize, v: &[f64]) -> Vec<f64> {
        let n = self.dims.n;
        let mut out = vec![0.0; n];
        for (r, vr) in v.iter().enumerate() {
            vecops::axpy(*vr, &self.b[agent][r * n..(r + 1) * n], &mut out);
        }
        out
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dims.m).map(|k| x.get(k).copied().unwrap_or(0.0)).collect()
    }

    fn embed_t(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dims.n).map(|k| v.get(k).copied().unwrap_or(0.0)).collect()
    }

    fn lower_residual(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let bx = self.bx(agent, x);
        y.iter().zip(&bx).zip(&self.c[agent]).map(|((a, b), c)| a - b - c).collect()
    }

    /// Consensus minimizer of `sum_i g_i(x_bar, y)`: the mean of `B_i x_bar + c_i`.
    pub fn closed_form_lower(&self, x_bar: &[f64]) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = (0..self.dims.agents)
            .map(|i| {
                let mut v = self.bx(i, x_bar);
                vecops::axpy(1.0, &self.c[i], &mut v);
                v
            })
            .collect();
        vecops::mean(&rows)
    }
}

/// Random instance: Gaussian `B_i` scaled to Frobenius norm `b_scale`
/// (so spectral norm <= `b_scale`), Gaussian `c_i`.
pub fn gen_quadratic(seed: u64, agents: usize, params: &QuadraticParams) -> Result<QuadraticInstance> {
    let dims = ProblemDims::new(params.n, params.m, agents)?;
    if !(params.b_scale > 0.0 && params.b_scale <= 2.0) {
        return Err(ArgusError::invalid(format!("b_scale must lie in (0, 2], got {}", params.b_scale)));
    }
    let mut rng = substream(seed, Stream::Data, 0);
    let mut b = Vec::with_capacity(agents);
    let mut c = Vec::with_capacity(agents);
    for _ in 0..agents {
        let raw: Vec<f64> = (0..dims.m * dims.n).map(|_| rng.sample(StandardNormal)).collect();
        let fro = vecops::norm(&raw).max(1e-12);
        b.push(vecops::scaled(params.b_scale / fro, &raw));
        c.push((0..dims.m).map(|_| rng.sample(StandardNormal)).collect());
    }
    QuadraticInstance::from_parts(dims, b, c, params.l1_upper, params.l1_lower)
}

impl BilevelProblem for QuadraticInstance {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dims(&self) -> ProblemDims {
        self.dims
    }

    fn upper_value(&self, _agent: usize, x: &[f64], y: &[f64]) -> f64 {
        0.5 * vecops::dist_sq(&self.embed(x), y)
    }

    fn upper_grad_x(&self, _agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.embed_t(&vecops::sub(&self.embed(x), y))
    }

    fn upper_grad_y(&self, _agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        vecops::sub(y, &self.embed(x))
    }

    fn lower_value(&self, agent: usize, x: &[f64], y: &[f64]) -> f64 {
        0.5 * vecops::norm_sq(&self.lower_residual(agent, x, y))
    }

    fn lower_grad_x(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        vecops::scaled(-1.0, &self.bt(agent, &self.lower_residual(agent, x, y)))
    }

    fn lower_grad_y(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.lower_residual(agent, x, y)
    }

    fn upper_reg(&self, x: &[f64]) -> f64 {
        self.upper.value(x)
    }

    fn upper_prox(&self, v: &[f64], scale: f64) -> Vec<f64> {
        self.upper.prox(v, scale)
    }

    fn lower_reg(&self, y: &[f64]) -> f64 {
        self.lower.value(y)
    }

    fn lower_prox(&self, v: &[f64], scale: f64) -> Vec<f64> {
        self.lower.prox(v, scale)
    }

    fn lower_cross_jvp(&self, agent: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        Some(vecops::scaled(-1.0, &self.bx(agent, v)))
    }

    fn lower_prox_jvp(&self, v: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
        self.lower.prox_jvp(v, scale, dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for k in 0..n {
            v[k * n + k] = 1.0;
        }
        v
    }

    #[test]
    fn identity_instance_tracks_x() {
        let dims = ProblemDims::new(2, 2, 3).unwrap();
        let q = QuadraticInstance::from_parts(dims, vec![eye(2); 3], vec![vec![0.0; 2]; 3], 0.0, 0.0).unwrap();
        assert_eq!(q.closed_form_lower(&[1.5, -2.0]), vec![1.5, -2.0]);
    }

    #[test]
    fn averaged_instance() {
        let dims = ProblemDims::new(1, 1, 2).unwrap();
        let q = QuadraticInstance::from_parts(dims, vec![vec![2.0], vec![0.0]], vec![vec![0.0]; 2], 0.0, 0.0).unwrap();
        assert_eq!(q.closed_form_lower(&[0.7]), vec![0.7]);
    }

    #[test]
    fn generator_bounds_b() {
        let q = gen_quadratic(3, 4, &QuadraticParams { n: 3, m: 2, b_scale: 2.0, ..Default::default() }).unwrap();
        for bi in &q.b {
            assert!(vecops::norm(bi) <= 2.0 + 1e-12);
        }
    }
}
