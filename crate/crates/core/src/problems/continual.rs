//! Two-task continual learning with linear softmax models.
//!
//! `x` is the historical model and `y` the current one, both class-major
//! weights.
//! `G_i(x, y) = mean_s CE(p_y(s) -> p_x(s))` over the agent's task-1 samples
//! (soft targets from the current model).
//! `g_i(x, y) = mean CE(y; task 2) + prox_weight ||x - y||^2`.
//! `R = l1_upper ||x||_1`, `r = l1_lower ||y||_1`.

use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};
use crate::problem::{BilevelProblem, L1Penalty, ProblemDims};
use crate::problems::data::{accuracy, blob_centers, ce_and_grad, log_softmax, logits, sample_blobs, softmax, DatasetFile, LabeledSet};
use crate::rng::{substream, Stream};
use crate::vecops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinualParams {
    pub d_f: usize,
    pub classes: usize,
    pub samples_per_task: usize,
    pub separation: f64,
    /// Spread of the task-2 class centers around the task-1 ones.
    pub task_shift: f64,
    pub prox_weight: f64,
    pub l1_upper: f64,
    pub l1_lower: f64,
}

impl Default for ContinualParams {
    fn default() -> Self {
        Self {
            d_f: 5,
            classes: 3,
            samples_per_task: 60,
            separation: 1.5,
            task_shift: 1.0,
            prox_weight: 0.1,
            l1_upper: 1e-3,
            l1_lower: 1e-3,
        }
    }
}

impl ContinualParams {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.d_f == 0 || self.classes == 0 || self.samples_per_task == 0 {
            errs.push("continual.d_f, classes and samples_per_task must be >= 1".into());
        }
        if !(self.separation > 0.0) || !(self.task_shift >= 0.0) {
            errs.push("continual.separation must be > 0 and task_shift >= 0".into());
        }
        if !(self.prox_weight >= 0.0 && self.l1_upper >= 0.0 && self.l1_lower >= 0.0) {
            errs.push("continual weights must be >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContinualInstance {
    dims: ProblemDims,
    pub classes: usize,
    pub task1: Vec<LabeledSet>,
    pub task2: Vec<LabeledSet>,
    pub prox_weight: f64,
    upper: L1Penalty,
    lower: L1Penalty,
}

pub fn gen_continual(seed: u64, agents: usize, params: &ContinualParams) -> Result<ContinualInstance> {
    params.validate().map_err(ArgusError::Config)?;
    let mut rng = substream(seed, Stream::Data, 0);
    let centers1 = blob_centers(&mut rng, params.classes, params.d_f, params.separation);
    let offsets = blob_centers(&mut rng, params.classes, params.d_f, params.task_shift);
    let centers2: Vec<Vec<f64>> = centers1
        .iter()
        .zip(&offsets)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
        .collect();
    let mut task1 = Vec::with_capacity(agents);
    let mut task2 = Vec::with_capacity(agents);
    for i in 0..agents {
        let mut arng = substream(seed, Stream::Data, 1 + i as u64);
        task1.push(sample_blobs(&mut arng, &centers1, params.samples_per_task));
        task2.push(sample_blobs(&mut arng, &centers2, params.samples_per_task));
    }
    ContinualInstance::from_sets(task1, task2, params)
}

impl ContinualInstance {
    pub fn from_sets(task1: Vec<LabeledSet>, task2: Vec<LabeledSet>, params: &ContinualParams) -> Result<Self> {
        if task1.is_empty() || task1.len() != task2.len() {
            return Err(ArgusError::invalid("need both tasks on every agent"));
        }
        let d_f = task1[0].features.first().map(Vec::len).unwrap_or(0);
        if d_f == 0 {
            return Err(ArgusError::invalid("task sets must be non-empty"));
        }
        for set in task1.iter().chain(&task2) {
            if set.is_empty() || set.features.iter().any(|f| f.len() != d_f) {
                return Err(ArgusError::invalid("task sets must be non-empty with matching feature dimension"));
            }
            if set.labels.iter().any(|&l| l >= params.classes) {
                return Err(ArgusError::invalid(format!("label outside 0..{}", params.classes)));
            }
        }
        let size = d_f * params.classes;
        Ok(Self {
            dims: ProblemDims::new(size, size, task1.len())?,
            classes: params.classes,
            task1,
            task2,
            prox_weight: params.prox_weight,
            upper: L1Penalty::new(params.l1_upper),
            lower: L1Penalty::new(params.l1_lower),
        })
    }

    pub fn from_dataset(file: &DatasetFile, params: &ContinualParams) -> Result<Self> {
        let agents = file.agents();
        let mut t1 = Vec::with_capacity(agents);
        let mut t2 = Vec::with_capacity(agents);
        for i in 0..agents {
            let get = |split: &str| {
                file.get(i, split)
                    .cloned()
                    .ok_or_else(|| ArgusError::invalid(format!("dataset lacks split {split} for agent {i}")))
            };
            t1.push(get("task1")?);
            t2.push(get("task2")?);
        }
        Self::from_sets(t1, t2, params)
    }

    pub fn to_dataset(&self) -> DatasetFile {
        let mut parts = Vec::new();
        for (i, (a, b)) in self.task1.iter().zip(&self.task2).enumerate() {
            parts.push((i, "task1".to_string(), a.clone()));
            parts.push((i, "task2".to_string(), b.clone()));
        }
        DatasetFile { parts }
    }

    fn feature_dim(&self) -> usize {
        self.dims.n / self.classes
    }
}

impl BilevelProblem for ContinualInstance {
    fn name(&self) -> &str {
        "continual"
    }

    fn dims(&self) -> ProblemDims {
        self.dims
    }

    fn upper_value(&self, agent: usize, x: &[f64], y: &[f64]) -> f64 {
        let set = &self.task1[agent];
        let total: f64 = set
            .features
            .iter()
            .map(|f| {
                let target = softmax(&logits(y, f, self.classes));
                let lq = log_softmax(&logits(x, f, self.classes));
                -vecops::dot(&target, &lq)
            })
            .sum();
        total / set.len() as f64
    }

    fn upper_grad_x(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let set = &self.task1[agent];
        let d = self.feature_dim();
        let mut g = vec![0.0; x.len()];
        for f in &set.features {
            let p = softmax(&logits(y, f, self.classes));
            let q = softmax(&logits(x, f, self.classes));
            for c in 0..self.classes {
                vecops::axpy(q[c] - p[c], f, &mut g[c * d..(c + 1) * d]);
            }
        }
        vecops::scaled(1.0 / set.len() as f64, &g)
    }

    fn upper_grad_y(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let set = &self.task1[agent];
        let d = self.feature_dim();
        let mut g = vec![0.0; y.len()];
        for f in &set.features {
            let p = softmax(&logits(y, f, self.classes));
            let lq = log_softmax(&logits(x, f, self.classes));
            let mean_lq = vecops::dot(&p, &lq);
            for c in 0..self.classes {
                vecops::axpy(-p[c] * (lq[c] - mean_lq), f, &mut g[c * d..(c + 1) * d]);
            }
        }
        vecops::scaled(1.0 / set.len() as f64, &g)
    }

    fn lower_value(&self, agent: usize, x: &[f64], y: &[f64]) -> f64 {
        let set = &self.task2[agent];
        let ce: f64 = set
            .features
            .iter()
            .zip(&set.labels)
            .map(|(f, &l)| -log_softmax(&logits(y, f, self.classes))[l])
            .sum();
        ce / set.len() as f64 + self.prox_weight * vecops::dist_sq(x, y)
    }

    fn lower_grad_x(&self, _agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        vecops::scaled(2.0 * self.prox_weight, &vecops::sub(x, y))
    }

    fn lower_grad_y(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let set = &self.task2[agent];
        let mut g = vec![0.0; y.len()];
        for (f, &l) in set.features.iter().zip(&set.labels) {
            let (_, gj) = ce_and_grad(y, f, l, self.classes);
            vecops::axpy(1.0, &gj, &mut g);
        }
        let mut g = vecops::scaled(1.0 / set.len() as f64, &g);
        vecops::axpy(2.0 * self.prox_weight, &vecops::sub(y, x), &mut g);
        g
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

    fn lower_cross_jvp(&self, _agent: usize, _x: &[f64], _y: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        Some(vecops::scaled(-2.0 * self.prox_weight, v))
    }

    fn lower_prox_jvp(&self, v: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
        self.lower.prox_jvp(v, scale, dir)
    }

    /// Accuracy of the current models on both tasks, averaged over agents.
    fn task_metric(&self, _xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
        let total: f64 = ys
            .iter()
            .enumerate()
            .map(|(i, y)| 0.5 * (accuracy(y, &self.task1[i], self.classes) + accuracy(y, &self.task2[i], self.classes)))
            .sum();
        total / ys.len() as f64
    }
}
