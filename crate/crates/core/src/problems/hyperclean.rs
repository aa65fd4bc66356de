//! Data hyper-cleaning with a linear softmax model.
//!
//! Upper variable `psi` holds one weight logit per training slot, lower
//! variable `w` the class-major model weights.
//! `G_i = mean validation CE(w)`,
//! `g_i = (1/n) sum_j sigmoid(psi_j) CE_j(w)`, `r = l1_lower ||w||_1`,
//! `R = l1_upper ||psi||_1`.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{ArgusError, Result};
use crate::problem::{BilevelProblem, L1Penalty, ProblemDims};
use crate::problems::data::{
    accuracy, auc, blob_centers, ce, ce_and_grad, corrupt_labels, sample_blobs, sigmoid, DatasetFile, LabeledSet,
};
use crate::rng::{substream, Stream};
use crate::vecops;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperCleanParams {
    pub d_f: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub classes: usize,
    pub corruption_rate: f64,
    /// Standard deviation of the class centers (noise is unit).
    pub separation: f64,
    pub l1_upper: f64,
    pub l1_lower: f64,
}

impl Default for HyperCleanParams {
    fn default() -> Self {
        Self {
            d_f: 10,
            n_train: 100,
            n_val: 50,
            classes: 3,
            corruption_rate: 0.3,
            separation: 1.0,
            l1_upper: 0.0,
            l1_lower: 1e-3,
        }
    }
}

impl HyperCleanParams {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.classes < 2 {
            errs.push(format!("hyperclean.classes must be >= 2, got {}", self.classes));
        }
        if self.d_f == 0 || self.n_train == 0 || self.n_val == 0 {
            errs.push("hyperclean.d_f, n_train and n_val must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.corruption_rate) {
            errs.push(format!("hyperclean.corruption_rate must lie in [0, 1), got {}", self.corruption_rate));
        }
        if !(self.separation > 0.0) {
            errs.push(format!("hyperclean.separation must be > 0, got {}", self.separation));
        }
        if !(self.l1_upper >= 0.0 && self.l1_lower >= 0.0) {
            errs.push("hyperclean l1 weights must be >= 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[derive(Debug, Clone)]
pub struct HyperCleanInstance {
    dims: ProblemDims,
    pub classes: usize,
    pub feature_dim: usize,
    pub train: Vec<LabeledSet>,
    pub val: Vec<LabeledSet>,
    upper: L1Penalty,
    lower: L1Penalty,
}

/// Blob data on every agent. The corrupted slots are the same on every
/// agent, so that the shared weight vector `psi` refers to comparable
/// samples; the wrong labels themselves are drawn per agent.
pub fn gen_hyperclean(seed: u64, agents: usize, params: &HyperCleanParams) -> Result<HyperCleanInstance> {
    if params.classes < 2 {
        return Err(ArgusError::invalid(format!("hyper-cleaning needs >= 2 classes, got {}", params.classes)));
    }
    params.validate().map_err(ArgusError::Config)?;
    let mut rng = substream(seed, Stream::Data, 0);
    let centers = blob_centers(&mut rng, params.classes, params.d_f, params.separation);
    let corrupted = (params.corruption_rate * params.n_train as f64).floor() as usize;
    let mask: Vec<usize> = sample(&mut rng, params.n_train, corrupted).into_vec();
    let mut train = Vec::with_capacity(agents);
    let mut val = Vec::with_capacity(agents);
    for i in 0..agents {
        let mut arng = substream(seed, Stream::Data, 1 + i as u64);
        let mut tr = sample_blobs(&mut arng, &centers, params.n_train);
        corrupt_labels(&mut arng, &mut tr, &mask, params.classes);
        train.push(tr);
        val.push(sample_blobs(&mut arng, &centers, params.n_val));
    }
    HyperCleanInstance::from_sets(train, val, params.classes, params.l1_upper, params.l1_lower)
}

impl HyperCleanInstance {
    pub fn from_sets(
        train: Vec<LabeledSet>,
        val: Vec<LabeledSet>,
        classes: usize,
        l1_upper: f64,
        l1_lower: f64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(ArgusError::invalid(format!("hyper-cleaning needs >= 2 classes, got {classes}")));
        }
        if train.is_empty() || train.len() != val.len() {
            return Err(ArgusError::invalid("need train and validation sets for every agent"));
        }
        let n_train = train[0].len();
        let feature_dim = train[0].features.first().map(Vec::len).unwrap_or(0);
        if n_train == 0 || feature_dim == 0 {
            return Err(ArgusError::invalid("training sets must be non-empty"));
        }
        for (i, (tr, va)) in train.iter().zip(&val).enumerate() {
            if tr.len() != n_train || va.is_empty() {
                return Err(ArgusError::invalid(format!("agent {i}: train size must be {n_train} and val non-empty")));
            }
            for set in [tr, va] {
                if set.features.iter().any(|f| f.len() != feature_dim) {
                    return Err(ArgusError::invalid(format!("agent {i}: feature dimension mismatch")));
                }
                if set.labels.iter().any(|&l| l >= classes) {
                    return Err(ArgusError::invalid(format!("agent {i}: label outside 0..{classes}")));
                }
            }
        }
        let dims = ProblemDims::new(n_train, feature_dim * classes, train.len())?;
        Ok(Self {
            dims,
            classes,
            feature_dim,
            train,
            val,
            upper: L1Penalty::new(l1_upper),
            lower: L1Penalty::new(l1_lower),
        })
    }

    pub fn from_dataset(file: &DatasetFile, classes: usize, l1_upper: f64, l1_lower: f64) -> Result<Self> {
        let agents = file.agents();
        let mut train = Vec::with_capacity(agents);
        let mut val = Vec::with_capacity(agents);
        for i in 0..agents {
            let get = |split: &str| {
                file.get(i, split)
                    .cloned()
                    .ok_or_else(|| ArgusError::invalid(format!("dataset lacks split {split} for agent {i}")))
            };
            train.push(get("train")?);
            val.push(get("val")?);
        }
        Self::from_sets(train, val, classes, l1_upper, l1_lower)
    }

    pub fn to_dataset(&self) -> DatasetFile {
        let mut parts = Vec::new();
        for (i, (tr, va)) in self.train.iter().zip(&self.val).enumerate() {
            parts.push((i, "train".to_string(), tr.clone()));
            parts.push((i, "val".to_string(), va.clone()));
        }
        DatasetFile { parts }
    }

    pub fn validation_accuracy(&self, agent: usize, w: &[f64]) -> f64 {
        accuracy(w, &self.val[agent], self.classes)
    }

    /// AUC of `sigmoid(psi)` separating clean (positive) from corrupted
    /// slots, pooled over agents.
    pub fn separation_auc(&self, xs: &[Vec<f64>]) -> f64 {
        let mut scores = Vec::new();
        let mut clean = Vec::new();
        for (psi, tr) in xs.iter().zip(&self.train) {
            for (p, c) in psi.iter().zip(&tr.corrupted) {
                scores.push(sigmoid(*p));
                clean.push(!c);
            }
        }
        auc(&scores, &clean)
    }
}

impl BilevelProblem for HyperCleanInstance {
    fn name(&self) -> &str {
        "hyperclean"
    }

    fn dims(&self) -> ProblemDims {
        self.dims
    }

    fn upper_value(&self, agent: usize, _x: &[f64], y: &[f64]) -> f64 {
        let v = &self.val[agent];
        let total: f64 = v.features.iter().zip(&v.labels).map(|(f, &l)| ce(y, f, l, self.classes)).sum();
        total / v.len() as f64
    }

    fn upper_grad_x(&self, _agent: usize, x: &[f64], _y: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    fn upper_grad_y(&self, agent: usize, _x: &[f64], y: &[f64]) -> Vec<f64> {
        let v = &self.val[agent];
        let mut g = vec![0.0; y.len()];
        for (f, &l) in v.features.iter().zip(&v.labels) {
            let (_, gj) = ce_and_grad(y, f, l, self.classes);
            vecops::axpy(1.0, &gj, &mut g);
        }
        vecops::scaled(1.0 / v.len() as f64, &g)
    }

    fn lower_value(&self, agent: usize, x: &[f64], y: &[f64]) -> f64 {
        let t = &self.train[agent];
        let total: f64 = t
            .features
            .iter()
            .zip(&t.labels)
            .zip(x)
            .map(|((f, &l), &psi)| sigmoid(psi) * ce(y, f, l, self.classes))
            .sum();
        total / t.len() as f64
    }

    fn lower_grad_x(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let t = &self.train[agent];
        let n = t.len() as f64;
        t.features
            .iter()
            .zip(&t.labels)
            .zip(x)
            .map(|((f, &l), &psi)| {
                let s = sigmoid(psi);
                s * (1.0 - s) * ce(y, f, l, self.classes) / n
            })
            .collect()
    }

    fn lower_grad_y(&self, agent: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        let t = &self.train[agent];
        let mut g = vec![0.0; y.len()];
        for ((f, &l), &psi) in t.features.iter().zip(&t.labels).zip(x) {
            let (_, gj) = ce_and_grad(y, f, l, self.classes);
            vecops::axpy(sigmoid(psi), &gj, &mut g);
        }
        vecops::scaled(1.0 / t.len() as f64, &g)
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

    fn lower_cross_jvp(&self, agent: usize, x: &[f64], y: &[f64], v: &[f64]) -> Option<Vec<f64>> {
        let t = &self.train[agent];
        let mut out = vec![0.0; y.len()];
        for (((f, &l), &psi), &vj) in t.features.iter().zip(&t.labels).zip(x).zip(v) {
            if vj == 0.0 {
                continue;
            }
            let s = sigmoid(psi);
            let (_, gj) = ce_and_grad(y, f, l, self.classes);
            vecops::axpy(s * (1.0 - s) * vj, &gj, &mut out);
        }
        Some(vecops::scaled(1.0 / t.len() as f64, &out))
    }

    fn lower_prox_jvp(&self, v: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
        self.lower.prox_jvp(v, scale, dir)
    }

    fn task_metric(&self, xs: &[Vec<f64>], _ys: &[Vec<f64>]) -> f64 {
        self.separation_auc(xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_has_exact_cardinality() {
        let p = HyperCleanParams { n_train: 100, corruption_rate: 0.3, ..Default::default() };
        let inst = gen_hyperclean(5, 3, &p).unwrap();
        for tr in &inst.train {
            assert_eq!(tr.corrupted.iter().filter(|c| **c).count(), 30);
            assert!(tr.labels.iter().all(|&l| l < 3));
        }
        assert_eq!(inst.train[0].corrupted, inst.train[2].corrupted);
    }

    #[test]
    fn initial_weights_are_one_half() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn too_few_classes_rejected() {
        let p = HyperCleanParams { classes: 1, ..Default::default() };
        assert!(matches!(gen_hyperclean(0, 2, &p), Err(ArgusError::InvalidArgument(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let p = HyperCleanParams { n_train: 8, n_val: 4, d_f: 3, ..Default::default() };
        let inst = gen_hyperclean(1, 2, &p).unwrap();
        let mut buf = Vec::new();
        inst.to_dataset().write_csv(&mut buf).unwrap();
        let back = HyperCleanInstance::from_dataset(&DatasetFile::read_csv(&buf[..]).unwrap(), 3, 0.0, 1e-3).unwrap();
        assert_eq!(back.train, inst.train);
        assert_eq!(back.val, inst.val);
    }
}
