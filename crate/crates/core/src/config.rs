//! JSON run configuration: parsing with exhaustive diagnostics, defaults,
//! and construction of the problem instance and engine settings.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::cuts::CutGradMode;
use crate::engine::{ActivationParams, EngineConfig, HyperParams};
use crate::error::{ArgusError, Result};
use crate::problem::BilevelProblem;
use crate::problems::data::DatasetFile;
use crate::problems::{
    gen_continual, gen_hyperclean, gen_quadratic, ContinualInstance, ContinualParams, HyperCleanInstance,
    HyperCleanParams, QuadraticInstance, QuadraticParams,
};
use crate::scheduler::{DelayModel, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Hyperclean,
    Quadratic,
    Continual,
}

/// A scalar applied to every agent, or one value per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAgent {
    Scalar(f64),
    List(Vec<f64>),
}

impl PerAgent {
    pub fn expand(&self, agents: usize) -> Vec<f64> {
        match self {
            PerAgent::Scalar(v) => vec![*v; agents],
            PerAgent::List(v) => v.clone(),
        }
    }

    fn check(&self, key: &str, agents: usize, ok: impl Fn(f64) -> bool, range: &str, errs: &mut Vec<String>) {
        if let PerAgent::List(v) = self {
            if v.len() != agents {
                errs.push(format!("{key}: expected {agents} entries (one per agent), got {}", v.len()));
            }
        }
        for v in self.expand(agents) {
            if !ok(v) {
                errs.push(format!("{key}: value {v} outside {range}"));
                break;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelaySpec {
    pub compute_mean: PerAgent,
    #[serde(default)]
    pub compute_jitter: f64,
    #[serde(default)]
    pub comm_mean: f64,
    #[serde(default)]
    pub comm_jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub seed: u64,
    pub mode: Mode,
    #[serde(rename = "N")]
    pub agents: usize,
    pub p_c: f64,
    pub static_topology: bool,
    pub p_active: PerAgent,
    pub tau: usize,
    pub round_length: Option<f64>,
    pub stragglers_per_round: usize,
    pub straggler_multiplier: f64,
    pub delay: Option<DelaySpec>,
    #[serde(flatten)]
    pub hyper: HyperParams,
    pub cut_grad: CutGradMode,
    pub stop_tol: Option<f64>,
    pub target_upper_loss: Option<f64>,
    pub topology_dump: Option<PathBuf>,
    pub cuts_dump: Option<PathBuf>,
    pub dataset_dump: Option<PathBuf>,
    pub dataset_load: Option<PathBuf>,
    pub hyperclean: HyperCleanParams,
    pub quadratic: QuadraticParams,
    pub continual: ContinualParams,
}

pub const KNOWN_KEYS: &[&str] = &[
    "problem",
    "seed",
    "mode",
    "N",
    "p_c",
    "static_topology",
    "p_active",
    "tau",
    "round_length",
    "stragglers_per_round",
    "straggler_multiplier",
    "delay",
    "eta_x",
    "eta_y",
    "eta_lambda",
    "eta_theta",
    "eta_y_ll",
    "eta_phi",
    "mu",
    "lambda1",
    "epsilon",
    "iota",
    "T1",
    "K",
    "M",
    "T",
    "L_est",
    "cut_grad",
    "stop_tol",
    "target_upper_loss",
    "topology_dump",
    "cuts_dump",
    "dataset_dump",
    "dataset_load",
    "hyperclean",
    "quadratic",
    "continual",
];

impl RunConfig {
    /// Defaults for `problem`; `T1` is capped at `T`.
    pub fn defaults(problem: ProblemKind) -> Self {
        Self {
            problem,
            seed: 0,
            mode: Mode::Argus,
            agents: 10,
            p_c: 0.5,
            static_topology: false,
            p_active: PerAgent::Scalar(1.0),
            tau: 10,
            round_length: None,
            stragglers_per_round: 0,
            straggler_multiplier: 10.0,
            delay: None,
            hyper: HyperParams::default(),
            cut_grad: CutGradMode::Fd,
            stop_tol: None,
            target_upper_loss: None,
            topology_dump: None,
            cuts_dump: None,
            dataset_dump: None,
            dataset_load: None,
            hyperclean: HyperCleanParams::default(),
            quadratic: QuadraticParams::default(),
            continual: ContinualParams::default(),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ArgusError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ArgusError::Config(vec![format!("malformed JSON: {e}")]))?;
        Self::from_value(&value)
    }

    /// Collects unknown keys, type mismatches and constraint violations
    /// before reporting.
    pub fn from_value(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| ArgusError::Config(vec!["configuration must be a JSON object".into()]))?;
        let mut errs: Vec<String> = obj
            .keys()
            .filter(|k| !KNOWN_KEYS.contains(&k.as_str()))
            .map(|k| format!("unknown key \"{k}\""))
            .collect();

        let problem: Option<ProblemKind> = match obj.get("problem") {
            None => {
                errs.push("missing required key \"problem\"".into());
                None
            }
            Some(v) => take_value("problem", v, &mut errs),
        };
        let mut cfg = Self::defaults(problem.unwrap_or(ProblemKind::Quadratic));
        let h = &mut cfg.hyper;
        let t1_given = obj.contains_key("T1");
        macro_rules! field {
            ($key:literal, $slot:expr) => {
                if let Some(v) = take::<_>(obj, $key, &mut errs) {
                    $slot = v;
                }
            };
        }
        field!("eta_x", h.eta_x);
        field!("eta_y", h.eta_y);
        field!("eta_lambda", h.eta_lambda);
        field!("eta_theta", h.eta_theta);
        field!("eta_y_ll", h.eta_y_ll);
        field!("eta_phi", h.eta_phi);
        field!("mu", h.mu);
        field!("lambda1", h.lambda1);
        field!("epsilon", h.epsilon);
        field!("iota", h.iota);
        field!("T1", h.t1);
        field!("K", h.k);
        field!("M", h.m);
        field!("T", h.t);
        field!("L_est", h.l_est);
        if !t1_given {
            h.t1 = h.t1.min(h.t);
        }
        field!("seed", cfg.seed);
        field!("mode", cfg.mode);
        field!("N", cfg.agents);
        field!("p_c", cfg.p_c);
        field!("static_topology", cfg.static_topology);
        field!("p_active", cfg.p_active);
        field!("tau", cfg.tau);
        field!("stragglers_per_round", cfg.stragglers_per_round);
        field!("straggler_multiplier", cfg.straggler_multiplier);
        field!("cut_grad", cfg.cut_grad);
        field!("hyperclean", cfg.hyperclean);
        field!("quadratic", cfg.quadratic);
        field!("continual", cfg.continual);
        macro_rules! optional {
            ($key:literal, $slot:expr) => {
                if obj.get($key).is_some_and(|v| !v.is_null()) {
                    if let Some(v) = take::<_>(obj, $key, &mut errs) {
                        $slot = Some(v);
                    }
                }
            };
        }
        optional!("round_length", cfg.round_length);
        optional!("delay", cfg.delay);
        optional!("stop_tol", cfg.stop_tol);
        optional!("target_upper_loss", cfg.target_upper_loss);
        optional!("topology_dump", cfg.topology_dump);
        optional!("cuts_dump", cfg.cuts_dump);
        optional!("dataset_dump", cfg.dataset_dump);
        optional!("dataset_load", cfg.dataset_load);

        if problem.is_some() {
            cfg.check(&mut errs);
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(ArgusError::Config(errs))
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Constraint checks; every violation is appended to `errs`.
    pub fn check(&self, errs: &mut Vec<String>) {
        if self.agents == 0 {
            errs.push("N must be >= 1".into());
        }
        if !(self.p_c > 0.0 && self.p_c <= 1.0) {
            errs.push(format!("p_c must lie in (0, 1], got {}", self.p_c));
        }
        self.p_active.check("p_active", self.agents, |p| p > 0.0 && p <= 1.0, "(0, 1]", errs);
        if self.tau == 0 {
            errs.push("tau: staleness bound must be >= 1".into());
        }
        if let Err(e) = self.hyper.validate() {
            errs.extend(e);
        }
        if self.cut_grad == CutGradMode::Analytic && self.hyper.k != 1 {
            errs.push("cut_grad \"analytic\" requires K = 1".into());
        }
        if let Some(s) = self.stop_tol {
            if !(s > 0.0) {
                errs.push(format!("stop_tol must be > 0, got {s}"));
            }
        }
        if let Some(t) = self.target_upper_loss {
            if !t.is_finite() {
                errs.push("target_upper_loss must be finite".into());
            }
        }
        match &self.delay {
            Some(d) => {
                d.compute_mean.check("delay.compute_mean", self.agents, |v| v > 0.0, "(0, inf)", errs);
                match self.round_length {
                    None => errs.push("round_length is required with a delay section".into()),
                    Some(_) => {
                        if let Err(e) = self.delay_model().expect("delay present").validate() {
                            errs.extend(e.into_iter().filter(|m| !m.starts_with("delay.compute_mean")));
                        }
                    }
                }
            }
            None => {
                if self.stragglers_per_round > 0 {
                    errs.push("stragglers_per_round needs a delay section".into());
                }
                if self.round_length.is_some() {
                    errs.push("round_length needs a delay section".into());
                }
            }
        }
        let problem_errs = match self.problem {
            ProblemKind::Hyperclean => self.hyperclean.validate(),
            ProblemKind::Continual => self.continual.validate(),
            ProblemKind::Quadratic => {
                let q = &self.quadratic;
                let mut e = Vec::new();
                if q.n == 0 || q.m == 0 {
                    e.push("quadratic.n and quadratic.m must be >= 1".to_string());
                }
                if !(q.b_scale > 0.0 && q.b_scale <= 2.0) {
                    e.push(format!("quadratic.b_scale must lie in (0, 2], got {}", q.b_scale));
                }
                if !(q.l1_upper >= 0.0 && q.l1_lower >= 0.0) {
                    e.push("quadratic l1 weights must be >= 0".into());
                }
                if e.is_empty() {
                    Ok(())
                } else {
                    Err(e)
                }
            }
        };
        if let Err(e) = problem_errs {
            errs.extend(e);
        }
        if self.problem == ProblemKind::Quadratic && (self.dataset_dump.is_some() || self.dataset_load.is_some()) {
            errs.push("dataset_dump / dataset_load apply to hyperclean and continual only".into());
        }
    }

    pub fn delay_model(&self) -> Option<DelayModel> {
        let d = self.delay.as_ref()?;
        Some(DelayModel {
            compute_mean: d.compute_mean.expand(self.agents),
            compute_jitter: d.compute_jitter,
            comm_mean: d.comm_mean,
            comm_jitter: d.comm_jitter,
            stragglers_per_round: self.stragglers_per_round,
            straggler_multiplier: self.straggler_multiplier,
            round_length: self.round_length.unwrap_or(0.0),
        })
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            mode: self.mode,
            seed: self.seed,
            p_c: self.p_c,
            static_topology: self.static_topology,
            activation: ActivationParams {
                p_active: self.p_active.expand(self.agents),
                tau: self.tau,
                delay: self.delay_model(),
            },
            hyper: self.hyper.clone(),
            cut_grad: self.cut_grad,
            stop_tol: self.stop_tol,
        }
    }

    /// Generates (or loads) the problem instance.
    pub fn build_problem(&self) -> Result<BuiltProblem> {
        let loaded = match &self.dataset_load {
            Some(p) => Some(DatasetFile::read_csv(std::fs::File::open(p)?)?),
            None => None,
        };
        let built = match self.problem {
            ProblemKind::Quadratic => BuiltProblem::Quadratic(Arc::new(gen_quadratic(self.seed, self.agents, &self.quadratic)?)),
            ProblemKind::Hyperclean => {
                let p = &self.hyperclean;
                let inst = match &loaded {
                    Some(f) => HyperCleanInstance::from_dataset(f, p.classes, p.l1_upper, p.l1_lower)?,
                    None => gen_hyperclean(self.seed, self.agents, p)?,
                };
                BuiltProblem::Hyperclean(Arc::new(inst))
            }
            ProblemKind::Continual => {
                let inst = match &loaded {
                    Some(f) => ContinualInstance::from_dataset(f, &self.continual)?,
                    None => gen_continual(self.seed, self.agents, &self.continual)?,
                };
                BuiltProblem::Continual(Arc::new(inst))
            }
        };
        if built.as_dyn().dims().agents != self.agents {
            return Err(ArgusError::Config(vec![format!(
                "dataset has {} agents but N = {}",
                built.as_dyn().dims().agents,
                self.agents
            )]));
        }
        if let Some(path) = &self.dataset_dump {
            if let Some(ds) = built.dataset() {
                ds.write_csv(std::fs::File::create(path)?)?;
            }
        }
        Ok(built)
    }
}

/// A generated instance, kept typed for instance-specific reporting.
#[derive(Clone)]
pub enum BuiltProblem {
    Quadratic(Arc<QuadraticInstance>),
    Hyperclean(Arc<HyperCleanInstance>),
    Continual(Arc<ContinualInstance>),
}

impl BuiltProblem {
    pub fn as_dyn(&self) -> Arc<dyn BilevelProblem> {
        match self {
            BuiltProblem::Quadratic(p) => p.clone(),
            BuiltProblem::Hyperclean(p) => p.clone(),
            BuiltProblem::Continual(p) => p.clone(),
        }
    }

    pub fn dataset(&self) -> Option<DatasetFile> {
        match self {
            BuiltProblem::Quadratic(_) => None,
            BuiltProblem::Hyperclean(p) => Some(p.to_dataset()),
            BuiltProblem::Continual(p) => Some(p.to_dataset()),
        }
    }
}

fn take_value<T: DeserializeOwned>(key: &str, v: &Value, errs: &mut Vec<String>) -> Option<T> {
    match serde_json::from_value(v.clone()) {
        Ok(x) => Some(x),
        Err(e) => {
            errs.push(format!("{key}: {e}"));
            None
        }
    }
}

fn take<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errs: &mut Vec<String>) -> Option<T> {
    obj.get(key).and_then(|v| take_value(key, v, errs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json_str(r#"{"problem": "hyperclean", "seed": 1}"#).unwrap();
        assert_eq!(c.agents, 10);
        assert_eq!(c.p_c, 0.5);
        assert_eq!(c.seed, 1);
        assert_eq!(c.hyper.t1, 50);
    }

    #[test]
    fn range_and_period_diagnostics() {
        let err = RunConfig::from_json_str(r#"{"problem": "quadratic", "p_c": 1.5, "iota": 0}"#).unwrap_err();
        let ArgusError::Config(msgs) = err else { panic!("expected config error") };
        assert!(msgs.iter().any(|m| m.contains("p_c")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.contains("cut period")), "{msgs:?}");
    }

    #[test]
    fn all_failures_listed() {
        let err = RunConfig::from_json_str(r#"{"bogus": 1, "T": "many", "tau": 0}"#).unwrap_err();
        let ArgusError::Config(msgs) = err else { panic!("expected config error") };
        assert!(msgs.iter().any(|m| m.contains("bogus")));
        assert!(msgs.iter().any(|m| m.contains("problem")));
        assert!(msgs.iter().any(|m| m.starts_with("T:")));
        assert_eq!(msgs.len(), 3, "{msgs:?}");
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::from_json_str(
            r#"{"problem": "continual", "seed": 4, "mode": "argus-s", "p_active": [0.5, 1.0], "N": 2,
                "delay": {"compute_mean": 1.0, "compute_jitter": 0.1}, "round_length": 1.5,
                "stragglers_per_round": 1, "T": 20, "T1": 10, "cut_grad": "analytic"}"#,
        )
        .unwrap();
        let back = RunConfig::from_value(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
