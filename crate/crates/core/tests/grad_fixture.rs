use argus::problem::{BilevelProblem, ProblemDims};
use argus::problems::{gen_quadratic, QuadraticInstance, QuadraticParams};
use argus::validate::grad_check_suite;

/// Quadratic instance whose upper y-gradient has the wrong sign.
struct FlippedSign(QuadraticInstance);

impl BilevelProblem for FlippedSign {
    fn name(&self) -> &str {
        "flipped"
    }
    fn dims(&self) -> ProblemDims {
        self.0.dims()
    }
    fn upper_value(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        self.0.upper_value(i, x, y)
    }
    fn upper_grad_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.0.upper_grad_x(i, x, y)
    }
    fn upper_grad_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.0.upper_grad_y(i, x, y).iter().map(|v| -v).collect()
    }
    fn lower_value(&self, i: usize, x: &[f64], y: &[f64]) -> f64 {
        self.0.lower_value(i, x, y)
    }
    fn lower_grad_x(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.0.lower_grad_x(i, x, y)
    }
    fn lower_grad_y(&self, i: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.0.lower_grad_y(i, x, y)
    }
    fn upper_reg(&self, x: &[f64]) -> f64 {
        self.0.upper_reg(x)
    }
    fn upper_prox(&self, v: &[f64], scale: f64) -> Vec<f64> {
        self.0.upper_prox(v, scale)
    }
    fn lower_reg(&self, y: &[f64]) -> f64 {
        self.0.lower_reg(y)
    }
    fn lower_prox(&self, v: &[f64], scale: f64) -> Vec<f64> {
        self.0.lower_prox(v, scale)
    }
}

#[test]
fn injected_sign_error_is_caught() {
    let inst = gen_quadratic(1, 3, &QuadraticParams::default()).unwrap();
    let honest = grad_check_suite(&inst, 20, 1.0, 1);
    assert!(honest.passed, "{}", honest.detail);
    let broken = grad_check_suite(&FlippedSign(inst), 20, 1.0, 1);
    assert!(!broken.passed, "{}", broken.detail);
}
