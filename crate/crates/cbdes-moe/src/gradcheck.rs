//! Central finite-difference gradient checking.
//!
//! Rebuilds the forward graph with perturbed inputs to estimate each partial
//! derivative numerically, then compares against one reverse-mode pass. Used
//! by the test suites; kept public so examples can demonstrate it.

use crate::autodiff::{Graph, Mode, Value};
use crate::tensor::Tensor;

/// Settings for a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared absolutely at `rel_tol * floor`.
    pub floor: f64,
    pub mode: Mode,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-3,
            mode: Mode::Train,
        }
    }
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckResult {
    /// Worst relative error over every input element.
    pub max_rel_error: f64,
    /// Number of partial derivatives compared.
    pub checked: usize,
    /// (input index, element index, analytic, numeric) for the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of `build`'s scalar output against
/// central finite differences over every element of every input.
///
/// `build` receives gradient-tracked leaves in the order of `inputs` and must
/// assemble a scalar loss from them.
pub fn check_gradients<F>(inputs: &[Tensor], config: GradCheckConfig, build: F) -> GradCheckResult
where
    F: Fn(&mut Graph, &[Value]) -> Value,
{
    // analytic pass
    let mut g = Graph::new(config.mode);
    let vars: Vec<Value> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(
        g.data_of(loss).len(),
        1,
        "gradcheck requires a scalar loss"
    );
    g.backward(loss).expect("backward failed in gradcheck");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad_of(v).map(|s| s.to_vec()).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new(config.mode);
        let vars: Vec<Value> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.data_of(loss)[0]
    };

    let mut result = GradCheckResult {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        let grads = &analytic[pi];
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[pi].data_mut()[ei] = orig + config.step;
            let up = eval(&work);
            work[pi].data_mut()[ei] = orig - config.step;
            let down = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * config.step);
            let a = if grads.is_empty() { 0.0 } else { grads[ei] };
            let denom = a.abs().max(numeric.abs()).max(config.floor);
            let err = (a - numeric).abs() / denom;
            result.checked += 1;
            if err > result.max_rel_error {
                result.max_rel_error = err;
                result.worst = Some((pi, ei, a, numeric));
            }
        }
    }
    result
}
