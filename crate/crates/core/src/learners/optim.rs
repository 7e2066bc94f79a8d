use serde::{Deserialize, Serialize};

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub steps: usize,
    /// Stop once the gradient norm drops below this.
    pub tolerance: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            steps: 2000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    /// Objective at the start and after every accepted step.
    pub losses: Vec<f64>,
    pub steps_run: usize,
    pub final_grad_norm: f64,
}

impl Trace {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

const MAX_HALVINGS: usize = 40;

/// Gradient descent with a fixed step that is halved whenever it would
/// increase the objective.
///
/// `objective` returns the value and gradient at a point.
pub fn minimize<F>(x0: Vec<f64>, mut objective: F, opt: &OptimizerSettings) -> (Vec<f64>, Trace)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut loss, mut grad) = objective(&x);
    let mut trace = Trace {
        losses: vec![loss],
        ..Default::default()
    };
    let mut grad_norm = norm(&grad);
    for _ in 0..opt.steps {
        if grad_norm < opt.tolerance || !grad_norm.is_finite() {
            break;
        }
        let mut lr = opt.learning_rate;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - lr * gi).collect();
            let (c_loss, c_grad) = objective(&candidate);
            if c_loss.is_finite() && c_loss <= loss {
                accepted = Some((candidate, c_loss, c_grad));
                break;
            }
            lr *= 0.5;
        }
        let Some((candidate, c_loss, c_grad)) = accepted else {
            break;
        };
        x = candidate;
        loss = c_loss;
        grad = c_grad;
        grad_norm = norm(&grad);
        trace.losses.push(loss);
        trace.steps_run += 1;
    }
    trace.final_grad_norm = grad_norm;
    (x, trace)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
