//! Steepest descent with backtracking Armijo line search.

/// Smallest point motion (mm) a trial step may cause before the line search gives up.
const MIN_MOTION_MM: f64 = 1e-7;

pub(crate) trait Problem {
    fn value(&self, x: &[f64]) -> Option<f64>;
    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
    /// Largest point motion (mm) caused by a unit step along `dir` from `x`.
    fn motion(&self, x: &[f64], dir: &[f64]) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Settings {
    pub max_iters: usize,
    pub tol: f64,
    pub window: usize,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_step_mm: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Outcome {
    pub x: Vec<f64>,
    /// Cost at the start point followed by the cost after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Returns `None` only when the objective is undefined at `x0`.
pub(crate) fn minimize<P: Problem>(problem: &P, x0: Vec<f64>, s: &Settings) -> Option<Outcome> {
    let mut x = x0;
    let (mut cost, mut grad) = problem.value_and_gradient(&x)?;
    let mut trace = vec![cost];
    let mut alpha_prev: Option<f64> = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < s.max_iters {
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        let motion = problem.motion(&x, &grad);
        if g2 == 0.0 || motion == 0.0 || !g2.is_finite() {
            converged = true;
            break;
        }
        let cap = s.max_step_mm / motion;
        let mut alpha = alpha_prev.map_or(cap, |a| (2.0 * a).min(cap));
        let mut accepted = None;
        while alpha * motion > MIN_MOTION_MM {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi - alpha * gi).collect();
            if let Some(c) = problem.value(&trial) {
                if c <= cost - s.armijo_c * alpha * g2 {
                    accepted = Some(trial);
                    break;
                }
            }
            alpha *= s.shrink;
        }
        let Some(trial) = accepted else {
            // no descent possible along the gradient at any meaningful step
            converged = true;
            break;
        };
        let Some((c, g)) = problem.value_and_gradient(&trial) else {
            break;
        };
        x = trial;
        cost = c;
        grad = g;
        trace.push(cost);
        alpha_prev = Some(alpha);
        iterations += 1;
        if trace.len() > s.window {
            let before = trace[trace.len() - 1 - s.window];
            if before - cost <= s.tol * before.abs() {
                converged = true;
                break;
            }
        }
    }
    Some(Outcome {
        x,
        trace,
        iterations,
        converged,
    })
}
