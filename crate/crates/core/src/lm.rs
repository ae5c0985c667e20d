//! Levenberg–Marquardt for small dense least-squares problems with a
//! central-difference Jacobian.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Converged when the undamped Gauss–Newton step satisfies
    /// `‖δ‖ ≤ step_tolerance · (‖x‖ + step_tolerance)`.
    pub step_tolerance: f64,
    /// Converged when `‖Jᵀr‖∞ ≤ gradient_tolerance`.
    pub gradient_tolerance: f64,
    /// Converged when a trial step's predicted and actual reductions of
    /// `Σ r²` are both below `cost_tolerance · Σ r²`. Catches solutions on a
    /// boundary of a log-parameterised quantity (e.g. a floor → 0), where
    /// neither the step nor the gradient test can fire.
    pub cost_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iterations: 200, step_tolerance: 1e-8, gradient_tolerance: 1e-10, cost_tolerance: 1e-12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    /// `(JᵀJ)⁻¹` at the solution, in the solver's parameterisation. `None`
    /// if the normal matrix is singular.
    pub covariance: Option<DMatrix<f64>>,
    /// `Σ r²` at the solution.
    pub chi2: f64,
    pub n_residuals: usize,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

/// Minimises `Σ rᵢ(x)²`. `residuals` fills its output slice and returns
/// `false` when `x` is outside the model's domain (treated as a rejected
/// step). `fd_steps` are the absolute central-difference steps per
/// parameter.
pub fn minimize<F>(residuals: F, x0: &[f64], n_residuals: usize, fd_steps: &[f64], opts: &LmOptions) -> Option<LmOutcome>
where
    F: Fn(&[f64], &mut [f64]) -> bool,
{
    let n = x0.len();
    assert_eq!(fd_steps.len(), n);
    let eval = |x: &DVector<f64>, out: &mut DVector<f64>| -> bool {
        residuals(x.as_slice(), out.as_mut_slice()) && out.iter().all(|v| v.is_finite())
    };
    let jacobian = |x: &DVector<f64>| -> Option<DMatrix<f64>> {
        let mut j = DMatrix::zeros(n_residuals, n);
        let mut plus = DVector::zeros(n_residuals);
        let mut minus = DVector::zeros(n_residuals);
        for k in 0..n {
            let h = fd_steps[k];
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            if !eval(&xp, &mut plus) || !eval(&xm, &mut minus) {
                return None;
            }
            j.set_column(k, &((&plus - &minus) / (2.0 * h)));
        }
        Some(j)
    };

    let mut x = DVector::from_column_slice(x0);
    let mut r = DVector::zeros(n_residuals);
    if !eval(&x, &mut r) {
        return None;
    }
    let mut cost = r.norm_squared();
    let mut j = jacobian(&x)?;
    let mut a = j.transpose() * &j;
    let mut g = j.transpose() * &r;
    let max_diag = a.diagonal().iter().cloned().fold(0.0, f64::max);
    // Dimensionless: the damping term is μ·diag(JᵀJ).
    let mut mu = 1e-3;
    let mut nu = 2.0;
    let mut iterations = 0;
    // Judged on the undamped step so that the test does not depend on μ,
    // which can grow without bound once cost differences reach rounding.
    let short_step = |a: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>| {
        a.clone()
            .cholesky()
            .is_some_and(|c| c.solve(&(-g)).norm() <= opts.step_tolerance * (x.norm() + opts.step_tolerance))
    };
    let mut converged = g.amax() <= opts.gradient_tolerance || short_step(&a, &g, &x);
    // Rejected steps do not count as iterations, but are bounded too.
    let mut evaluations = 0;

    let mut trial = DVector::zeros(n_residuals);
    while !converged && iterations < opts.max_iterations && evaluations < 20 * opts.max_iterations {
        evaluations += 1;
        // Marquardt scaling of the damping by diag(JᵀJ).
        let scale: DVector<f64> = a.diagonal().map(|d| d.max(1e-12 * max_diag).max(f64::MIN_POSITIVE));
        let mut damped = a.clone();
        for k in 0..n {
            damped[(k, k)] += mu * scale[k];
        }
        let Some(chol) = damped.cholesky() else {
            mu *= nu;
            nu *= 2.0;
            continue;
        };
        let delta = chol.solve(&(-&g));
        let x_new = &x + &delta;
        let predicted = delta.dot(&(mu * scale.component_mul(&delta) - &g));
        let accepted = eval(&x_new, &mut trial) && {
            let new_cost = trial.norm_squared();
            let tiny = opts.cost_tolerance * cost;
            if predicted.abs() <= tiny && (cost - new_cost).abs() <= tiny {
                converged = true;
            }
            let rho = (cost - new_cost) / predicted;
            if rho > 0.0 && predicted > 0.0 {
                mu *= f64::max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                true
            } else {
                false
            }
        };
        if accepted {
            let Some(j_new) = jacobian(&x_new) else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            iterations += 1;
            x = x_new;
            std::mem::swap(&mut r, &mut trial);
            cost = r.norm_squared();
            j = j_new;
            a = j.transpose() * &j;
            g = j.transpose() * &r;
            converged = converged || g.amax() <= opts.gradient_tolerance || short_step(&a, &g, &x);
        } else {
            if converged {
                break;
            }
            mu *= nu;
            nu *= 2.0;
            if !mu.is_finite() {
                break;
            }
        }
    }

    let covariance = a.clone().try_inverse().filter(|c| c.iter().all(|v| v.is_finite()));
    Some(LmOutcome {
        x: x.as_slice().to_vec(),
        covariance,
        chi2: cost,
        n_residuals,
        iterations,
        converged,
        gradient_norm: g.amax(),
    })
}
