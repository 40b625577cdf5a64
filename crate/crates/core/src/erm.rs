//! Ridge-regularized empirical risk minimization and the estimation-error diagnostics built on `V_T`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg;
use crate::loss::LossSpec;
use crate::types::{ModelConstants, Observation, ParameterVector};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITERATIONS: usize = 100;
/// Above this Hessian condition number the solver takes gradient steps instead of Newton steps.
pub const MAX_NEWTON_CONDITION: f64 = 1e12;
/// Relative rounding allowance of the summed objective in the line search.
const OBJECTIVE_NOISE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
    pub objective: f64,
    /// Iterations that fell back to gradient descent.
    pub gradient_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Observation log, running estimate and `V_T = sum H(x_t, a_t) + 2 I`.
#[derive(Debug, Clone)]
pub struct ErmState {
    dim: usize,
    theta: ParameterVector,
    v: DMatrix<f64>,
    observations: Vec<Observation>,
    // Non-zero entries of each psi row, stored contiguously.
    entries: Vec<(usize, f64)>,
    offsets: Vec<usize>,
}

impl ErmState {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            theta: ParameterVector::zeros(dim),
            v: DMatrix::identity(dim, dim) * 2.0,
            observations: Vec::new(),
            entries: Vec::new(),
            offsets: vec![0],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta(&self) -> &ParameterVector {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: ParameterVector) {
        assert_eq!(theta.dim(), self.dim);
        self.theta = theta;
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Appends an observation and adds `H(x, a)` to `V`. Does not re-solve.
    pub fn ingest(&mut self, obs: Observation, loss: &LossSpec) -> Result<()> {
        if loss.dim() != self.dim {
            return Err(Error::invariant(
                "loss",
                "loss dimension does not match the state",
            ));
        }
        loss.check_response(obs.y)?;
        let row = loss.features().row(obs.x, obs.a);
        self.entries.extend(
            row.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v)),
        );
        self.offsets.push(self.entries.len());
        self.v += loss.info_matrix(obs.x, obs.a);
        self.observations.push(obs);
        Ok(())
    }

    /// `2 I + sum H` rebuilt from the log.
    pub fn recompute_v(&self, loss: &LossSpec) -> DMatrix<f64> {
        let mut v = DMatrix::identity(self.dim, self.dim) * 2.0;
        for o in &self.observations {
            v += loss.info_matrix(o.x, o.a);
        }
        v
    }

    fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Regularized objective `sum l(theta) + |theta|^2 / 2`.
    pub fn objective(&self, theta: &DVector<f64>, loss: &LossSpec) -> f64 {
        let mut total = 0.5 * theta.norm_squared();
        for (i, o) in self.observations.iter().enumerate() {
            let w: f64 = self.row(i).iter().map(|&(j, v)| v * theta[j]).sum();
            total += loss.index_terms(w, o.y).0;
        }
        total
    }

    /// Objective, gradient and Hessian of the regularized objective.
    pub fn derivatives(
        &self,
        theta: &DVector<f64>,
        loss: &LossSpec,
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut obj = 0.5 * theta.norm_squared();
        let mut grad = theta.clone();
        let mut hess = vec![0.0; d * d];
        for (i, o) in self.observations.iter().enumerate() {
            let row = self.row(i);
            let w: f64 = row.iter().map(|&(j, v)| v * theta[j]).sum();
            let (f, f1, f2) = loss.index_terms(w, o.y);
            obj += f;
            for &(j, vj) in row {
                grad[j] += f1 * vj;
                let s = f2 * vj;
                for &(k, vk) in row {
                    hess[j * d + k] += s * vk;
                }
            }
        }
        let mut h = DMatrix::from_row_slice(d, d, &hess);
        for j in 0..d {
            h[(j, j)] += 1.0;
        }
        (obj, grad, h)
    }

    /// Minimizes the regularized objective from `start`.
    pub fn fit_from(
        &self,
        loss: &LossSpec,
        start: &ParameterVector,
        options: SolverOptions,
    ) -> Result<(ParameterVector, SolverReport)> {
        let mut theta = start.as_vector().clone();
        let (mut obj, mut grad, mut hess) = self.derivatives(&theta, loss);
        let mut gradient_steps = 0;
        for iteration in 0..=options.max_iterations {
            let grad_norm = grad.norm();
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective gradient at iteration {iteration}"
                )));
            }
            if grad_norm <= options.tolerance {
                let report = SolverReport {
                    iterations: iteration,
                    final_grad_norm: grad_norm,
                    converged: true,
                    objective: obj,
                    gradient_steps,
                };
                return Ok((ParameterVector::from_vector(theta)?, report));
            }
            if iteration == options.max_iterations {
                break;
            }

            let eig = SymmetricEigen::new(hess.clone());
            let (lo, hi) = eig
                .eigenvalues
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &e| {
                    (lo.min(e), hi.max(e))
                });
            let direction = if lo > 0.0 && hi / lo <= MAX_NEWTON_CONDITION {
                let inv_grad: DVector<f64> = eig
                    .eigenvectors
                    .column_iter()
                    .zip(eig.eigenvalues.iter())
                    .fold(DVector::zeros(self.dim), |acc, (u, &l)| {
                        acc + u * (u.dot(&grad) / l)
                    });
                -inv_grad
            } else {
                gradient_steps += 1;
                -&grad
            };
            let slope = grad.dot(&direction);

            let mut step = 1.0;
            let mut accepted = false;
            while step > 1e-16 {
                let candidate = &theta + &direction * step;
                let (c_obj, c_grad, c_hess) = self.derivatives(&candidate, loss);
                let armijo = c_obj <= obj + 1e-4 * step * slope;
                // Near the optimum, objective differences drown in summation rounding; accept
                // steps that stay within that noise and reduce the gradient.
                let flat = c_obj <= obj + OBJECTIVE_NOISE * obj.abs().max(1.0)
                    && c_grad.norm() < grad_norm;
                if armijo || flat {
                    theta = candidate;
                    obj = c_obj;
                    grad = c_grad;
                    hess = c_hess;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Err(Error::NoConvergence(SolverReport {
            iterations: options.max_iterations,
            final_grad_norm: grad.norm(),
            converged: false,
            objective: obj,
            gradient_steps,
        }))
    }

    /// Warm-started re-solve; stores the new estimate.
    pub fn refit(&mut self, loss: &LossSpec, options: SolverOptions) -> Result<SolverReport> {
        let (theta, report) = self.fit_from(loss, &self.theta, options)?;
        self.theta = theta;
        Ok(report)
    }
}

/// Free-function form of [`ErmState::fit_from`] warm-started at the stored estimate.
pub fn fit(state: &ErmState, loss: &LossSpec) -> Result<(ParameterVector, SolverReport)> {
    state.fit_from(loss, state.theta(), SolverOptions::default())
}

pub fn ingest(state: &mut ErmState, obs: Observation, loss: &LossSpec) -> Result<()> {
    state.ingest(obs, loss)
}

fn check_delta(delta: f64, upper: f64) -> Result<()> {
    if !(delta > 0.0 && delta < upper)
        && !(upper == 3.0 / (std::f64::consts::PI.powi(2)) && delta == upper)
    {
        return Err(Error::Config(format!(
            "delta = {delta} outside its admissible range (0, {upper})"
        )));
    }
    Ok(())
}

/// Largest admissible delta for the refined (exploration-aware) bound.
pub fn refined_delta_max() -> f64 {
    3.0 / std::f64::consts::PI.powi(2)
}

/// Estimation-error bound
/// `8 / rho_min(V) * (ln det V + 2 ln(1/delta) + |theta*|^2_{V^-1})`.
pub fn confidence_bound(v: &DMatrix<f64>, theta_star: &ParameterVector, delta: f64) -> Result<f64> {
    check_delta(delta, 1.0)?;
    let eig = SymmetricEigen::new(v.clone());
    let rho_min = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(rho_min > 0.0) {
        return Err(Error::invariant(
            "V",
            format!("minimum eigenvalue {rho_min} must be > 0"),
        ));
    }
    let log_det: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let weighted = linalg::inverse_quadratic_form(&eig, theta_star.as_vector());
    Ok(8.0 / rho_min * (log_det + 2.0 * (1.0 / delta).ln() + weighted))
}

/// `M(eps, T, delta) = 2 + rho_H sum eps - 2 C_H (L + sqrt(2 T L))`, `L = ln(2 d T^2 / delta)`.
pub fn exploration_margin(
    sum_eps: f64,
    t: u64,
    delta: f64,
    consts: &ModelConstants,
    d: usize,
) -> Result<f64> {
    check_delta(delta, refined_delta_max())?;
    if t == 0 {
        return Err(Error::Config("M is defined for T >= 1".into()));
    }
    let tf = t as f64;
    let l = (2.0 * d as f64 * tf * tf / delta).ln();
    Ok(2.0 + consts.rho_h * sum_eps - 2.0 * consts.c_h * (l + (2.0 * tf * l).sqrt()))
}

/// Self-normalized martingale statistic: `(|S_T|^2_{V^-1}, ln det V)` with `S_T = sum ∇l(theta*)`.
pub fn self_normalized_statistic(
    state: &ErmState,
    theta_star: &ParameterVector,
    loss: &LossSpec,
) -> (f64, f64) {
    let mut s = DVector::zeros(state.dim());
    for (i, o) in state.observations().iter().enumerate() {
        let row = state.row(i);
        let w: f64 = row.iter().map(|&(j, v)| v * theta_star.as_slice()[j]).sum();
        let (_, f1, _) = loss.index_terms(w, o.y);
        for &(j, v) in row {
            s[j] += f1 * v;
        }
    }
    let eig = SymmetricEigen::new(state.v().clone());
    let log_det = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    (linalg::inverse_quadratic_form(&eig, &s), log_det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::GlmLoss;
    use crate::random::RandomStream;
    use crate::response::{sigmoid, FeatureMap, GlmSpec, Link};

    fn loss_d2() -> LossSpec {
        let glm = GlmSpec::new(FeatureMap::segment_affine(1), Link::Logistic).unwrap();
        LossSpec::Glm(GlmLoss::new(glm, 3.0).unwrap())
    }

    fn synthetic(n: usize, seed: u64, loss: &LossSpec) -> ErmState {
        let mut rng = RandomStream::from_seed(seed);
        let mut state = ErmState::new(2);
        for t in 0..n {
            let a = 0.2 + rng.uniform();
            let p = sigmoid(1.5 - 2.0 * a);
            let y = if rng.uniform() < p { 1.0 } else { 0.0 };
            state
                .ingest(
                    Observation {
                        t: t as u64 + 1,
                        x: 0,
                        a,
                        y,
                        explored: true,
                    },
                    loss,
                )
                .unwrap();
        }
        state
    }

    #[test]
    fn empty_log_fits_zero() {
        let loss = loss_d2();
        let state = ErmState::new(2);
        let start = ParameterVector::new(vec![0.7, -1.3]).unwrap();
        let (theta, report) = state
            .fit_from(&loss, &start, SolverOptions::default())
            .unwrap();
        assert!(report.converged);
        assert!(theta.norm() < 1e-12);
        let (theta, _) = fit(&state, &loss).unwrap();
        assert_eq!(theta.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn single_observation_certificate() {
        let loss = loss_d2();
        let state = synthetic(1, 4, &loss);
        let (theta, report) = fit(&state, &loss).unwrap();
        let (_, g, _) = state.derivatives(theta.as_vector(), &loss);
        assert!(report.converged && g.norm() <= 1e-8);
        assert_eq!(report.final_grad_norm, g.norm());
    }

    #[test]
    fn ingest_accumulates_information() {
        let loss = loss_d2();
        let mut state = ErmState::new(2);
        let obs = Observation {
            t: 1,
            x: 0,
            a: 0.5,
            y: 1.0,
            explored: true,
        };
        state.ingest(obs, &loss).unwrap();
        let h = loss.info_matrix(0, 0.5);
        assert_eq!(state.v(), &(DMatrix::identity(2, 2) * 2.0 + &h));
        state.ingest(Observation { t: 2, ..obs }, &loss).unwrap();
        assert!(
            (state.v() - (DMatrix::identity(2, 2) * 2.0 + &h * 2.0))
                .abs()
                .max()
                < 1e-15
        );
        assert_eq!(state.n_obs(), 2);
    }

    #[test]
    fn information_keeps_v_above_2i() {
        let loss = loss_d2();
        let state = synthetic(100, 9, &loss);
        assert!(linalg::min_eigenvalue(state.v()) >= 2.0 - 1e-9);
        assert!((state.recompute_v(&loss) - state.v()).abs().max() < 1e-10);
        assert!(linalg::max_asymmetry(state.v()) <= 1e-12);
    }

    #[test]
    fn warm_start_matches_cold_start() {
        let loss = loss_d2();
        let state = synthetic(200, 21, &loss);
        let cold = state
            .fit_from(&loss, &ParameterVector::zeros(2), SolverOptions::default())
            .unwrap()
            .0;
        let warm_start = ParameterVector::new(vec![2.0, -3.0]).unwrap();
        let warm = state
            .fit_from(&loss, &warm_start, SolverOptions::default())
            .unwrap()
            .0;
        assert!(cold.distance_sq(&warm).sqrt() <= 1e-7);
        assert!(
            state.objective(cold.as_vector(), &loss) <= state.objective(&DVector::zeros(2), &loss)
        );
    }

    #[test]
    fn fit_is_deterministic() {
        let loss = loss_d2();
        let state = synthetic(150, 2, &loss);
        let a = fit(&state, &loss).unwrap().0;
        let b = fit(&state, &loss).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn non_convergence_reports() {
        let loss = loss_d2();
        let state = synthetic(50, 3, &loss);
        let options = SolverOptions {
            tolerance: 1e-8,
            max_iterations: 0,
        };
        let start = ParameterVector::new(vec![5.0, 5.0]).unwrap();
        match state.fit_from(&loss, &start, options) {
            Err(Error::NoConvergence(report)) => {
                assert!(!report.converged && report.final_grad_norm > 1e-8)
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn confidence_bound_identity_case() {
        let v = DMatrix::identity(2, 2) * 2.0;
        let theta = ParameterVector::new(vec![1.0, 0.0]).unwrap();
        let b = confidence_bound(&v, &theta, 0.5).unwrap();
        let ln2 = 2f64.ln();
        assert!((b - 4.0 * (4.0 * ln2 + 0.5)).abs() < 1e-12);
        assert!(confidence_bound(&v, &theta, 0.1).unwrap() > b);
        assert!(confidence_bound(&v, &theta, 0.0).is_err());
        assert!(confidence_bound(&v, &theta, 1.0).is_err());
    }

    fn consts(rho_h: f64, c_h: f64) -> ModelConstants {
        ModelConstants {
            c1: 0.1,
            c2: 0.25,
            c_h,
            rho_h,
            l_a: 1.0,
            gamma_a: 0.5,
            l_theta: 1.0,
            w_bound: 3.0,
            theta_norm_bound: 1.0,
        }
    }

    #[test]
    fn exploration_margin_examples() {
        let c = consts(0.01, 0.05);
        let delta = 0.01;
        let m = exploration_margin(0.0, 1, delta, &c, 4).unwrap();
        let l = (8.0f64 / delta).ln();
        assert!((m - (2.0 - 0.1 * (l + (2.0 * l).sqrt()))).abs() < 1e-12);

        let zero_rho = consts(0.0, 0.05);
        assert_eq!(
            exploration_margin(0.0, 50, delta, &zero_rho, 4).unwrap(),
            exploration_margin(40.0, 50, delta, &zero_rho, 4).unwrap()
        );
        assert!(exploration_margin(1.0, 1, 0.5, &c, 4).is_err());
        assert!(exploration_margin(1.0, 1, refined_delta_max(), &c, 4).is_ok());
    }
}
