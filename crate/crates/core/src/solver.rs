//! Penalized M-estimation for fixed penalty levels: local quadratic approximation of the
//! penalty plus iteratively reweighted least squares, with hard zeroing of small components.

use nalgebra::{DMatrix, DVector};

use crate::error::{PlamError, Result};
use crate::linalg::{solve_spd_ridged, weighted_normal_equations};
use crate::loss::LossSpec;
use crate::model::{Dataset, DesignMatrix, PlamFit};
use crate::penalty::{LambdaVector, PenaltySpec};
use crate::spline::gram_norm;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Relative step size below which the iteration stops.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Linear coefficients and block norms below this are set to zero for good.
    pub zero_threshold: f64,
    /// Diagonal ridge relative to the mean diagonal of each linear system.
    pub ridge_floor: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { epsilon: 1e-6, max_iter: 200, zero_threshold: 1e-4, ridge_floor: 1e-10 }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !(self.zero_threshold >= 0.0) || !(self.ridge_floor >= 0.0) || self.max_iter == 0 {
            return Err(PlamError::InvalidConfig(format!("invalid solver options {self:?}")));
        }
        Ok(())
    }
}

/// `Σ(b0, d0)`: a diagonal part for the linear coefficients and one scaled Gram block per
/// additive component. Components whose anchor is exactly zero carry no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LqaMatrix {
    pub diag_linear: Vec<f64>,
    pub blocks_additive: Vec<DMatrix<f64>>,
}

impl LqaMatrix {
    pub fn dim(&self) -> usize {
        self.diag_linear.len() + self.blocks_additive.iter().map(|b| b.nrows()).sum::<usize>()
    }

    /// Dense block-diagonal form in design column order.
    pub fn assemble(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (s, v) in self.diag_linear.iter().enumerate() {
            out[(s, s)] = *v;
        }
        let mut start = self.diag_linear.len();
        for b in &self.blocks_additive {
            let k = b.nrows();
            out.view_mut((start, start), (k, k)).copy_from(b);
            start += k;
        }
        out
    }
}

/// Builds `Σ(b0, d0)` with entries `p'(|t0|)/(2|t0|)`; zero anchors are excluded.
pub fn lqa_matrix(
    beta0: &[f64],
    d0: &[Vec<f64>],
    lambdas: &LambdaVector,
    spec: &PenaltySpec,
    grams: &[&DMatrix<f64>],
) -> Result<LqaMatrix> {
    if beta0.len() != lambdas.lambda1.len() || d0.len() != lambdas.lambda2.len() || d0.len() != grams.len() {
        return Err(PlamError::DimensionMismatch("anchor, penalty levels and Gram matrices disagree".into()));
    }
    let factor = |t: f64, l: f64| if t == 0.0 { 0.0 } else { spec.derivative_unchecked(t, l) / (2.0 * t) };
    let diag_linear = beta0.iter().zip(&lambdas.lambda1).map(|(b, &l)| factor(b.abs(), l)).collect();
    let blocks_additive =
        d0.iter().zip(grams).zip(&lambdas.lambda2).map(|((d, h), &l)| *h * factor(gram_norm(h, d), l)).collect();
    Ok(LqaMatrix { diag_linear, blocks_additive })
}

/// One reweighted step on the active columns:
/// `θ⁺ = ((1/n)Σ (w_i/σ²) W_i W_iᵀ + 2Σ)⁻¹ (1/n)Σ (w_i/σ²) W_i y_i`, with `w_i` taken at `θ`.
/// Coordinates outside `active_cols` stay exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn irls_step(
    theta: &DVector<f64>,
    design: &DesignMatrix,
    y_centered: &DVector<f64>,
    sigma: f64,
    lqa: &DMatrix<f64>,
    loss: &LossSpec,
    active_cols: &[usize],
    ridge_floor: f64,
) -> Result<DVector<f64>> {
    let n = design.n() as f64;
    let r = y_centered - &design.w * theta;
    let scale = loss.objective_scale() / (n * sigma * sigma);
    let weights: Vec<f64> = r.iter().map(|&v| loss.weight(v / sigma) * scale).collect();
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(PlamError::SingularSystem("every observation has zero weight".into()));
    }
    let (mut a, rhs) = weighted_normal_equations(&design.w, y_centered, &weights, active_cols);
    for (i, &ci) in active_cols.iter().enumerate() {
        for (j, &cj) in active_cols.iter().enumerate() {
            a[(i, j)] += 2.0 * lqa[(ci, cj)];
        }
    }
    let sol = solve_spd_ridged(&a, &rhs, ridge_floor)?;
    let mut out = DVector::zeros(theta.len());
    for (i, &c) in active_cols.iter().enumerate() {
        out[c] = sol[i];
    }
    Ok(out)
}

/// Fixed pieces of a penalized problem: centered responses, scale, loss and penalty.
#[derive(Debug, Clone)]
pub struct PenalizedProblem<'a> {
    pub design: &'a DesignMatrix,
    pub y_centered: DVector<f64>,
    pub sigma: f64,
    pub loss: LossSpec,
    pub penalty: PenaltySpec,
    pub grams: Vec<&'a DMatrix<f64>>,
}

/// Result of one penalized solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub theta: DVector<f64>,
    pub active_linear: Vec<bool>,
    pub active_additive: Vec<bool>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    /// Objective after each accepted iterate, starting with the anchor.
    pub trace: Vec<f64>,
}

impl<'a> PenalizedProblem<'a> {
    pub fn new(
        data: &Dataset,
        design: &'a DesignMatrix,
        grams: Vec<&'a DMatrix<f64>>,
        mu: f64,
        sigma: f64,
        loss: LossSpec,
        penalty: PenaltySpec,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(PlamError::InvalidConfig(format!("scale must be positive, got {sigma}")));
        }
        if design.n() != data.n() || grams.len() != design.block_index.len() {
            return Err(PlamError::DimensionMismatch("design does not match data or bases".into()));
        }
        penalty.validate()?;
        if !penalty.supports_lqa() {
            return Err(PlamError::InvalidHyperparameter(format!("{penalty:?} has no local quadratic approximation")));
        }
        let y_centered = data.y.map(|v| v - mu);
        Ok(PenalizedProblem { design, y_centered, sigma, loss, penalty, grams })
    }

    fn split(&self, theta: &DVector<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let q = self.design.q;
        let b = theta.as_slice()[..q].to_vec();
        let d = self.design.block_index.iter().map(|r| theta.as_slice()[r.clone()].to_vec()).collect();
        (b, d)
    }

    /// `(s/n) Σ ρ(r_i/σ) + J(θ)`, with `s` the loss's [`LossSpec::objective_scale`].
    pub fn objective(&self, theta: &DVector<f64>, lambdas: &LambdaVector) -> f64 {
        let r = &self.y_centered - &self.design.w * theta;
        let n = r.len() as f64;
        let fit: f64 = self.loss.objective_scale() * r.iter().map(|&v| self.loss.rho(v / self.sigma)).sum::<f64>() / n;
        let (b, d) = self.split(theta);
        let mut pen = 0.0;
        for (bs, &l) in b.iter().zip(&lambdas.lambda1) {
            pen += self.penalty.value(*bs, l);
        }
        for ((dj, h), &l) in d.iter().zip(&self.grams).zip(&lambdas.lambda2) {
            pen += self.penalty.value(gram_norm(h, dj), l);
        }
        fit + pen
    }

    /// Runs the reweighted iteration from `theta0` until the relative step drops below
    /// `epsilon`. Without convergence the best iterate is returned with `converged = false`.
    pub fn solve(&self, lambdas: &LambdaVector, theta0: &DVector<f64>, opts: &SolverOptions) -> Result<Solution> {
        opts.validate()?;
        lambdas.validate()?;
        let q = self.design.q;
        let p = self.design.block_index.len();
        if lambdas.lambda1.len() != q || lambdas.lambda2.len() != p || theta0.len() != self.design.ncols() {
            return Err(PlamError::DimensionMismatch("penalty levels or start do not match the design".into()));
        }
        let mut theta = theta0.clone();
        let mut active_linear = vec![true; q];
        let mut active_additive = vec![true; p];
        self.hard_zero(&mut theta, &mut active_linear, &mut active_additive, opts.zero_threshold);

        let mut objective = self.objective(&theta, lambdas);
        let mut trace = vec![objective];
        let mut best = (objective, theta.clone(), active_linear.clone(), active_additive.clone());
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iter {
            let cols = self.active_columns(&active_linear, &active_additive);
            if cols.is_empty() {
                converged = true;
                break;
            }
            iterations += 1;
            let (b, d) = self.split(&theta);
            let lqa = lqa_matrix(&b, &d, lambdas, &self.penalty, &self.grams)?.assemble();
            let mut next = irls_step(
                &theta,
                self.design,
                &self.y_centered,
                self.sigma,
                &lqa,
                &self.loss,
                &cols,
                opts.ridge_floor,
            )?;
            self.hard_zero(&mut next, &mut active_linear, &mut active_additive, opts.zero_threshold);
            let step = (&next - &theta).norm();
            let size = theta.norm();
            theta = next;
            objective = self.objective(&theta, lambdas);
            trace.push(objective);
            if objective <= best.0 {
                best = (objective, theta.clone(), active_linear.clone(), active_additive.clone());
            }
            if step == 0.0 || step < opts.epsilon * size {
                converged = true;
                break;
            }
        }
        if !converged {
            log::debug!("penalized solve stopped after {iterations} iterations without converging");
            let (objective, theta, active_linear, active_additive) = best;
            return Ok(Solution { theta, active_linear, active_additive, iterations, converged, objective, trace });
        }
        Ok(Solution { theta, active_linear, active_additive, iterations, converged, objective, trace })
    }

    fn active_columns(&self, active_linear: &[bool], active_additive: &[bool]) -> Vec<usize> {
        let mut cols: Vec<usize> = (0..self.design.q).filter(|&s| active_linear[s]).collect();
        for (j, r) in self.design.block_index.iter().enumerate() {
            if active_additive[j] {
                cols.extend(r.clone());
            }
        }
        cols
    }

    fn hard_zero(
        &self,
        theta: &mut DVector<f64>,
        active_linear: &mut [bool],
        active_additive: &mut [bool],
        delta: f64,
    ) {
        for s in 0..self.design.q {
            if !active_linear[s] || theta[s].abs() < delta || theta[s] == 0.0 {
                active_linear[s] = false;
                theta[s] = 0.0;
            }
        }
        for (j, r) in self.design.block_index.iter().enumerate() {
            let norm = gram_norm(self.grams[j], &theta.as_slice()[r.clone()]);
            if !active_additive[j] || norm < delta || norm == 0.0 {
                active_additive[j] = false;
                theta.rows_mut(r.start, r.len()).fill(0.0);
            }
        }
    }
}

/// Penalized fit at fixed levels, started from `init` (which also supplies `μ̂` and the loss).
pub fn solve_penalized(
    data: &Dataset,
    design: &DesignMatrix,
    lambdas: &LambdaVector,
    penalty: &PenaltySpec,
    init: &PlamFit,
    sigma_hat: f64,
    opts: &SolverOptions,
) -> Result<PlamFit> {
    let grams: Vec<&DMatrix<f64>> = init.bases.iter().map(|b| b.gram()).collect();
    let problem = PenalizedProblem::new(data, design, grams, init.mu, sigma_hat, init.loss, *penalty)?;
    let sol = problem.solve(lambdas, &init.theta(), opts)?;
    Ok(fit_from_solution(init, sigma_hat, lambdas, &sol))
}

/// Packs a solution into a fit that shares bases and intercept with `init`.
pub fn fit_from_solution(init: &PlamFit, sigma: f64, lambdas: &LambdaVector, sol: &Solution) -> PlamFit {
    let mut fit = init.clone();
    fit.set_theta(&sol.theta);
    fit.sigma = sigma;
    fit.active_linear = sol.active_linear.clone();
    fit.active_additive = sol.active_additive.clone();
    fit.lambdas_used = Some(lambdas.clone());
    fit.objective = Some(sol.objective);
    fit.iterations = sol.iterations;
    fit.converged = sol.converged;
    fit
}
