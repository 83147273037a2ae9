//! Coordinate-ascent E-step, corpus M-step and the variational EM loop.

mod estep;
mod mstep;
mod train;

pub use estep::{
    estep_document, gamma_gradient, refine_document, update_gamma, update_omega, update_phi, EStepOutcome,
};
pub use mstep::{
    corpus_elbo, nu_gradient, nu_row_objective, nu_terms, transition_stats, update_nu, update_tau, CorpusElbo,
    TransitionSuffStats,
};
pub use train::{heldout_bound, train, TraceRecord, TrainTrace, TRACE_HEADER};

use thiserror::Error;

use crate::elbo::ElboError;
use crate::scalar::Real;
use crate::special::{trigamma, DomainError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Elbo(#[from] ElboError),
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
}

impl From<DomainError> for InferenceError {
    fn from(e: DomainError) -> Self {
        InferenceError::Elbo(ElboError::Domain(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EStepConfig {
    pub max_sweeps: usize,
    /// Relative change in the document bound below which sweeps stop.
    pub tol: f64,
    pub gamma_max_inner_iters: usize,
    /// Backtracking factor in (0, 1).
    pub gamma_step_shrink: f64,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 50,
            tol: 1e-6,
            gamma_max_inner_iters: 100,
            gamma_step_shrink: 0.5,
        }
    }
}

impl EStepConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.max_sweeps == 0 {
            return Err(InferenceError::Config("max_sweeps must be >= 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(InferenceError::Config("estep tol must be > 0".into()));
        }
        if self.gamma_max_inner_iters == 0 {
            return Err(InferenceError::Config("gamma_max_inner_iters must be >= 1".into()));
        }
        if !(self.gamma_step_shrink > 0.0 && self.gamma_step_shrink < 1.0) {
            return Err(InferenceError::Config("gamma_step_shrink must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_em_iters: usize,
    pub em_tol: f64,
    pub estep: EStepConfig,
    pub seed: u64,
    pub worker_count: usize,
    /// Gradient-ascent iterations per ν row in each M-step.
    pub nu_max_inner_iters: usize,
    /// Record the corpus bound after every coordinate update.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 200,
            em_tol: 1e-5,
            estep: EStepConfig::default(),
            seed: 0,
            worker_count: 1,
            nu_max_inner_iters: 100,
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        self.estep.validate()?;
        if self.max_em_iters == 0 {
            return Err(InferenceError::Config("max_em_iters must be >= 1".into()));
        }
        if !(self.em_tol > 0.0 && self.em_tol.is_finite()) {
            return Err(InferenceError::Config("em_tol must be > 0".into()));
        }
        if self.worker_count == 0 {
            return Err(InferenceError::Config("worker_count must be >= 1".into()));
        }
        if self.nu_max_inner_iters == 0 {
            return Err(InferenceError::Config("nu_max_inner_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Gradient norm below which the log-space ascent stops.
pub(crate) const GRAD_TOL: f64 = 1e-8;
/// Largest log-space move attempted in one step.
const MAX_LOG_STEP: f64 = 5.0;
const MAX_BACKTRACKS: usize = 60;

/// Ascent direction in log-parameter space for a Dirichlet-shaped block.
///
/// Solves `(diag ψ'(x) − ψ'(Σx) 1 1ᵀ) d = g` (the Dirichlet Fisher matrix,
/// which is the exact curvature of the ψ/lnΓ part) by Sherman–Morrison and
/// returns `d / x`. Falls back to the plain log-space gradient `x ⊙ g` when
/// the system is ill-conditioned or the solution is not an ascent direction.
fn log_space_direction<T: Real>(x: &[T], g: &[T]) -> Result<Vec<T>, DomainError> {
    let plain: Vec<T> = x.iter().zip(g).map(|(&xi, &gi)| xi * gi).collect();
    if x.len() < 2 {
        return Ok(plain);
    }
    let total = x.iter().copied().sum::<T>();
    let c = trigamma(total)?;
    let inv_d: Vec<T> = x
        .iter()
        .map(|&xi| trigamma(xi).map(|t| T::one() / t))
        .collect::<Result<_, _>>()?;
    let sum_inv = inv_d.iter().copied().sum::<T>();
    let denom = T::one() - c * sum_inv;
    if denom.is_nan() || denom <= T::lit(1e-12) {
        return Ok(plain);
    }
    let dg: T = inv_d.iter().zip(g).map(|(&a, &b)| a * b).sum();
    let coef = c * dg / denom;
    let d: Vec<T> = inv_d.iter().zip(g).map(|(&a, &gi)| a * gi + a * coef).collect();
    let ascent: T = d.iter().zip(g).map(|(&a, &b)| a * b).sum();
    if ascent.is_nan() || ascent <= T::zero() || d.iter().any(|v| !v.is_finite()) {
        return Ok(plain);
    }
    Ok(d.iter().zip(x).map(|(&di, &xi)| di / xi).collect())
}

/// Monotone backtracking ascent over a positive vector in log space.
///
/// A step is taken only if it strictly increases `objective`; the returned
/// value is therefore never below the starting objective.
pub(crate) fn log_space_ascent<T, F, G>(
    start: Vec<T>,
    objective: F,
    gradient: G,
    max_iters: usize,
    shrink: f64,
) -> Result<(Vec<T>, T), InferenceError>
where
    T: Real,
    F: Fn(&[T]) -> Result<T, InferenceError>,
    G: Fn(&[T]) -> Result<Vec<T>, InferenceError>,
{
    let mut x = start;
    let mut fx = objective(&x)?;
    let shrink = T::lit(shrink);
    for _ in 0..max_iters {
        let g = gradient(&x)?;
        let gmax = g.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if !gmax.is_finite() {
            return Err(InferenceError::NonFinite {
                term: "gradient".into(),
            });
        }
        if gmax <= T::lit(GRAD_TOL) {
            break;
        }
        let natural = log_space_direction(&x, &g)?;
        let plain: Vec<T> = x.iter().zip(&g).map(|(&xi, &gi)| xi * gi).collect();
        let mut moved = false;
        for dir in [natural, plain] {
            let dmax = dir.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            if dmax.is_nan() || dmax <= T::zero() {
                continue;
            }
            let mut eta = T::one().min(T::lit(MAX_LOG_STEP) / dmax);
            for _ in 0..MAX_BACKTRACKS {
                let cand: Vec<T> = x.iter().zip(&dir).map(|(&xi, &di)| xi * (eta * di).exp()).collect();
                if cand.iter().all(|&c| c.is_finite() && c > T::zero()) && cand != x {
                    if let Ok(fc) = objective(&cand) {
                        if fc > fx {
                            x = cand;
                            fx = fc;
                            moved = true;
                            break;
                        }
                    }
                }
                eta = eta * shrink;
            }
            if moved {
                break;
            }
        }
        if !moved {
            break;
        }
    }
    Ok((x, fx))
}
