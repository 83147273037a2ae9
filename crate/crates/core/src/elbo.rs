//! The per-document evidence lower bound, term by term.
//!
//! Conventions:
//! * the root word draws its topic from θ alone, so it contributes to the
//!   θ-allocation, word and φ-entropy terms but not to the transition or
//!   ω terms;
//! * the ω term is `−Σ_{non-root n} (s_n / ω_n + log ω_n − 1)` where `s_n` is
//!   the expected edge normalizer from [`edge_normalizer`];
//! * `0 · log 0 = 0` in the φ entropy (entries below 1e-300 count as zero).

use ndarray::Array2;
use thiserror::Error;

use crate::corpus::DepDocument;
use crate::model::{DocVariational, ElboBreakdown, GlobalParams, Hyperparams};
use crate::scalar::Real;
use crate::special::{dirichlet_expected_log, exact_sum, log_gamma, pairwise_sum, DomainError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ElboError {
    #[error("dimension mismatch: {0}")]
    Contract(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub(crate) const PHI_ZERO: f64 = 1e-300;

/// Document-independent quantities derived from ν.
#[derive(Debug, Clone)]
pub struct TransitionStats<T> {
    /// E[log π_{j,i}] = ψ(ν_{j,i}) − ψ(Σ_k ν_{j,k}).
    pub expected_log_pi: Array2<T>,
    /// Σ_k ν_{j,k}.
    pub row_sums: Vec<T>,
}

impl<T: Real> TransitionStats<T> {
    pub fn new(nu: &Array2<T>) -> Result<Self, DomainError> {
        let k = nu.nrows();
        let mut expected_log_pi = Array2::zeros((k, k));
        let mut row_sums = Vec::with_capacity(k);
        for (j, row) in nu.rows().into_iter().enumerate() {
            let r = row.to_vec();
            let e = dirichlet_expected_log(&r)?;
            expected_log_pi.row_mut(j).assign(&ndarray::Array1::from(e));
            row_sums.push(exact_sum(r));
        }
        Ok(Self {
            expected_log_pi,
            row_sums,
        })
    }
}

/// Per-document quantities derived from γ together with ν.
#[derive(Debug, Clone)]
pub(crate) struct GammaStats<T> {
    pub expected_log_theta: Vec<T>,
    /// r_j = Σ_i γ_i ν_{j,i} / (Σγ · Σν_j): expected edge normalizer given
    /// the parent's topic is j.
    pub edge_ratio: Vec<T>,
}

impl<T: Real> GammaStats<T> {
    pub fn new(gamma: &[T], global: &GlobalParams<T>, trans: &TransitionStats<T>) -> Result<Self, DomainError> {
        let expected_log_theta = dirichlet_expected_log(gamma)?;
        let gamma_sum = exact_sum(gamma.iter().copied());
        let edge_ratio = global
            .nu
            .rows()
            .into_iter()
            .zip(trans.row_sums.iter())
            .map(|(row, &ns)| {
                let m = pairwise_sum(&row.iter().zip(gamma).map(|(&v, &g)| g * v).collect::<Vec<_>>());
                m / (gamma_sum * ns)
            })
            .collect();
        Ok(Self {
            expected_log_theta,
            edge_ratio,
        })
    }
}

/// Expected edge normalizers `s[n]` for every word; `None` at the root.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeNormalizerStats<T> {
    pub s: Vec<Option<T>>,
}

pub(crate) fn check_dims<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
) -> Result<(), ElboError> {
    let k = global.num_topics();
    if global.nu.dim() != (k, k) {
        return Err(ElboError::Contract(format!("nu is {:?}, K = {k}", global.nu.dim())));
    }
    if var.gamma.len() != k {
        return Err(ElboError::Contract(format!(
            "gamma has length {}, K = {k}",
            var.gamma.len()
        )));
    }
    if var.phi.dim() != (doc.len(), k) {
        return Err(ElboError::Contract(format!(
            "phi is {:?}, expected ({}, {k})",
            var.phi.dim(),
            doc.len()
        )));
    }
    if var.omega.len() != doc.len() {
        return Err(ElboError::Contract(format!(
            "omega has length {}, N = {}",
            var.omega.len(),
            doc.len()
        )));
    }
    Ok(())
}

pub(crate) fn edge_normalizer_with<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    gs: &GammaStats<T>,
) -> Vec<Option<T>> {
    (0..doc.len())
        .map(|n| {
            doc.parent(n).map(|p| {
                let terms: Vec<T> = var
                    .phi
                    .row(p)
                    .iter()
                    .zip(gs.edge_ratio.iter())
                    .map(|(&f, &r)| f * r)
                    .collect();
                pairwise_sum(&terms)
            })
        })
        .collect()
}

/// `s[n] = Σ_j φ_{p(n),j} Σ_i γ_i ν_{j,i} / (Σ_k γ_k Σ_k ν_{j,k})`.
pub fn edge_normalizer<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
) -> Result<EdgeNormalizerStats<T>, ElboError> {
    check_dims(doc, var, global)?;
    let trans = TransitionStats::new(&global.nu)?;
    let gs = GammaStats::new(var.gamma.as_slice().expect("contiguous"), global, &trans)?;
    Ok(EdgeNormalizerStats {
        s: edge_normalizer_with(doc, var, &gs),
    })
}

/// Per-word contribution −(s_n/ω_n + ln ω_n − 1) of the auxiliary
/// normalizer bound; `None` for the root.
pub fn omega_bound_terms<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
) -> Result<Vec<Option<T>>, ElboError> {
    let s = edge_normalizer(doc, var, global)?.s;
    Ok(s.into_iter()
        .zip(var.omega.iter())
        .map(|(s, &om)| s.map(|s| -(s / om + om.ln() - T::one())))
        .collect())
}

/// ln Γ(Σ a) − Σ ln Γ(a_i) + Σ (a_i − 1) E[ln θ_i]
fn dirichlet_cross_term<T: Real>(a: &[T], e_log: &[T]) -> Result<T, DomainError> {
    let mut parts = Vec::with_capacity(2 * a.len() + 1);
    parts.push(log_gamma(exact_sum(a.iter().copied()))?);
    for (&ai, &e) in a.iter().zip(e_log) {
        parts.push(-log_gamma(ai)?);
        parts.push((ai - T::one()) * e);
    }
    Ok(exact_sum(parts))
}

/// Evaluates every term of the bound using precomputed ν statistics.
pub fn document_elbo_with<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    trans: &TransitionStats<T>,
) -> Result<ElboBreakdown<T>, ElboError> {
    check_dims(doc, var, global)?;
    if hyper.num_topics() != global.num_topics() {
        return Err(ElboError::Contract(format!(
            "hyperparameters have K = {}, model has K = {}",
            hyper.num_topics(),
            global.num_topics()
        )));
    }
    let k = global.num_topics();
    let gamma = var.gamma.as_slice().expect("contiguous");
    let gs = GammaStats::new(gamma, global, trans)?;
    let e_theta = &gs.expected_log_theta;

    let prior = dirichlet_cross_term(&hyper.doc_prior(), e_theta)?;
    // entropy of q(θ) is minus its own cross term
    let dir_entropy = -dirichlet_cross_term(gamma, e_theta)?;

    let n = doc.len();
    let mut theta_terms = Vec::with_capacity(n);
    let mut word_terms = Vec::with_capacity(n);
    let mut entropy_terms = Vec::with_capacity(n);
    let mut trans_terms = Vec::with_capacity(n);
    let mut omega_terms = Vec::with_capacity(n);
    let mut row = vec![T::zero(); k];

    for w in 0..n {
        let phi_n = var.phi.row(w);
        for i in 0..k {
            row[i] = phi_n[i] * e_theta[i];
        }
        theta_terms.push(pairwise_sum(&row));
        for i in 0..k {
            row[i] = phi_n[i] * global.word_log_prob(i, doc.word(w));
        }
        word_terms.push(pairwise_sum(&row));
        for i in 0..k {
            let p = phi_n[i];
            row[i] = if p < T::lit(PHI_ZERO) { T::zero() } else { -p * p.ln() };
        }
        entropy_terms.push(pairwise_sum(&row));

        if let Some(p) = doc.parent(w) {
            let phi_p = var.phi.row(p);
            let mut acc = Vec::with_capacity(k * k);
            for j in 0..k {
                for i in 0..k {
                    acc.push(phi_n[i] * phi_p[j] * trans.expected_log_pi[[j, i]]);
                }
            }
            trans_terms.push(pairwise_sum(&acc));

            for j in 0..k {
                row[j] = phi_p[j] * gs.edge_ratio[j];
            }
            let s = pairwise_sum(&row);
            let om = var.omega[w];
            omega_terms.push(-(s / om + om.ln() - T::one()));
        }
    }

    Ok(ElboBreakdown::from_terms([
        prior,
        exact_sum(theta_terms),
        exact_sum(trans_terms),
        exact_sum(omega_terms),
        exact_sum(word_terms),
        dir_entropy,
        exact_sum(entropy_terms),
    ]))
}

/// The full per-document bound.
pub fn document_elbo<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
) -> Result<ElboBreakdown<T>, ElboError> {
    check_dims(doc, var, global)?;
    let trans = TransitionStats::new(&global.nu)?;
    document_elbo_with(doc, var, global, hyper, &trans)
}
