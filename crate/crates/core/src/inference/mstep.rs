use ndarray::{Array1, Array2};
use rayon::prelude::*;

use super::{log_space_ascent, InferenceError};
use crate::corpus::Corpus;
use crate::elbo::{document_elbo_with, TransitionStats};
use crate::model::{DocVariational, ElboBreakdown, GlobalParams, Hyperparams, TAU_SMOOTHING};
use crate::scalar::Real;
use crate::special::{dirichlet_expected_log, exact_sum, log_gamma, pairwise_sum, trigamma};

/// Sums per-document matrices over `lo..hi` as a balanced binary tree.
/// The tree shape depends only on the range, so the result is the same for
/// any number of worker threads.
fn tree_reduce<T, F>(lo: usize, hi: usize, dim: (usize, usize), leaf: &F) -> Array2<T>
where
    T: Real,
    F: Fn(usize) -> Array2<T> + Sync,
{
    match hi - lo {
        0 => Array2::zeros(dim),
        1 => leaf(lo),
        len => {
            let mid = lo + len / 2;
            let (a, b) = rayon::join(|| tree_reduce(lo, mid, dim, leaf), || tree_reduce(mid, hi, dim, leaf));
            a + b
        }
    }
}

fn check_states<T: Real>(corpus: &Corpus, states: &[DocVariational<T>]) -> Result<usize, InferenceError> {
    if states.len() != corpus.len() {
        return Err(InferenceError::Config(format!(
            "{} variational states for {} documents",
            states.len(),
            corpus.len()
        )));
    }
    Ok(states.first().map_or(0, |s| s.num_topics()))
}

/// New log τ: expected word counts per topic, floored and normalized.
pub fn update_tau<T: Real>(corpus: &Corpus, states: &[DocVariational<T>]) -> Result<Array2<T>, InferenceError> {
    let k = check_states(corpus, states)?;
    let v = corpus.vocab_size();
    let docs = corpus.documents();
    let counts = tree_reduce(0, docs.len(), (k, v), &|d| {
        let mut m = Array2::<T>::zeros((k, v));
        let doc = &docs[d];
        for n in 0..doc.len() {
            let w = doc.word(n);
            for i in 0..k {
                m[[i, w]] = m[[i, w]] + states[d].phi[[n, i]];
            }
        }
        m
    });
    let eps = T::lit(TAU_SMOOTHING);
    let mut log_tau = Array2::zeros((k, v));
    for i in 0..k {
        let row: Vec<T> = counts.row(i).iter().map(|&c| c + eps).collect();
        let total = pairwise_sum(&row);
        for (w, &c) in row.iter().enumerate() {
            log_tau[[i, w]] = (c / total).ln();
        }
    }
    Ok(log_tau)
}

/// Corpus statistics that the transition part of the bound depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSuffStats<T> {
    /// A_{j,i} = Σ_d Σ_{non-root n} φ_{p(n),j} φ_{n,i}.
    pub edge_counts: Array2<T>,
    /// C_{j,i} = Σ_d B_j γ_i / Σγ with B_j = Σ_{non-root n} φ_{p(n),j} / ω_n.
    pub normalizer_weights: Array2<T>,
}

pub fn transition_stats<T: Real>(
    corpus: &Corpus,
    states: &[DocVariational<T>],
) -> Result<TransitionSuffStats<T>, InferenceError> {
    let k = check_states(corpus, states)?;
    let docs = corpus.documents();
    let edge_counts = tree_reduce(0, docs.len(), (k, k), &|d| {
        let mut m = Array2::zeros((k, k));
        let phi = &states[d].phi;
        for (n, p) in docs[d].edges() {
            for j in 0..k {
                for i in 0..k {
                    m[[j, i]] = m[[j, i]] + phi[[p, j]] * phi[[n, i]];
                }
            }
        }
        m
    });
    let normalizer_weights = tree_reduce(0, docs.len(), (k, k), &|d| {
        let st = &states[d];
        let s = exact_sum(st.gamma.iter().copied());
        let mut b = vec![T::zero(); k];
        for (n, p) in docs[d].edges() {
            for (j, bj) in b.iter_mut().enumerate() {
                *bj = *bj + st.phi[[p, j]] / st.omega[n];
            }
        }
        Array2::from_shape_fn((k, k), |(j, i)| b[j] * st.gamma[i] / s)
    });
    Ok(TransitionSuffStats {
        edge_counts,
        normalizer_weights,
    })
}

/// Σ_j (E_q[log p(π_j | α_T)] + H[q(π_j)]): the corpus-level transition
/// prior and entropy, i.e. −Σ_j KL(Dir(ν_j) ‖ Dir(α_T)).
pub fn nu_terms<T: Real>(nu: &Array2<T>, alpha_t: T) -> Result<T, InferenceError> {
    let k = nu.ncols();
    let kt = T::from_usize_lossy(k);
    let prior_norm = log_gamma(kt * alpha_t)? - kt * log_gamma(alpha_t)?;
    let mut parts = Vec::new();
    for row in nu.rows() {
        let r = row.to_vec();
        let e = dirichlet_expected_log(&r)?;
        parts.push(prior_norm);
        parts.push(-log_gamma(exact_sum(r.iter().copied()))?);
        for (&v, &el) in r.iter().zip(&e) {
            parts.push(log_gamma(v)?);
            parts.push((alpha_t - v) * el);
        }
    }
    Ok(exact_sum(parts))
}

/// The part of the corpus bound that depends on row `j` of ν, including the
/// row's prior and entropy. Differs from the corpus bound by a constant.
pub fn nu_row_objective<T: Real>(
    stats: &TransitionSuffStats<T>,
    row: &[T],
    j: usize,
    alpha_t: T,
) -> Result<T, InferenceError> {
    let e = dirichlet_expected_log(row)?;
    let total = exact_sum(row.iter().copied());
    let mut parts = vec![-log_gamma(total)?];
    let mut normalizer = Vec::with_capacity(row.len());
    for (i, (&v, &el)) in row.iter().zip(&e).enumerate() {
        parts.push((stats.edge_counts[[j, i]] + alpha_t - v) * el);
        parts.push(log_gamma(v)?);
        normalizer.push(v * stats.normalizer_weights[[j, i]]);
    }
    parts.push(-exact_sum(normalizer) / total);
    Ok(exact_sum(parts))
}

fn nu_row_gradient<T: Real>(
    stats: &TransitionSuffStats<T>,
    row: &[T],
    j: usize,
    alpha_t: T,
) -> Result<Vec<T>, InferenceError> {
    let k = row.len();
    if k == 1 {
        return Ok(vec![T::zero()]);
    }
    let total = exact_sum(row.iter().copied());
    let tri_total = trigamma(total)?;
    let c: Vec<T> = (0..k)
        .map(|i| exact_sum([stats.edge_counts[[j, i]], alpha_t, -row[i]]))
        .collect();
    let c_sum = exact_sum(c.iter().copied());
    let weighted = exact_sum((0..k).map(|i| row[i] * stats.normalizer_weights[[j, i]]));
    (0..k)
        .map(|q| {
            Ok(exact_sum([
                c[q] * trigamma(row[q])?,
                -tri_total * c_sum,
                -stats.normalizer_weights[[j, q]] / total,
                weighted / (total * total),
            ]))
        })
        .collect()
}

/// Analytic gradient of the corpus bound with respect to every ν entry.
pub fn nu_gradient<T: Real>(
    stats: &TransitionSuffStats<T>,
    nu: &Array2<T>,
    alpha_t: T,
) -> Result<Array2<T>, InferenceError> {
    let k = nu.nrows();
    let mut g = Array2::zeros((k, k));
    for j in 0..k {
        let row = nu.row(j).to_vec();
        g.row_mut(j)
            .assign(&Array1::from(nu_row_gradient(stats, &row, j, alpha_t)?));
    }
    Ok(g)
}

/// Row-wise monotone ascent on ν from the current global parameters.
pub fn update_nu<T: Real>(
    corpus: &Corpus,
    states: &[DocVariational<T>],
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    max_iters: usize,
    step_shrink: f64,
) -> Result<Array2<T>, InferenceError> {
    let stats = transition_stats(corpus, states)?;
    let k = global.num_topics();
    let mut nu = global.nu.clone();
    for j in 0..k {
        let (row, _) = log_space_ascent(
            global.nu.row(j).to_vec(),
            |r| nu_row_objective(&stats, r, j, hyper.alpha_t),
            |r| nu_row_gradient(&stats, r, j, hyper.alpha_t),
            max_iters,
            step_shrink,
        )?;
        nu.row_mut(j).assign(&Array1::from(row));
    }
    Ok(nu)
}

/// The corpus bound: every document's bound plus the ν prior and entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusElbo<T> {
    pub documents: Vec<ElboBreakdown<T>>,
    /// Componentwise sum of `documents`.
    pub summed: ElboBreakdown<T>,
    pub nu_terms: T,
    /// Correctly rounded sum of the document totals and `nu_terms`.
    pub total: T,
}

impl<T: Real> CorpusElbo<T> {
    pub fn from_parts(documents: Vec<ElboBreakdown<T>>, nu_terms: T) -> Self {
        let summed = ElboBreakdown::sum(documents.iter());
        let total = corpus_total(documents.iter().map(|b| b.total), nu_terms);
        Self {
            documents,
            summed,
            nu_terms,
            total,
        }
    }
}

pub(crate) fn corpus_total<T: Real>(doc_totals: impl Iterator<Item = T>, nu_terms: T) -> T {
    exact_sum(doc_totals.chain(std::iter::once(nu_terms)))
}

pub fn corpus_elbo<T: Real>(
    corpus: &Corpus,
    states: &[DocVariational<T>],
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
) -> Result<CorpusElbo<T>, InferenceError> {
    check_states(corpus, states)?;
    let trans = TransitionStats::new(&global.nu)?;
    let documents = corpus
        .documents()
        .par_iter()
        .zip(states.par_iter())
        .map(|(doc, st)| document_elbo_with(doc, st, global, hyper, &trans))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CorpusElbo::from_parts(documents, nu_terms(&global.nu, hyper.alpha_t)?))
}
