//! Independent verification machinery: a Monte-Carlo estimate of the bound,
//! central finite differences, a synthetic-corpus generator for the
//! generative model, and topic matching for recovery scoring.
//!
//! Nothing here calls into the analytic bound; it samples the variational
//! distribution directly and averages the integrand.

use std::fmt::Write as _;

use itertools::Itertools;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{Corpus, DepDocument, Vocabulary};
use crate::model::{DocVariational, GlobalParams, Hyperparams};
use crate::rng::{derive_seed, stream_rng, streams, StreamRng};
use crate::special::log_gamma;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("function value not finite at coordinate {coord}")]
    NonFinite { coord: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("topic matching supports K <= 8, got {0}")]
    TooManyTopics(usize),
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: u64,
}

impl McEstimate {
    /// |mean − value| / stderr; infinite when stderr is zero and they differ.
    pub fn z_score(&self, value: f64) -> f64 {
        let d = (self.mean - value).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }

    pub fn agrees_with(&self, value: f64, sigmas: f64) -> bool {
        (self.mean - value).abs() <= sigmas * self.stderr
    }
}

/// Running mean and sum of squared deviations (Welford), mergeable with
/// Chan's update.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * self.n as f64 * other.n as f64 / n as f64;
        Moments { n, mean, m2 }
    }

    fn estimate(&self) -> McEstimate {
        let var = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        } else {
            0.0
        };
        McEstimate {
            mean: self.mean,
            stderr: (var / self.n as f64).sqrt(),
            n_samples: self.n,
        }
    }
}

/// Draws θ ~ Dir(params) via normalized Gamma draws and returns (θ, ln θ).
pub fn sample_dirichlet(rng: &mut StreamRng, gammas: &[Gamma<f64>]) -> (Vec<f64>, Vec<f64>) {
    let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let ln_total = total.ln();
    let theta = draws.iter().map(|d| d / total).collect();
    let ln_theta = draws.iter().map(|d| d.ln() - ln_total).collect();
    (theta, ln_theta)
}

pub(crate) fn gamma_dists(params: &[f64]) -> Result<Vec<Gamma<f64>>, OracleError> {
    params
        .iter()
        .map(|&a| Gamma::new(a, 1.0).map_err(|e| OracleError::Invalid(format!("gamma shape {a}: {e}"))))
        .collect()
}

/// Inverse-CDF draw from a probability vector; zero-probability entries are
/// never returned.
pub fn sample_categorical(rng: &mut StreamRng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

fn dirichlet_log_norm(params: &[f64]) -> f64 {
    let total: f64 = params.iter().sum();
    log_gamma(total).expect("positive") - params.iter().map(|&a| log_gamma(a).expect("positive")).sum::<f64>()
}

/// Monte-Carlo estimates of the bound's total and of each term group.
#[derive(Debug, Clone, PartialEq)]
pub struct McElboEstimate {
    pub total: McEstimate,
    /// In the order of `ElboBreakdown::TERM_NAMES`.
    pub terms: [McEstimate; 7],
}

const MC_CHUNK: u64 = 1 << 14;

/// Samples θ ~ Dir(γ), π_j ~ Dir(ν_j) and z_n ~ φ_n independently and
/// averages the integrand whose expectation under q is the bound:
///
/// log p(θ | β*α_D) + Σ_n log θ_{z_n} + Σ_{non-root} log π_{z_p(n), z_n}
/// − Σ_{non-root} (ω_n⁻¹ Σ_i θ_i π_{z_p(n), i} + log ω_n − 1)
/// + Σ_n log τ_{z_n, w_n} − log q(θ | γ) − Σ_n log φ_{n, z_n}
///
/// Samples are split into fixed chunks, each with its own stream, so the
/// result does not depend on the thread count.
pub fn mc_elbo_estimate(
    doc: &DepDocument,
    var: &DocVariational<f64>,
    global: &GlobalParams<f64>,
    hyper: &Hyperparams<f64>,
    n_samples: u64,
    seed: u64,
) -> Result<McElboEstimate, OracleError> {
    if n_samples == 0 {
        return Err(OracleError::Invalid("n_samples must be >= 1".into()));
    }
    let k = global.num_topics();
    let prior = hyper.doc_prior();
    let gamma = var.gamma.to_vec();
    let theta_dists = gamma_dists(&gamma)?;
    let pi_dists: Vec<Vec<Gamma<f64>>> = global
        .nu
        .rows()
        .into_iter()
        .map(|r| gamma_dists(&r.to_vec()))
        .collect::<Result<_, _>>()?;
    let prior_norm = dirichlet_log_norm(&prior);
    let q_norm = dirichlet_log_norm(&gamma);
    let n = doc.len();
    let phi_rows: Vec<Vec<f64>> = (0..n).map(|i| var.phi.row(i).to_vec()).collect();

    let chunks = n_samples.div_ceil(MC_CHUNK);
    let per_chunk: Vec<[Moments; 8]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, streams::MC_CHUNK + c);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut acc = [Moments::default(); 8];
            let mut z = vec![0usize; n];
            for _ in 0..count {
                let (theta, ln_theta) = sample_dirichlet(&mut rng, &theta_dists);
                let mut pi = Vec::with_capacity(k);
                let mut ln_pi = Vec::with_capacity(k);
                for d in &pi_dists {
                    let (p, lp) = sample_dirichlet(&mut rng, d);
                    pi.push(p);
                    ln_pi.push(lp);
                }
                for (zn, row) in z.iter_mut().zip(&phi_rows) {
                    *zn = sample_categorical(&mut rng, row);
                }

                let mut t = [0.0f64; 7];
                t[0] = prior_norm + (0..k).map(|i| (prior[i] - 1.0) * ln_theta[i]).sum::<f64>();
                for w in 0..n {
                    t[1] += ln_theta[z[w]];
                    t[4] += global.word_log_prob(z[w], doc.word(w));
                    t[6] -= phi_rows[w][z[w]].ln();
                    if let Some(p) = doc.parent(w) {
                        t[2] += ln_pi[z[p]][z[w]];
                        let norm: f64 = (0..k).map(|i| theta[i] * pi[z[p]][i]).sum();
                        let om = var.omega[w];
                        t[3] -= norm / om + om.ln() - 1.0;
                    }
                }
                t[5] = -(q_norm + (0..k).map(|i| (gamma[i] - 1.0) * ln_theta[i]).sum::<f64>());
                for (m, &x) in acc.iter_mut().zip(t.iter()) {
                    m.push(x);
                }
                acc[7].push(t.iter().sum());
            }
            acc
        })
        .collect();

    let merged = per_chunk.into_iter().fold([Moments::default(); 8], |mut a, b| {
        for (x, y) in a.iter_mut().zip(b) {
            *x = x.merge(y);
        }
        a
    });
    let mut terms = [merged[0].estimate(); 7];
    for (t, m) in terms.iter_mut().zip(merged.iter()) {
        *t = m.estimate();
    }
    Ok(McElboEstimate {
        total: merged[7].estimate(),
        terms,
    })
}

/// Monte-Carlo estimate of E[f(x)] for x ~ Dir(params).
pub fn mc_dirichlet_expectation<F>(params: &[f64], n_samples: u64, seed: u64, f: F) -> Result<McEstimate, OracleError>
where
    F: Fn(&[f64], &[f64]) -> f64 + Sync,
{
    let dists = gamma_dists(params)?;
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let m = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, streams::MC_CHUNK + c);
            let mut acc = Moments::default();
            for _ in 0..MC_CHUNK.min(n_samples - c * MC_CHUNK) {
                let (theta, ln_theta) = sample_dirichlet(&mut rng, &dists);
                acc.push(f(&theta, &ln_theta));
            }
            acc
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(Moments::default(), Moments::merge);
    Ok(m.estimate())
}

/// Central differences with per-coordinate step `h * max(|x_i|, 1)`.
pub fn finite_diff<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>, OracleError>
where
    F: Fn(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(OracleError::Invalid("step must be > 0".into()));
    }
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            if !(up.is_finite() && down.is_finite()) {
                return Err(OracleError::NonFinite { coord: i });
            }
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// A generated corpus together with the topic of every word.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// `assignments[d][n]` is the true topic of word n in document d.
    pub assignments: Vec<Vec<usize>>,
}

impl SyntheticCorpus {
    /// Sidecar text: one `doc word z` line per word, doc and word 1-based
    /// (matching the corpus file), topic 0-based.
    pub fn truth_sidecar(&self) -> String {
        let mut out = String::new();
        for (d, zs) in self.assignments.iter().enumerate() {
            for (n, z) in zs.iter().enumerate() {
                writeln!(out, "{} {} {}", d + 1, n + 1, z).unwrap();
            }
        }
        out
    }
}

fn check_stochastic(name: &str, m: &Array2<f64>, cols: usize) -> Result<(), OracleError> {
    if m.ncols() != cols {
        return Err(OracleError::Invalid(format!(
            "{name} has {} columns, expected {cols}",
            m.ncols()
        )));
    }
    for (i, row) in m.rows().into_iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(OracleError::Invalid(format!(
                "{name} row {i} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(OracleError::Invalid(format!("{name} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Draws a corpus from the generative model the bound is built for.
///
/// Per document: θ ~ Dir(β*α_D); length 1 + Poisson(mean_length − 1); word 0
/// is the root and word n ≥ 1 attaches to a uniformly chosen earlier word;
/// z_root ~ θ, z_n ∝ θ_i π_{z_p(n), i}; w_n ~ τ_{z_n}. Token `w{v}` has id v
/// and every one of the V tokens is in the vocabulary.
pub fn sample_corpus(
    true_tau: &Array2<f64>,
    true_pi: &Array2<f64>,
    hyper: &Hyperparams<f64>,
    n_docs: usize,
    mean_length: f64,
    seed: u64,
) -> Result<SyntheticCorpus, OracleError> {
    let k = true_tau.nrows();
    let v = true_tau.ncols();
    if k == 0 || v == 0 {
        return Err(OracleError::Invalid("tau must be non-empty".into()));
    }
    check_stochastic("tau", true_tau, v)?;
    if true_pi.nrows() != k {
        return Err(OracleError::Invalid("pi must be K x K".into()));
    }
    check_stochastic("pi", true_pi, k)?;
    if hyper.num_topics() != k {
        return Err(OracleError::Invalid("hyperparameters disagree with K".into()));
    }
    if n_docs == 0 {
        return Err(OracleError::Invalid("n_docs must be >= 1".into()));
    }
    if !(mean_length >= 1.0 && mean_length.is_finite()) {
        return Err(OracleError::Invalid("mean_length must be >= 1".into()));
    }
    let theta_dists = gamma_dists(&hyper.doc_prior())?;
    let extra = if mean_length > 1.0 {
        Some(Poisson::new(mean_length - 1.0).map_err(|e| OracleError::Invalid(e.to_string()))?)
    } else {
        None
    };
    let tau_rows: Vec<Vec<f64>> = true_tau.rows().into_iter().map(|r| r.to_vec()).collect();

    let mut docs = Vec::with_capacity(n_docs);
    let mut assignments = Vec::with_capacity(n_docs);
    for d in 0..n_docs {
        let mut rng = stream_rng(derive_seed(seed, d as u64), streams::SAMPLE_CORPUS);
        let (theta, _) = sample_dirichlet(&mut rng, &theta_dists);
        let len = 1 + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut parent = Vec::with_capacity(len);
        let mut z = Vec::with_capacity(len);
        let mut words = Vec::with_capacity(len);
        for n in 0..len {
            let topic = if n == 0 {
                parent.push(None);
                sample_categorical(&mut rng, &theta)
            } else {
                let p = rng.random_range(0..n);
                parent.push(Some(p));
                let weights: Vec<f64> = (0..k).map(|i| theta[i] * true_pi[[z[p], i]]).collect();
                sample_categorical(&mut rng, &weights)
            };
            z.push(topic);
            words.push(sample_categorical(&mut rng, &tau_rows[topic]));
        }
        docs.push(DepDocument::new(words, parent).expect("generated trees are valid"));
        assignments.push(z);
    }
    let vocab = Vocabulary::from_tokens((0..v).map(|i| format!("w{i}"))).expect("distinct tokens");
    Ok(SyntheticCorpus {
        corpus: Corpus::new(docs, vocab).expect("ids below V"),
        assignments,
    })
}

/// Half the L1 distance between two probability vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Finds the topic permutation minimizing mean total-variation distance.
///
/// `permutation[i]` is the true topic matched to estimated topic `i`.
pub fn match_topics(estimated_tau: &Array2<f64>, true_tau: &Array2<f64>) -> Result<(Vec<usize>, f64), OracleError> {
    let k = true_tau.nrows();
    if estimated_tau.dim() != true_tau.dim() {
        return Err(OracleError::Invalid(format!(
            "shapes differ: {:?} vs {:?}",
            estimated_tau.dim(),
            true_tau.dim()
        )));
    }
    if k > 8 {
        return Err(OracleError::TooManyTopics(k));
    }
    let est: Vec<Vec<f64>> = estimated_tau.rows().into_iter().map(|r| r.to_vec()).collect();
    let tru: Vec<Vec<f64>> = true_tau.rows().into_iter().map(|r| r.to_vec()).collect();
    let cost = Array2::from_shape_fn((k, k), |(i, j)| total_variation(&est[i], &tru[j]));
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..k).permutations(k) {
        let mean = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / k as f64;
        if best.as_ref().is_none_or(|(_, b)| mean < *b) {
            best = Some((perm, mean));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Every point of the simplex grid {x ∈ (1/m)·ℕ^K : Σx = 1}.
pub fn simplex_grid(k: usize, m: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / m as f64).collect());
            cur.pop();
            return;
        }
        for a in 0..=left {
            cur.push(a);
            rec(k - 1, left - a, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, m, m, &mut Vec::new(), &mut out);
    out
}

/// A random valid document, variational state and model for oracle runs.
#[derive(Debug, Clone)]
pub struct Instance {
    pub doc: DepDocument,
    pub var: DocVariational<f64>,
    pub global: GlobalParams<f64>,
    pub hyper: Hyperparams<f64>,
}

/// Builds a seeded random instance with K topics, N words (uniform-attachment
/// tree) and V vocabulary entries. γ, ν, α_D and β* are bounded away from
/// zero so Monte-Carlo integrands have moderate variance.
pub fn random_instance(k: usize, n: usize, v: usize, seed: u64) -> Instance {
    let mut rng = stream_rng(seed, 0);
    let words: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
    let parent: Vec<Option<usize>> = (0..n)
        .map(|i| if i == 0 { None } else { Some(rng.random_range(0..i)) })
        .collect();
    let doc = DepDocument::new(words, parent).expect("valid tree");

    let alpha_d: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..1.5)).collect();
    let hyper = Hyperparams::new(alpha_d, rng.random_range(0.8..2.5), rng.random_range(0.5..2.0)).expect("positive");

    let mut log_tau = Array2::zeros((k, v));
    for mut row in log_tau.rows_mut() {
        let draws: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = draws.iter().sum();
        for (x, d) in row.iter_mut().zip(draws) {
            *x = (d / s).ln();
        }
    }
    let nu = Array2::from_shape_fn((k, k), |_| rng.random_range(0.6..4.0));
    let global = GlobalParams { log_tau, nu };

    let gamma: Array1<f64> = (0..k).map(|_| rng.random_range(0.6..5.0)).collect();
    let mut phi = Array2::zeros((n, k));
    for mut row in phi.rows_mut() {
        let draws: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = draws.iter().sum();
        for (x, d) in row.iter_mut().zip(draws) {
            *x = d / s;
        }
    }
    let omega: Array1<f64> = (0..n).map(|_| rng.random_range(0.3..1.5)).collect();
    Instance {
        doc,
        var: DocVariational { gamma, phi, omega },
        global,
        hyper,
    }
}

/// A rows×cols matrix whose rows are independent Dir(1, …, 1) draws.
pub fn random_stochastic_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 0);
    let dists = gamma_dists(&vec![1.0; cols]).expect("unit shape");
    let mut m = Array2::zeros((rows, cols));
    for mut row in m.rows_mut() {
        let (theta, _) = sample_dirichlet(&mut rng, &dists);
        row.assign(&Array1::from(theta));
    }
    m
}

/// Several random documents sharing one model, for corpus-level checks.
#[derive(Debug, Clone)]
pub struct CorpusInstance {
    pub corpus: Corpus,
    pub states: Vec<DocVariational<f64>>,
    pub global: GlobalParams<f64>,
    pub hyper: Hyperparams<f64>,
}

/// Document d has 1 + (d mod max_len) words; the model comes from the first
/// document's instance.
pub fn random_corpus_instance(k: usize, n_docs: usize, max_len: usize, v: usize, seed: u64) -> CorpusInstance {
    let insts: Vec<Instance> = (0..n_docs)
        .map(|d| random_instance(k, 1 + d % max_len.max(1), v, derive_seed(seed, d as u64)))
        .collect();
    let global = insts[0].global.clone();
    let hyper = insts[0].hyper.clone();
    let (docs, states) = insts.into_iter().map(|i| (i.doc, i.var)).unzip();
    let vocab = Vocabulary::from_tokens((0..v).map(|i| format!("w{i}"))).expect("distinct tokens");
    CorpusInstance {
        corpus: Corpus::new(docs, vocab).expect("ids below V"),
        states,
        global,
        hyper,
    }
}
