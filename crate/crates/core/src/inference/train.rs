use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use super::estep::{estep_document, non_finite_term, refine_document};
use super::mstep::{corpus_elbo, corpus_total, update_nu, update_tau, CorpusElbo};
use super::{EStepConfig, InferenceError, TrainConfig};
use crate::corpus::{Corpus, DepDocument};
use crate::elbo::TransitionStats;
use crate::model::{init_global, init_variational, DocVariational, ElboBreakdown, GlobalParams, Hyperparams};
use crate::rng::derive_seed;
use crate::scalar::{format_real, Real};

pub const TRACE_HEADER: &str = "iter,elbo,prior,theta,transition,omega,words,dir_entropy,phi_entropy,nu_terms,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<T> {
    pub iteration: usize,
    pub elbo: T,
    /// Document terms summed over the corpus.
    pub terms: ElboBreakdown<T>,
    pub nu_terms: T,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace<T> {
    pub records: Vec<TraceRecord<T>>,
    /// Corpus bound before training and after every coordinate update, in
    /// document order within each E-step. Empty unless auditing was enabled.
    pub update_audit: Vec<T>,
}

impl<T: Real> TrainTrace<T> {
    pub fn final_elbo(&self) -> Option<T> {
        self.records.last().map(|r| r.elbo)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{TRACE_HEADER}").unwrap();
        for r in &self.records {
            let t = &r.terms;
            let cols = [
                r.elbo,
                t.prior_cross_entropy,
                t.theta_alloc,
                t.transition,
                t.omega_bound,
                t.word_likelihood,
                t.dirichlet_entropy,
                t.phi_entropy,
                r.nu_terms,
            ];
            let cols: Vec<String> = cols.iter().map(|&x| format_real(x)).collect();
            writeln!(out, "{},{},{:.6}", r.iteration, cols.join(","), r.seconds).unwrap();
        }
        out
    }
}

fn check_finite<T: Real>(elbo: &CorpusElbo<T>) -> Result<(), InferenceError> {
    if elbo.total.is_finite() {
        return Ok(());
    }
    let term = if !elbo.nu_terms.is_finite() {
        "nu_terms".to_string()
    } else {
        non_finite_term(&elbo.summed)
    };
    Err(InferenceError::NonFinite { term })
}

struct EmState<'a, T> {
    corpus: &'a Corpus,
    hyper: &'a Hyperparams<T>,
    cfg: &'a TrainConfig,
    global: GlobalParams<T>,
    states: Vec<DocVariational<T>>,
    elbo: CorpusElbo<T>,
    audit: Vec<T>,
}

impl<'a, T: Real> EmState<'a, T> {
    fn record(&mut self, total: T) {
        if self.cfg.audit {
            self.audit.push(total);
        }
    }

    fn estep(&mut self) -> Result<(), InferenceError> {
        let trans = TransitionStats::new(&self.global.nu)?;
        let (global, hyper, cfg) = (&self.global, self.hyper, &self.cfg.estep);
        let audit = self.cfg.audit;
        let results = self
            .corpus
            .documents()
            .par_iter()
            .zip(self.states.par_iter_mut())
            .map(|(doc, st)| {
                let mut local = Vec::new();
                let out = refine_document(doc, st, global, hyper, &trans, cfg, audit.then_some(&mut local))?;
                Ok((out.elbo, local))
            })
            .collect::<Result<Vec<_>, InferenceError>>()?;

        let mut totals: Vec<T> = self.elbo.documents.iter().map(|b| b.total).collect();
        let mut docs = Vec::with_capacity(results.len());
        for (d, (elbo, local)) in results.into_iter().enumerate() {
            for t in local {
                totals[d] = t;
                let total = corpus_total(totals.iter().copied(), self.elbo.nu_terms);
                self.record(total);
            }
            totals[d] = elbo.total;
            docs.push(elbo);
        }
        self.elbo = CorpusElbo::from_parts(docs, self.elbo.nu_terms);
        check_finite(&self.elbo)
    }

    /// Keeps `candidate` only if the corpus bound does not drop.
    fn try_global(&mut self, candidate: GlobalParams<T>) -> Result<(), InferenceError> {
        let elbo = corpus_elbo(self.corpus, &self.states, &candidate, self.hyper)?;
        if elbo.total >= self.elbo.total {
            self.global = candidate;
            self.elbo = elbo;
        }
        let total = self.elbo.total;
        self.record(total);
        Ok(())
    }

    fn mstep(&mut self) -> Result<(), InferenceError> {
        let log_tau = update_tau(self.corpus, &self.states)?;
        let candidate = GlobalParams {
            log_tau,
            nu: self.global.nu.clone(),
        };
        self.try_global(candidate)?;

        let nu = update_nu(
            self.corpus,
            &self.states,
            &self.global,
            self.hyper,
            self.cfg.nu_max_inner_iters,
            self.cfg.estep.gamma_step_shrink,
        )?;
        let candidate = GlobalParams {
            log_tau: self.global.log_tau.clone(),
            nu,
        };
        self.try_global(candidate)?;
        check_finite(&self.elbo)
    }
}

/// Variational EM: alternate full E-steps over every document (warm-started
/// from the previous iteration) with the τ and ν M-steps.
pub fn train<T: Real>(
    corpus: &Corpus,
    hyper: &Hyperparams<T>,
    cfg: &TrainConfig,
) -> Result<(GlobalParams<T>, TrainTrace<T>), InferenceError> {
    cfg.validate()?;
    hyper.validate().map_err(|e| InferenceError::Config(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count)
        .build()
        .map_err(|e| InferenceError::Config(e.to_string()))?;
    pool.install(|| train_in_pool(corpus, hyper, cfg))
}

fn train_in_pool<T: Real>(
    corpus: &Corpus,
    hyper: &Hyperparams<T>,
    cfg: &TrainConfig,
) -> Result<(GlobalParams<T>, TrainTrace<T>), InferenceError> {
    let started = Instant::now();
    let k = hyper.num_topics();
    let global = init_global(k, corpus.vocab_size(), hyper.alpha_t, cfg.seed);
    let states: Vec<DocVariational<T>> = corpus
        .documents()
        .iter()
        .enumerate()
        .map(|(d, doc)| init_variational(doc, hyper, derive_seed(cfg.seed, d as u64)))
        .collect();
    let elbo = corpus_elbo(corpus, &states, &global, hyper)?;
    check_finite(&elbo)?;
    let mut em = EmState {
        corpus,
        hyper,
        cfg,
        global,
        states,
        elbo,
        audit: Vec::new(),
    };
    let start_total = em.elbo.total;
    em.record(start_total);

    let mut records = Vec::new();
    let mut previous = em.elbo.total;
    for iteration in 1..=cfg.max_em_iters {
        em.estep()?;
        em.mstep()?;
        records.push(TraceRecord {
            iteration,
            elbo: em.elbo.total,
            terms: em.elbo.summed,
            nu_terms: em.elbo.nu_terms,
            seconds: started.elapsed().as_secs_f64(),
        });
        let change = (em.elbo.total - previous).abs() / previous.abs().max(T::min_positive_value());
        previous = em.elbo.total;
        if change < T::lit(cfg.em_tol) {
            break;
        }
    }
    Ok((
        em.global,
        TrainTrace {
            records,
            update_audit: em.audit,
        },
    ))
}

/// Per-word bound of a held-out document with the global parameters frozen.
pub fn heldout_bound<T: Real>(
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    doc: &DepDocument,
    cfg: &EStepConfig,
    seed: u64,
) -> Result<T, InferenceError> {
    if doc.is_empty() {
        return Ok(T::zero());
    }
    let (_, elbo) = estep_document(doc, global, hyper, cfg, seed)?;
    if !elbo.total.is_finite() {
        return Err(InferenceError::NonFinite {
            term: non_finite_term(&elbo),
        });
    }
    Ok(elbo.total / T::from_usize_lossy(doc.len()))
}
