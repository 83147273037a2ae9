//! The self-verification suite run by `treestm check`.
//!
//! Every check compares the analytic code against an independent oracle on
//! seeded random instances: Monte-Carlo sampling for the bound, central
//! differences for gradients and stationarity, and closed-form identities
//! for the degenerate cases.

use std::fmt;

use ndarray::{Array1, Array2};

use crate::corpus::DepDocument;
use crate::elbo::{document_elbo, edge_normalizer, omega_bound_terms, ElboError};
use crate::inference::{corpus_elbo, gamma_gradient, nu_gradient, train, transition_stats, update_omega, TrainConfig};
use crate::model::{DocVariational, ElboBreakdown, GlobalParams, Hyperparams};
use crate::oracle::{
    finite_diff, mc_elbo_estimate, random_corpus_instance, random_instance, random_stochastic_matrix, sample_corpus,
    Instance,
};
use crate::rng::derive_seed;

/// A deliberate defect in the analytic bound, used to confirm the suite
/// catches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    PhiEntropySign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub mc_samples: u64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            mc_samples: 1_000_000,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub observed: String,
    pub expected: String,
    pub warnings: Vec<String>,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {:<20} observed: {}; expected: {}",
            self.name, self.observed, self.expected
        )?;
        for w in &self.warnings {
            write!(f, "\n     warning: {w}")?;
        }
        Ok(())
    }
}

const FD_STEP: f64 = 1e-5;

struct Suite<'a> {
    cfg: &'a SuiteConfig,
}

impl Suite<'_> {
    fn evaluate(
        &self,
        doc: &DepDocument,
        var: &DocVariational<f64>,
        global: &GlobalParams<f64>,
        hyper: &Hyperparams<f64>,
    ) -> Result<ElboBreakdown<f64>, ElboError> {
        let b = document_elbo(doc, var, global, hyper)?;
        Ok(match self.cfg.fault {
            None => b,
            Some(Fault::PhiEntropySign) => {
                let mut terms = b.terms();
                terms[6] = -terms[6];
                ElboBreakdown::from_terms(terms)
            }
        })
    }

    fn total(&self, inst: &Instance, var: &DocVariational<f64>) -> f64 {
        self.evaluate(&inst.doc, var, &inst.global, &inst.hyper)
            .map_or(f64::NAN, |b| b.total)
    }

    fn instance(&self, i: u64) -> Instance {
        let k = 2 + (i % 2) as usize;
        let n = 1 + (i * 5 % 6) as usize;
        random_instance(k, n, 5, derive_seed(self.cfg.seed, i))
    }

    fn mc_agreement(&self) -> Result<CheckResult, String> {
        let mut worst = (0.0f64, String::new());
        let mut warnings = Vec::new();
        for i in 0..3 {
            let inst = self.instance(i);
            let analytic = self
                .evaluate(&inst.doc, &inst.var, &inst.global, &inst.hyper)
                .map_err(|e| e.to_string())?;
            let mc = mc_elbo_estimate(
                &inst.doc,
                &inst.var,
                &inst.global,
                &inst.hyper,
                self.cfg.mc_samples,
                derive_seed(self.cfg.seed, 1000 + i),
            )
            .map_err(|e| e.to_string())?;
            if mc.total.stderr > 0.05 * mc.total.mean.abs().max(1.0) {
                warnings.push(format!(
                    "instance {i}: wide stderr {:.3e} at {} samples",
                    mc.total.stderr, self.cfg.mc_samples
                ));
            }
            let z = mc.total.z_score(analytic.total);
            if z >= worst.0 || worst.1.is_empty() {
                let (term, tz) = ElboBreakdown::<f64>::TERM_NAMES
                    .iter()
                    .zip(mc.terms.iter().zip(analytic.terms()))
                    .map(|(name, (m, a))| (*name, m.z_score(a)))
                    .fold(("", -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                worst = (
                    z,
                    format!(
                        "instance {i}: bound {:.10}, MC {:.10} ± {:.3e} (z = {z:.2}); largest term deviation: {term} (z = {tz:.2})",
                        analytic.total, mc.total.mean, mc.total.stderr
                    ),
                );
            }
        }
        Ok(CheckResult {
            name: "mc_elbo_agreement",
            passed: worst.0 <= 3.0,
            observed: worst.1,
            expected: "|bound - MC mean| <= 3 stderr on every instance".into(),
            warnings,
        })
    }

    fn gamma_gradient(&self) -> Result<CheckResult, String> {
        let mut worst = 0.0f64;
        for i in 0..5 {
            let inst = self.instance(10 + i);
            let analytic =
                gamma_gradient(&inst.doc, &inst.var, &inst.global, &inst.hyper).map_err(|e| e.to_string())?;
            let fd = finite_diff(
                |g| {
                    let mut v = inst.var.clone();
                    v.gamma = Array1::from(g.to_vec());
                    self.total(&inst, &v)
                },
                inst.var.gamma.as_slice().expect("contiguous"),
                FD_STEP,
            )
            .map_err(|e| e.to_string())?;
            worst = worst.max(max_relative_error(&analytic, &fd));
        }
        Ok(CheckResult {
            name: "gamma_gradient",
            passed: worst <= 1e-5,
            observed: format!("max relative error {worst:.3e}"),
            expected: "<= 1e-5".into(),
            warnings: Vec::new(),
        })
    }

    fn nu_gradient(&self) -> Result<CheckResult, String> {
        let mut worst = 0.0f64;
        for i in 0..3 {
            let k = 2 + (i % 2) as usize;
            let ci = random_corpus_instance(k, 4, 5, 6, derive_seed(self.cfg.seed, 20 + i));
            let stats = transition_stats(&ci.corpus, &ci.states).map_err(|e| e.to_string())?;
            let analytic = nu_gradient(&stats, &ci.global.nu, ci.hyper.alpha_t).map_err(|e| e.to_string())?;
            let fd = finite_diff(
                |flat| {
                    let global = GlobalParams {
                        log_tau: ci.global.log_tau.clone(),
                        nu: Array2::from_shape_vec((k, k), flat.to_vec()).expect("k*k entries"),
                    };
                    corpus_elbo(&ci.corpus, &ci.states, &global, &ci.hyper).map_or(f64::NAN, |e| e.total)
                },
                &ci.global.nu.iter().copied().collect::<Vec<_>>(),
                FD_STEP,
            )
            .map_err(|e| e.to_string())?;
            worst = worst.max(max_relative_error(&analytic.iter().copied().collect::<Vec<_>>(), &fd));
        }
        Ok(CheckResult {
            name: "nu_gradient",
            passed: worst <= 1e-5,
            observed: format!("max relative error {worst:.3e}"),
            expected: "<= 1e-5".into(),
            warnings: Vec::new(),
        })
    }

    fn omega_stationarity(&self) -> Result<CheckResult, String> {
        let mut worst_deriv = 0.0f64;
        let mut worst_identity = 0.0f64;
        for i in 0..5 {
            let mut inst = self.instance(30 + i);
            inst.var.omega = update_omega(&inst.doc, &inst.var, &inst.global).map_err(|e| e.to_string())?;
            let s = edge_normalizer(&inst.doc, &inst.var, &inst.global)
                .map_err(|e| e.to_string())?
                .s;
            let per_word = omega_bound_terms(&inst.doc, &inst.var, &inst.global).map_err(|e| e.to_string())?;
            for n in 0..inst.doc.len() {
                let (Some(sn), Some(value)) = (s[n], per_word[n]) else {
                    continue;
                };
                worst_identity = worst_identity.max((value + sn.ln()).abs());
                let d = finite_diff(
                    |x| {
                        let mut v = inst.var.clone();
                        v.omega[n] = x[0];
                        self.total(&inst, &v)
                    },
                    &[inst.var.omega[n]],
                    FD_STEP,
                )
                .map_err(|e| e.to_string())?;
                worst_deriv = worst_deriv.max(d[0].abs());
            }
        }
        Ok(CheckResult {
            name: "omega_stationarity",
            passed: worst_deriv <= 1e-6 && worst_identity <= 1e-10,
            observed: format!("max |d bound/d omega| {worst_deriv:.3e}, max |term + ln s| {worst_identity:.3e}"),
            expected: "<= 1e-6 and <= 1e-10".into(),
            warnings: Vec::new(),
        })
    }

    fn identities(&self) -> Result<CheckResult, String> {
        let mut worst_k1 = 0.0f64;
        let mut worst_n0 = 0.0f64;
        for i in 0..5 {
            let mut inst = random_instance(1, 1 + i as usize, 5, derive_seed(self.cfg.seed, 40 + i));
            inst.var.omega.fill(1.0);
            let expected: f64 = inst.doc.words().iter().map(|&w| inst.global.log_tau[[0, w]]).sum();
            worst_k1 = worst_k1.max((self.total(&inst, &inst.var) - expected).abs());

            let mut empty = random_instance(2 + (i % 2) as usize, 0, 5, derive_seed(self.cfg.seed, 50 + i));
            empty.var.gamma = Array1::from(empty.hyper.doc_prior());
            worst_n0 = worst_n0.max(self.total(&empty, &empty.var).abs());
        }
        Ok(CheckResult {
            name: "identities",
            passed: worst_k1 <= 1e-12 && worst_n0 <= 1e-12,
            observed: format!("K=1: |total - sum log tau| {worst_k1:.3e}; N=0: |total| {worst_n0:.3e}"),
            expected: "both <= 1e-12".into(),
            warnings: Vec::new(),
        })
    }

    fn monotonicity(&self) -> Result<CheckResult, String> {
        let (k, v) = (3, 15);
        let tau = random_stochastic_matrix(k, v, derive_seed(self.cfg.seed, 60));
        let pi = random_stochastic_matrix(k, k, derive_seed(self.cfg.seed, 61));
        let hyper = Hyperparams::symmetric(k, 1.0, 1.0, 1.0).map_err(|e| e.to_string())?;
        let synth =
            sample_corpus(&tau, &pi, &hyper, 30, 6.0, derive_seed(self.cfg.seed, 62)).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            max_em_iters: 10,
            seed: self.cfg.seed,
            audit: true,
            ..TrainConfig::default()
        };
        let (_, trace) = train(&synth.corpus, &hyper, &cfg).map_err(|e| e.to_string())?;
        let worst = trace
            .update_audit
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        Ok(CheckResult {
            name: "monotonicity_audit",
            passed: worst >= -1e-12,
            observed: format!("smallest step {worst:.3e} over {} updates", trace.update_audit.len()),
            expected: ">= -1e-12".into(),
            warnings: Vec::new(),
        })
    }
}

/// Componentwise |a − b| / |b|, with exact agreement counting as zero.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| if a == r { 0.0 } else { (a - r).abs() / r.abs() })
        .fold(0.0, f64::max)
}

/// Runs every check; a check that errors out is reported as failed.
pub fn run_suite(cfg: &SuiteConfig) -> Vec<CheckResult> {
    let suite = Suite { cfg };
    type Check<'a> = fn(&Suite<'a>) -> Result<CheckResult, String>;
    let checks: [(&'static str, Check); 6] = [
        ("mc_elbo_agreement", Suite::mc_agreement),
        ("gamma_gradient", Suite::gamma_gradient),
        ("nu_gradient", Suite::nu_gradient),
        ("omega_stationarity", Suite::omega_stationarity),
        ("identities", Suite::identities),
        ("monotonicity_audit", Suite::monotonicity),
    ];
    checks
        .iter()
        .map(|(name, check)| {
            check(&suite).unwrap_or_else(|e| CheckResult {
                name,
                passed: false,
                observed: format!("error: {e}"),
                expected: "check completes".into(),
                warnings: Vec::new(),
            })
        })
        .collect()
}
