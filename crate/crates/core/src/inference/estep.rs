use ndarray::Array1;

use super::{log_space_ascent, EStepConfig, InferenceError};
use crate::corpus::DepDocument;
use crate::elbo::{check_dims, document_elbo_with, edge_normalizer_with, GammaStats, TransitionStats};
use crate::model::{init_variational, DocVariational, ElboBreakdown, GlobalParams, Hyperparams};
use crate::scalar::Real;
use crate::special::{exact_sum, log_sum_exp, trigamma};

const OMEGA_FLOOR: f64 = 1e-300;

fn gamma_stats<T: Real>(
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    trans: &TransitionStats<T>,
) -> Result<GammaStats<T>, InferenceError> {
    Ok(GammaStats::new(
        var.gamma.as_slice().expect("contiguous"),
        global,
        trans,
    )?)
}

pub(crate) fn update_omega_with<T: Real>(doc: &DepDocument, var: &DocVariational<T>, gs: &GammaStats<T>) -> Array1<T> {
    edge_normalizer_with(doc, var, gs)
        .into_iter()
        .map(|s| match s {
            Some(s) => s.max(T::lit(OMEGA_FLOOR)),
            None => T::one(),
        })
        .collect()
}

/// Closed-form ω: each non-root ω_n becomes its expected edge normalizer.
pub fn update_omega<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
) -> Result<Array1<T>, InferenceError> {
    check_dims(doc, var, global)?;
    let trans = TransitionStats::new(&global.nu)?;
    let gs = gamma_stats(var, global, &trans)?;
    Ok(update_omega_with(doc, var, &gs))
}

pub(crate) fn update_phi_with<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    trans: &TransitionStats<T>,
    gs: &GammaStats<T>,
    n: usize,
) -> Result<Array1<T>, InferenceError> {
    let k = global.num_topics();
    let e_pi = &trans.expected_log_pi;
    let mut logits = vec![T::zero(); k];
    for (i, l) in logits.iter_mut().enumerate() {
        let mut parts = vec![gs.expected_log_theta[i], global.word_log_prob(i, doc.word(n))];
        if let Some(p) = doc.parent(n) {
            let phi_p = var.phi.row(p);
            parts.extend((0..k).map(|j| phi_p[j] * e_pi[[j, i]]));
        }
        for &c in doc.children(n) {
            let phi_c = var.phi.row(c);
            parts.extend((0..k).map(|m| phi_c[m] * e_pi[[i, m]]));
            parts.push(-gs.edge_ratio[i] / var.omega[c]);
        }
        *l = exact_sum(parts);
    }
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(InferenceError::NonFinite {
            term: format!("phi logit for word {n}, topic {i}"),
        });
    }
    let lse = log_sum_exp(&logits)?;
    let mut row: Array1<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
    let s = exact_sum(row.iter().copied());
    row.mapv_inplace(|p| p / s);
    Ok(row)
}

/// The maximizing φ row for word `n` with everything else held fixed.
pub fn update_phi<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    n: usize,
) -> Result<Array1<T>, InferenceError> {
    check_dims(doc, var, global)?;
    let trans = TransitionStats::new(&global.nu)?;
    let gs = gamma_stats(var, global, &trans)?;
    update_phi_with(doc, var, global, &trans, &gs, n)
}

pub(crate) fn gamma_gradient_with<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    gamma: &[T],
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    trans: &TransitionStats<T>,
) -> Result<Vec<T>, InferenceError> {
    let k = gamma.len();
    if k == 1 {
        // a single topic makes the bound independent of γ
        return Ok(vec![T::zero()]);
    }
    let prior = hyper.doc_prior();
    let s = exact_sum(gamma.iter().copied());
    let tri_s = trigamma(s)?;
    // c_i = a_i + Σ_n φ_{n,i} − γ_i
    let c: Vec<T> = (0..k)
        .map(|i| {
            let mut parts: Vec<T> = var.phi.column(i).to_vec();
            parts.push(prior[i]);
            parts.push(-gamma[i]);
            exact_sum(parts)
        })
        .collect();
    let c_sum = exact_sum(c.iter().copied());

    // B_j = Σ_{non-root n} φ_{p(n),j} / ω_n
    let mut b = vec![Vec::new(); k];
    for (n, p) in doc.edges() {
        for (j, bj) in b.iter_mut().enumerate() {
            bj.push(var.phi[[p, j]] / var.omega[n]);
        }
    }
    let b: Vec<T> = b.into_iter().map(exact_sum).collect();
    let m: Vec<T> = (0..k)
        .map(|j| exact_sum((0..k).map(|i| gamma[i] * global.nu[[j, i]])))
        .collect();

    (0..k)
        .map(|q| {
            let mut parts = vec![c[q] * trigamma(gamma[q])?, -tri_s * c_sum];
            for j in 0..k {
                let w = b[j] / trans.row_sums[j];
                parts.push(-w * global.nu[[j, q]] / s);
                parts.push(w * m[j] / (s * s));
            }
            Ok(exact_sum(parts))
        })
        .collect()
}

/// Analytic ∂(bound)/∂γ.
pub fn gamma_gradient<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
) -> Result<Vec<T>, InferenceError> {
    check_dims(doc, var, global)?;
    let trans = TransitionStats::new(&global.nu)?;
    gamma_gradient_with(
        doc,
        var,
        var.gamma.as_slice().expect("contiguous"),
        global,
        hyper,
        &trans,
    )
}

pub(crate) fn update_gamma_with<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    trans: &TransitionStats<T>,
    cfg: &EStepConfig,
) -> Result<(Array1<T>, T), InferenceError> {
    let objective = |g: &[T]| -> Result<T, InferenceError> {
        let mut probe = var.clone();
        probe.gamma = Array1::from(g.to_vec());
        Ok(document_elbo_with(doc, &probe, global, hyper, trans)?.total)
    };
    let gradient = |g: &[T]| gamma_gradient_with(doc, var, g, global, hyper, trans);
    let (gamma, total) = log_space_ascent(
        var.gamma.to_vec(),
        objective,
        gradient,
        cfg.gamma_max_inner_iters,
        cfg.gamma_step_shrink,
    )?;
    Ok((Array1::from(gamma), total))
}

/// Monotone backtracking ascent on γ with φ and ω held fixed.
pub fn update_gamma<T: Real>(
    doc: &DepDocument,
    var: &DocVariational<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    cfg: &EStepConfig,
) -> Result<Array1<T>, InferenceError> {
    cfg.validate()?;
    check_dims(doc, var, global)?;
    let trans = TransitionStats::new(&global.nu)?;
    Ok(update_gamma_with(doc, var, global, hyper, &trans, cfg)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepOutcome<T> {
    pub elbo: ElboBreakdown<T>,
    pub sweeps: usize,
}

fn relative_change<T: Real>(new: T, old: T) -> T {
    (new - old).abs() / old.abs().max(T::min_positive_value())
}

/// Runs coordinate-ascent sweeps from the given state.
///
/// Each sweep refreshes ω, then every φ row in topological order, then γ.
/// A closed-form update that would lower the computed bound (possible only
/// through rounding) is discarded. When `audit` is given, the bound after
/// every individual update is appended to it.
pub fn refine_document<T: Real>(
    doc: &DepDocument,
    var: &mut DocVariational<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    trans: &TransitionStats<T>,
    cfg: &EStepConfig,
    mut audit: Option<&mut Vec<T>>,
) -> Result<EStepOutcome<T>, InferenceError> {
    cfg.validate()?;
    check_dims(doc, var, global)?;
    let mut elbo = document_elbo_with(doc, var, global, hyper, trans)?;
    let mut record = |t: T| {
        if let Some(a) = audit.as_deref_mut() {
            a.push(t);
        }
    };
    let mut sweeps = 0;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let before = elbo.total;

        let gs = gamma_stats(var, global, trans)?;
        let new_omega = update_omega_with(doc, var, &gs);
        let old_omega = std::mem::replace(&mut var.omega, new_omega);
        let cand = document_elbo_with(doc, var, global, hyper, trans)?;
        if cand.total >= elbo.total {
            elbo = cand;
        } else {
            var.omega = old_omega;
        }
        record(elbo.total);

        for &n in doc.topological_order() {
            let row = update_phi_with(doc, var, global, trans, &gs, n)?;
            let old_row = var.phi.row(n).to_owned();
            var.phi.row_mut(n).assign(&row);
            let cand = document_elbo_with(doc, var, global, hyper, trans)?;
            if cand.total >= elbo.total {
                elbo = cand;
            } else {
                var.phi.row_mut(n).assign(&old_row);
            }
            record(elbo.total);
        }

        let (gamma, _) = update_gamma_with(doc, var, global, hyper, trans, cfg)?;
        if gamma != var.gamma {
            let old_gamma = std::mem::replace(&mut var.gamma, gamma);
            let cand = document_elbo_with(doc, var, global, hyper, trans)?;
            if cand.total >= elbo.total {
                elbo = cand;
            } else {
                var.gamma = old_gamma;
            }
        }
        record(elbo.total);

        if !elbo.total.is_finite() {
            return Err(InferenceError::NonFinite {
                term: non_finite_term(&elbo),
            });
        }
        if relative_change(elbo.total, before) < T::lit(cfg.tol) {
            break;
        }
    }
    Ok(EStepOutcome { elbo, sweeps })
}

pub(crate) fn non_finite_term<T: Real>(b: &ElboBreakdown<T>) -> String {
    ElboBreakdown::<T>::TERM_NAMES
        .iter()
        .zip(b.terms())
        .find(|(_, t)| !t.is_finite())
        .map_or("total", |(n, _)| n)
        .to_string()
}

/// Fits one document from a fresh seeded start with the global parameters
/// held fixed.
pub fn estep_document<T: Real>(
    doc: &DepDocument,
    global: &GlobalParams<T>,
    hyper: &Hyperparams<T>,
    cfg: &EStepConfig,
    seed: u64,
) -> Result<(DocVariational<T>, ElboBreakdown<T>), InferenceError> {
    cfg.validate()?;
    let trans = TransitionStats::new(&global.nu)?;
    let mut var = init_variational(doc, hyper, seed);
    let out = refine_document(doc, &mut var, global, hyper, &trans, cfg, None)?;
    Ok((var, out.elbo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elbo::document_elbo;
    use crate::model::init_global;
    use ndarray::{array, Array2};

    fn tree() -> DepDocument {
        DepDocument::new(vec![0, 1, 2, 1, 3], vec![None, Some(0), Some(0), Some(1), Some(1)]).unwrap()
    }

    fn random_state(k: usize, seed: u64) -> (DepDocument, DocVariational<f64>, GlobalParams<f64>, Hyperparams<f64>) {
        let d = tree();
        let h = Hyperparams::new((0..k).map(|i| 0.4 + 0.3 * i as f64).collect(), 1.7, 1.0).unwrap();
        let mut g = init_global(k, 4, 1.0, seed);
        g.nu.mapv_inplace(|x| x * 1.5 + 0.2);
        g.nu[[0, k - 1]] = 3.1;
        let mut v = init_variational(&d, &h, seed);
        v.gamma = (0..k).map(|i| 0.8 + 1.3 * i as f64).collect();
        for (n, mut row) in v.phi.rows_mut().into_iter().enumerate() {
            for (i, p) in row.iter_mut().enumerate() {
                *p = 1.0 + ((n * 7 + i * 3) % 5) as f64;
            }
            let s: f64 = row.sum();
            row.mapv_inplace(|p| p / s);
        }
        v.omega = (0..d.len()).map(|n| 0.3 + 0.2 * n as f64).collect();
        (d, v, g, h)
    }

    #[test]
    fn omega_examples() {
        let d = DepDocument::new(vec![0, 0], vec![None, Some(0)]).unwrap();
        let g = GlobalParams {
            log_tau: Array2::from_elem((2, 1), 0.5f64.ln()),
            nu: Array2::from_elem((2, 2), 1.0),
        };
        let v = DocVariational {
            gamma: array![1.0, 1.0],
            phi: array![[0.5, 0.5], [0.5, 0.5]],
            omega: array![3.0, 3.0],
        };
        assert_eq!(update_omega(&d, &v, &g).unwrap(), array![1.0, 0.5]);

        let (d, mut v, g, h) = random_state(1, 3);
        v.omega.fill(0.2);
        let w = update_omega(&d, &v, &g).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
        let _ = h;
    }

    #[test]
    fn omega_update_does_not_decrease_bound() {
        for seed in 0..5 {
            let (d, mut v, g, h) = random_state(3, seed);
            let before = document_elbo(&d, &v, &g, &h).unwrap().total;
            v.omega = update_omega(&d, &v, &g).unwrap();
            let after = document_elbo(&d, &v, &g, &h).unwrap().total;
            assert!(after - before >= -1e-12);
        }
    }

    #[test]
    fn phi_symmetric_state_is_uniform() {
        let d = tree();
        let k = 3;
        let g = GlobalParams {
            log_tau: Array2::from_elem((k, 4), 0.25f64.ln()),
            nu: Array2::from_elem((k, k), 2.0),
        };
        let h = Hyperparams::symmetric(k, 1.0, 1.0, 1.0).unwrap();
        let mut v = init_variational(&d, &h, 0);
        v.phi.fill(1.0 / 3.0);
        v.gamma.fill(2.0);
        for n in 0..d.len() {
            let row = update_phi(&d, &v, &g, n).unwrap();
            for &p in row.iter() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn phi_single_root_word_follows_tau() {
        let d = DepDocument::new(vec![0], vec![None]).unwrap();
        let g = GlobalParams {
            log_tau: array![[0.9f64.ln()], [0.1f64.ln()]],
            nu: Array2::from_elem((2, 2), 1.0),
        };
        let v = DocVariational {
            gamma: array![1.0, 1.0],
            phi: array![[0.5, 0.5]],
            omega: array![1.0],
        };
        let row = update_phi(&d, &v, &g, 0).unwrap();
        assert!((row[0] - 0.9).abs() < 1e-14 && (row[1] - 0.1).abs() < 1e-14);
    }

    #[test]
    fn phi_update_does_not_decrease_bound() {
        for seed in 0..5 {
            let (d, mut v, g, h) = random_state(3, seed);
            for n in 0..d.len() {
                let before = document_elbo(&d, &v, &g, &h).unwrap().total;
                let row = update_phi(&d, &v, &g, n).unwrap();
                v.phi.row_mut(n).assign(&row);
                let after = document_elbo(&d, &v, &g, &h).unwrap().total;
                assert!(after - before >= -1e-12, "word {n}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn gamma_gradient_special_cases() {
        let (d, v, g, h) = random_state(1, 2);
        assert_eq!(gamma_gradient(&d, &v, &g, &h).unwrap(), vec![0.0]);

        let h = Hyperparams::new(vec![0.3, 0.9], 2.0, 1.0).unwrap();
        let g: GlobalParams<f64> = init_global(2, 3, 1.0, 1);
        let d = DepDocument::empty();
        let v = init_variational(&d, &h, 0);
        assert_eq!(gamma_gradient(&d, &v, &g, &h).unwrap(), vec![0.0, 0.0]);
        let cfg = EStepConfig::default();
        assert_eq!(update_gamma(&d, &v, &g, &h, &cfg).unwrap(), v.gamma);
    }

    #[test]
    fn gamma_update_is_monotone_and_stationary() {
        let cfg = EStepConfig::default();
        for seed in 0..5 {
            let (d, mut v, g, h) = random_state(3, seed);
            let before = document_elbo(&d, &v, &g, &h).unwrap().total;
            v.gamma = update_gamma(&d, &v, &g, &h, &cfg).unwrap();
            let after = document_elbo(&d, &v, &g, &h).unwrap().total;
            assert!(after >= before);
            let grad = gamma_gradient(&d, &v, &g, &h).unwrap();
            assert!(grad.iter().all(|x| x.abs() <= 1e-6), "{grad:?}");
        }
    }

    #[test]
    fn single_topic_estep_converges_in_one_sweep() {
        let (d, _, g, h) = random_state(1, 4);
        let trans = TransitionStats::new(&g.nu).unwrap();
        let mut v = init_variational(&d, &h, 0);
        let out = refine_document(&d, &mut v, &g, &h, &trans, &EStepConfig::default(), None).unwrap();
        assert_eq!(out.sweeps, 1);
        let expected: f64 = d.words().iter().map(|&w| g.log_tau[[0, w]]).sum();
        assert!((out.elbo.total - expected).abs() <= 1e-12);
    }

    #[test]
    fn zero_sweeps_rejected() {
        let cfg = EStepConfig {
            max_sweeps: 0,
            ..EStepConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(InferenceError::Config(_))));
        let (d, _, g, h) = random_state(2, 0);
        assert!(estep_document(&d, &g, &h, &cfg, 0).is_err());
    }

    #[test]
    fn estep_audit_is_non_decreasing() {
        for seed in 0..4 {
            let (d, _, g, h) = random_state(3, seed);
            let trans = TransitionStats::new(&g.nu).unwrap();
            let mut v = init_variational(&d, &h, seed);
            let mut audit = vec![document_elbo(&d, &v, &g, &h).unwrap().total];
            refine_document(&d, &mut v, &g, &h, &trans, &EStepConfig::default(), Some(&mut audit)).unwrap();
            assert!(audit.windows(2).all(|w| w[1] >= w[0]));
            v.debug_validate(&d).unwrap();
        }
    }
}
