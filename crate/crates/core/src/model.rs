//! Model and variational parameters, their initialisation, and the model
//! file format.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use thiserror::Error;

use crate::corpus::{DepDocument, Vocabulary};
use crate::rng::{stream_rng, streams};
use crate::scalar::{format_real, Real};
use crate::special::exact_sum;

/// Additive count floor applied to every topic-word entry after an M-step.
pub const TAU_SMOOTHING: f64 = 1e-10;

pub const MODEL_HEADER: &str = "TREESTM v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unsupported model version {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
    #[error("missing section {0}")]
    MissingSection(&'static str),
    #[error("dimension mismatch in {section}: expected {expected}, found {found}")]
    Dimension {
        section: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams<T> {
    /// Base measure of the document prior, length K.
    pub alpha_d: Vec<T>,
    /// Concentration multiplying `alpha_d`.
    pub beta_star: T,
    /// Symmetric Dirichlet weight on every transition row.
    pub alpha_t: T,
}

impl<T: Real> Hyperparams<T> {
    pub fn new(alpha_d: Vec<T>, beta_star: T, alpha_t: T) -> Result<Self, ModelError> {
        let h = Self {
            alpha_d,
            beta_star,
            alpha_t,
        };
        h.validate()?;
        Ok(h)
    }

    /// Uniform base measure of weight `alpha` over `k` topics.
    pub fn symmetric(k: usize, alpha: T, beta_star: T, alpha_t: T) -> Result<Self, ModelError> {
        Self::new(vec![alpha; k], beta_star, alpha_t)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let pos = |x: T| x.is_finite() && x > T::zero();
        if self.alpha_d.is_empty() {
            return Err(ModelError::Hyperparams("K must be at least 1".into()));
        }
        if !self.alpha_d.iter().all(|&a| pos(a)) {
            return Err(ModelError::Hyperparams("alpha_d entries must be finite and > 0".into()));
        }
        if !pos(self.beta_star) {
            return Err(ModelError::Hyperparams("beta_star must be finite and > 0".into()));
        }
        if !pos(self.alpha_t) {
            return Err(ModelError::Hyperparams("alpha_t must be finite and > 0".into()));
        }
        Ok(())
    }

    pub fn num_topics(&self) -> usize {
        self.alpha_d.len()
    }

    /// The Dirichlet prior on document proportions, `beta_star * alpha_d`.
    pub fn doc_prior(&self) -> Vec<T> {
        self.alpha_d.iter().map(|&a| self.beta_star * a).collect()
    }
}

/// Corpus-level parameters shared by every document.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalParams<T> {
    /// K×V log topic-word probabilities.
    pub log_tau: Array2<T>,
    /// K×K variational Dirichlet parameters; row j governs transitions out of
    /// parent topic j.
    pub nu: Array2<T>,
}

impl<T: Real> GlobalParams<T> {
    pub fn num_topics(&self) -> usize {
        self.log_tau.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.log_tau.ncols()
    }

    /// log τ_{topic, word}; ids at or beyond V are out-of-vocabulary and get
    /// the smoothing floor.
    #[inline]
    pub fn word_log_prob(&self, topic: usize, word: usize) -> T {
        if word < self.log_tau.ncols() {
            self.log_tau[[topic, word]]
        } else {
            T::lit(TAU_SMOOTHING).ln()
        }
    }

    pub fn debug_validate(&self) -> Result<(), ModelError> {
        let k = self.log_tau.nrows();
        if k == 0 || self.log_tau.ncols() == 0 {
            return Err(ModelError::Invariant("empty topic-word matrix".into()));
        }
        if self.nu.dim() != (k, k) {
            return Err(ModelError::Invariant(format!(
                "nu is {:?}, expected ({k}, {k})",
                self.nu.dim()
            )));
        }
        for (i, row) in self.log_tau.rows().into_iter().enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(ModelError::Invariant(format!("log_tau row {i} not finite")));
            }
            let s = exact_sum(row.iter().map(|x| x.exp()));
            if (s - T::one()).abs() > sum_tolerance::<T>(1e-10, row.len()) {
                return Err(ModelError::Invariant(format!("tau row {i} sums to {s}")));
            }
        }
        if self.nu.iter().any(|&x| !(x.is_finite() && x > T::zero())) {
            return Err(ModelError::Invariant("nu entries must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Allowed deviation of a normalized row's sum from 1: `base`, widened to a
/// few rounding units per entry for low-precision scalars.
fn sum_tolerance<T: Real>(base: f64, len: usize) -> T {
    T::lit(base).max(T::epsilon() * T::from_usize_lossy(4 * len.max(1)))
}

/// Per-document variational state.
#[derive(Debug, Clone, PartialEq)]
pub struct DocVariational<T> {
    /// Dirichlet parameters of q(θ), length K.
    pub gamma: Array1<T>,
    /// N×K topic responsibilities, rows on the simplex.
    pub phi: Array2<T>,
    /// Auxiliary bound parameters, length N; the root entry is unused.
    pub omega: Array1<T>,
}

impl<T: Real> DocVariational<T> {
    pub fn num_topics(&self) -> usize {
        self.gamma.len()
    }

    pub fn phi_row(&self, n: usize) -> ArrayView1<'_, T> {
        self.phi.row(n)
    }

    pub fn debug_validate(&self, doc: &DepDocument) -> Result<(), ModelError> {
        let k = self.gamma.len();
        let n = doc.len();
        if self.phi.dim() != (n, k) || self.omega.len() != n {
            return Err(ModelError::Invariant(format!(
                "state dims phi {:?} omega {} do not match N={n} K={k}",
                self.phi.dim(),
                self.omega.len()
            )));
        }
        if self.gamma.iter().any(|&g| !(g.is_finite() && g > T::zero())) {
            return Err(ModelError::Invariant("gamma entries must be finite and > 0".into()));
        }
        if self.omega.iter().any(|&w| !(w.is_finite() && w > T::zero())) {
            return Err(ModelError::Invariant("omega entries must be finite and > 0".into()));
        }
        for (i, row) in self.phi.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
                return Err(ModelError::Invariant(format!("phi row {i} outside [0, 1]")));
            }
            let s = exact_sum(row.iter().copied());
            if (s - T::one()).abs() > sum_tolerance::<T>(1e-12, row.len()) {
                return Err(ModelError::Invariant(format!("phi row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

/// Per-document bound split into its term groups.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboBreakdown<T> {
    /// E_q[log p(θ | β*α_D)].
    pub prior_cross_entropy: T,
    /// Σ_n Σ_i φ_{n,i} E[log θ_i], root included.
    pub theta_alloc: T,
    /// Σ_{non-root n} Σ_{i,j} φ_{n,i} φ_{p(n),j} E[log π_{j,i}].
    pub transition: T,
    /// −Σ_{non-root n} (s_n / ω_n + log ω_n − 1).
    pub omega_bound: T,
    /// Σ_n Σ_i φ_{n,i} log τ_{i,w_n}.
    pub word_likelihood: T,
    /// Entropy of q(θ).
    pub dirichlet_entropy: T,
    /// Entropy of the φ rows.
    pub phi_entropy: T,
    pub total: T,
}

impl<T: Real> ElboBreakdown<T> {
    pub const TERM_NAMES: [&'static str; 7] = [
        "prior_cross_entropy",
        "theta_alloc",
        "transition",
        "omega_bound",
        "word_likelihood",
        "dirichlet_entropy",
        "phi_entropy",
    ];

    pub fn from_terms(terms: [T; 7]) -> Self {
        let mut b = Self {
            prior_cross_entropy: terms[0],
            theta_alloc: terms[1],
            transition: terms[2],
            omega_bound: terms[3],
            word_likelihood: terms[4],
            dirichlet_entropy: terms[5],
            phi_entropy: terms[6],
            total: T::zero(),
        };
        b.total = exact_sum(terms);
        b
    }

    pub fn terms(&self) -> [T; 7] {
        [
            self.prior_cross_entropy,
            self.theta_alloc,
            self.transition,
            self.omega_bound,
            self.word_likelihood,
            self.dirichlet_entropy,
            self.phi_entropy,
        ]
    }

    /// Componentwise sum over documents, correctly rounded and therefore
    /// independent of document order. The total is the sum of the
    /// per-document totals.
    pub fn sum<'a, I: IntoIterator<Item = &'a Self>>(items: I) -> Self
    where
        T: 'a,
    {
        let mut cols: [Vec<T>; 7] = Default::default();
        let mut totals = Vec::new();
        for b in items {
            for (c, t) in cols.iter_mut().zip(b.terms()) {
                c.push(t);
            }
            totals.push(b.total);
        }
        let mut terms = [T::zero(); 7];
        for (t, c) in terms.iter_mut().zip(cols.iter()) {
            *t = exact_sum(c.iter().copied());
        }
        let mut b = Self::from_terms(terms);
        b.total = exact_sum(totals);
        b
    }
}

/// Starting point for one document: γ = β*α_D + N/K, near-uniform φ, ω = 1.
pub fn init_variational<T: Real>(doc: &DepDocument, hyper: &Hyperparams<T>, seed: u64) -> DocVariational<T> {
    let k = hyper.num_topics();
    let n = doc.len();
    let kt = T::from_usize_lossy(k);
    let share = T::from_usize_lossy(n) / kt;
    let gamma = Array1::from_iter(hyper.doc_prior().into_iter().map(|a| a + share));

    let mut rng = stream_rng(seed, streams::DOC_INIT);
    let mut phi = Array2::from_elem((n, k), T::one() / kt);
    for mut row in phi.rows_mut() {
        for p in row.iter_mut() {
            let u: f64 = rng.random_range(-1.0..1.0);
            *p = *p * (T::one() + T::lit(1e-3 * u));
        }
        let s = exact_sum(row.iter().copied());
        row.mapv_inplace(|p| p / s);
    }
    DocVariational {
        gamma,
        phi,
        omega: Array1::from_elem(n, T::one()),
    }
}

/// Random topics and near-prior transition parameters.
pub fn init_global<T: Real>(k: usize, v: usize, alpha_t: T, seed: u64) -> GlobalParams<T> {
    assert!(k >= 1 && v >= 1, "need K >= 1 and V >= 1");
    let mut rng = stream_rng(seed, streams::GLOBAL_INIT);
    let mut log_tau = Array2::zeros((k, v));
    for mut row in log_tau.rows_mut() {
        // (0, 1] keeps every entry strictly positive
        let draws: Vec<f64> = (0..v).map(|_| 1.0 - rng.random::<f64>()).collect();
        let total = exact_sum(draws.iter().copied());
        for (x, d) in row.iter_mut().zip(draws) {
            *x = T::lit((d / total).ln());
        }
    }
    let scale = (alpha_t * T::lit(0.5)).min(T::lit(1e-2));
    let nu = Array2::from_shape_fn((k, k), |_| {
        let u: f64 = rng.random_range(-1.0..1.0);
        alpha_t + scale * T::lit(u)
    });
    GlobalParams { log_tau, nu }
}

/// Writes the text model file.
pub fn serialize_model<T: Real>(global: &GlobalParams<T>, hyper: &Hyperparams<T>, vocab: &Vocabulary) -> String {
    let k = global.num_topics();
    let v = global.vocab_size();
    let row = |xs: &mut dyn Iterator<Item = T>| xs.map(format_real).collect::<Vec<_>>().join(" ");
    let mut out = String::new();
    writeln!(out, "{MODEL_HEADER}").unwrap();
    writeln!(out, "K {k} V {v}").unwrap();
    writeln!(out, "ALPHA_D {}", row(&mut hyper.alpha_d.iter().copied())).unwrap();
    writeln!(out, "BETA_STAR {}", format_real(hyper.beta_star)).unwrap();
    writeln!(out, "ALPHA_T {}", format_real(hyper.alpha_t)).unwrap();
    writeln!(out, "LOG_TAU").unwrap();
    for r in global.log_tau.rows() {
        writeln!(out, "{}", row(&mut r.iter().copied())).unwrap();
    }
    writeln!(out, "NU").unwrap();
    for r in global.nu.rows() {
        writeln!(out, "{}", row(&mut r.iter().copied())).unwrap();
    }
    writeln!(out, "VOCAB").unwrap();
    for (id, tok) in vocab.tokens().iter().enumerate() {
        writeln!(out, "{id} {tok}").unwrap();
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, section: &'static str) -> Result<(usize, &'a str), ModelError> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or(ModelError::MissingSection(section))
    }
}

fn parse_reals<T: Real>(
    line: usize,
    fields: &[&str],
    section: &'static str,
    expected: usize,
) -> Result<Vec<T>, ModelError> {
    if fields.len() != expected {
        return Err(ModelError::Dimension {
            section,
            expected,
            found: fields.len(),
        });
    }
    fields
        .iter()
        .map(|f| {
            let x: T = f.parse().map_err(|_| ModelError::Malformed {
                line,
                message: format!("bad number {f:?} in {section}"),
            })?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(ModelError::NonFinite(section))
            }
        })
        .collect()
}

fn keyword<'a>(lines: &mut Lines<'a>, key: &'static str) -> Result<(usize, Vec<&'a str>), ModelError> {
    let (no, l) = lines.next(key)?;
    let mut fields = l.split_whitespace();
    if fields.next() != Some(key) {
        return Err(ModelError::Malformed {
            line: no,
            message: format!("expected {key}"),
        });
    }
    Ok((no, fields.collect()))
}

/// Inverse of [`serialize_model`].
pub fn deserialize_model<T: Real>(text: &str) -> Result<(GlobalParams<T>, Hyperparams<T>, Vocabulary), ModelError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, header) = lines.next("header")?;
    if header.trim() != MODEL_HEADER {
        return Err(ModelError::Version {
            found: header.trim().to_owned(),
            expected: MODEL_HEADER.to_owned(),
        });
    }
    let (no, dims) = lines.next("K/V")?;
    let dims: Vec<&str> = dims.split_whitespace().collect();
    let bad_dims = || ModelError::Malformed {
        line: no,
        message: "expected `K <int> V <int>`".into(),
    };
    if dims.len() != 4 || dims[0] != "K" || dims[2] != "V" {
        return Err(bad_dims());
    }
    let k: usize = dims[1].parse().map_err(|_| bad_dims())?;
    let v: usize = dims[3].parse().map_err(|_| bad_dims())?;
    if k == 0 || v == 0 {
        return Err(bad_dims());
    }

    let (no, f) = keyword(&mut lines, "ALPHA_D")?;
    let alpha_d = parse_reals(no, &f, "ALPHA_D", k)?;
    let (no, f) = keyword(&mut lines, "BETA_STAR")?;
    let beta_star = parse_reals(no, &f, "BETA_STAR", 1)?[0];
    let (no, f) = keyword(&mut lines, "ALPHA_T")?;
    let alpha_t = parse_reals(no, &f, "ALPHA_T", 1)?[0];
    let hyper = Hyperparams::new(alpha_d, beta_star, alpha_t)?;

    keyword(&mut lines, "LOG_TAU")?;
    let mut log_tau = Array2::zeros((k, v));
    for i in 0..k {
        let (no, l) = lines.next("LOG_TAU")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        let row = parse_reals::<T>(no, &f, "LOG_TAU", v)?;
        log_tau.row_mut(i).assign(&Array1::from(row));
    }
    keyword(&mut lines, "NU")?;
    let mut nu = Array2::zeros((k, k));
    for i in 0..k {
        let (no, l) = lines.next("NU")?;
        let f: Vec<&str> = l.split_whitespace().collect();
        let row = parse_reals::<T>(no, &f, "NU", k)?;
        nu.row_mut(i).assign(&Array1::from(row));
    }
    keyword(&mut lines, "VOCAB")?;
    let mut tokens = Vec::with_capacity(v);
    for id in 0..v {
        let (no, l) = lines.next("VOCAB")?;
        let mut parts = l.split_whitespace();
        let (Some(idf), Some(tok), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(ModelError::Malformed {
                line: no,
                message: "expected `id token`".into(),
            });
        };
        if idf.parse::<usize>().ok() != Some(id) {
            return Err(ModelError::Malformed {
                line: no,
                message: format!("expected vocabulary id {id}"),
            });
        }
        tokens.push(tok.to_owned());
    }
    let extra = lines.inner.filter(|(_, l)| !l.trim().is_empty()).count();
    if extra > 0 {
        return Err(ModelError::Dimension {
            section: "VOCAB",
            expected: v,
            found: v + extra,
        });
    }
    let vocab = Vocabulary::from_tokens(tokens).map_err(|m| ModelError::Malformed { line: 0, message: m })?;
    Ok((GlobalParams { log_tau, nu }, hyper, vocab))
}
