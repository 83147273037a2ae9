//! Scalar special functions and summation helpers used by the bound.

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("{func}: argument must be finite and > 0, got {value}")]
    NonPositive { func: &'static str, value: f64 },
    #[error("{func}: empty input")]
    Empty { func: &'static str },
    #[error("{func}: non-finite input at index {index}")]
    NonFinite { func: &'static str, index: usize },
}

/// Lanczos parameter for the `g = 10.900511` approximation.
const LANCZOS_G: f64 = 10.900511;

#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 11] = [
    2.48574089138753565546e-5,
    1.05142378581721974210,
    -3.45687097222016235469,
    4.51227709466894823700,
    -2.98285225323576655721,
    1.05639711577126713077,
    -1.95428773191645869583e-1,
    1.70970543404441224307e-2,
    -5.71926117404305781283e-4,
    4.63399473359905636708e-6,
    -2.71994908488607703910e-9,
];

/// ln(2 * sqrt(e / pi))
#[allow(clippy::excessive_precision)]
const LN_2_SQRT_E_OVER_PI: f64 = 0.6207822376352452223455184457816472122518527279025978;

/// B_{2k} / (2k) for k = 1..7, used by the digamma asymptotic series.
#[allow(clippy::excessive_precision)]
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// B_{2k} for k = 1..7, used by the trigamma asymptotic series.
#[allow(clippy::excessive_precision)]
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

const ASYMPTOTIC_THRESHOLD: f64 = 6.0;

#[inline]
fn check_positive<T: Real>(func: &'static str, x: T) -> Result<(), DomainError> {
    if x.is_finite() && x > T::zero() {
        Ok(())
    } else {
        Err(DomainError::NonPositive {
            func,
            value: x.as_f64(),
        })
    }
}

fn lanczos_ln_gamma<T: Real>(x: T) -> T {
    let one = T::one();
    let s = LANCZOS_COEF
        .iter()
        .enumerate()
        .skip(1)
        .fold(T::lit(LANCZOS_COEF[0]), |s, (i, &c)| {
            s + T::lit(c) / (x + T::from_usize_lossy(i) - one)
        });
    let half = T::lit(0.5);
    s.ln() + T::lit(LN_2_SQRT_E_OVER_PI) + (x - half) * ((x - half + T::lit(LANCZOS_G)) / T::E()).ln()
}

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma<T: Real>(x: T) -> Result<T, DomainError> {
    check_positive("log_gamma", x)?;
    if x == T::one() || x == T::lit(2.0) {
        return Ok(T::zero());
    }
    if x < T::lit(0.5) {
        // lnΓ(x) = lnΓ(x + 1) − ln x keeps the Lanczos sum on its accurate side.
        return Ok(lanczos_ln_gamma(x + T::one()) - x.ln());
    }
    Ok(lanczos_ln_gamma(x))
}

/// Digamma ψ(x) for `x > 0`: upward recurrence to x ≥ 6, then the asymptotic
/// series in 1/x².
pub fn digamma<T: Real>(x: T) -> Result<T, DomainError> {
    check_positive("digamma", x)?;
    let one = T::one();

    // Σ 1/(x+k) over the recurrence steps; the first (largest) reciprocal is
    // kept separate so its rounding error can be folded back in.
    let mut shifted = x;
    let mut tail = T::zero();
    let mut lead: Option<T> = None;
    while shifted < T::lit(ASYMPTOTIC_THRESHOLD) {
        if lead.is_none() {
            lead = Some(shifted);
        } else {
            tail = tail + one / shifted;
        }
        shifted = shifted + one;
    }

    let inv2 = one / (shifted * shifted);
    let mut series = T::zero();
    let mut power = inv2;
    for &c in DIGAMMA_SERIES.iter() {
        series = series + T::lit(c) * power;
        power = power * inv2;
    }
    let asym = shifted.ln() - T::lit(0.5) / shifted - series;

    Ok(match lead {
        None => asym,
        Some(x0) => {
            let r = one / x0;
            // residual of the division: 1/x0 = r + err exactly (to first order)
            let err = (-r).mul_add(x0, one) / x0;
            (asym - tail - err) - r
        }
    })
}

/// Trigamma ψ'(x) for `x > 0`, same recurrence-plus-series scheme as
/// [`digamma`].
pub fn trigamma<T: Real>(x: T) -> Result<T, DomainError> {
    check_positive("trigamma", x)?;
    let one = T::one();
    let mut shifted = x;
    let mut acc = T::zero();
    let mut small = Vec::new();
    while shifted < T::lit(ASYMPTOTIC_THRESHOLD) {
        small.push(one / (shifted * shifted));
        shifted = shifted + one;
    }
    let inv = one / shifted;
    let inv2 = inv * inv;
    let mut series = T::zero();
    let mut power = inv2 * inv;
    for &b in TRIGAMMA_SERIES.iter() {
        series = series + T::lit(b) * power;
        power = power * inv2;
    }
    acc = acc + inv + T::lit(0.5) * inv2 + series;
    // smallest terms first
    for term in small.into_iter().rev() {
        acc = acc + term;
    }
    Ok(acc)
}

/// Entry i is ψ(params_i) − ψ(Σ params), i.e. E[ln θ_i] under Dir(params).
pub fn dirichlet_expected_log<T: Real>(params: &[T]) -> Result<Vec<T>, DomainError> {
    if params.is_empty() {
        return Err(DomainError::Empty {
            func: "dirichlet_expected_log",
        });
    }
    let total = exact_sum(params.iter().copied());
    let psi_total = digamma(total)?;
    params
        .iter()
        .map(|&p| {
            if p == total {
                // K = 1 (or all mass on one entry): exact cancellation
                check_positive("dirichlet_expected_log", p).map(|_| T::zero())
            } else {
                digamma(p).map(|d| d - psi_total)
            }
        })
        .collect()
}

/// ln Σ exp(x_i) by max-shift.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> Result<T, DomainError> {
    if xs.is_empty() {
        return Err(DomainError::Empty { func: "log_sum_exp" });
    }
    if let Some(index) = xs.iter().position(|x| !x.is_finite()) {
        return Err(DomainError::NonFinite {
            func: "log_sum_exp",
            index,
        });
    }
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let s = pairwise_sum(&xs.iter().map(|&x| (x - max).exp()).collect::<Vec<_>>());
    Ok(max + s.ln())
}

/// Pairwise (tree) summation in the slice's order.
pub fn pairwise_sum<T: Real>(xs: &[T]) -> T {
    const BLOCK: usize = 8;
    if xs.len() <= BLOCK {
        return xs.iter().fold(T::zero(), |a, &b| a + b);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Correctly rounded sum of finite values (Shewchuk partials with the
/// half-way correction used by Python's `math.fsum`).
///
/// The result depends only on the multiset of inputs, and it is monotone:
/// increasing any single input never decreases the result.
pub fn exact_sum<T: Real, I: IntoIterator<Item = T>>(values: I) -> T {
    let mut partials: Vec<T> = Vec::new();
    let mut special = T::zero();
    for mut x in values {
        if !x.is_finite() {
            special = special + x;
            continue;
        }
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != T::zero() {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    if special != T::zero() || special.is_nan() {
        return special;
    }

    let mut n = partials.len();
    if n == 0 {
        return T::zero();
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = T::zero();
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != T::zero() {
            break;
        }
    }
    // round-half-even correction when the remainder sits exactly on a tie
    if n > 0 && ((lo < T::zero() && partials[n - 1] < T::zero()) || (lo > T::zero() && partials[n - 1] > T::zero())) {
        let y = lo + lo;
        let x = hi + y;
        let yr = x - hi;
        if y == yr {
            hi = x;
        }
    }
    hi
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from a 40-digit evaluation at the exact binary inputs.
    #[allow(clippy::excessive_precision)]
    const REFERENCE: [(f64, f64, f64, f64); 16] = [
        (
            1e-6,
            13.815509980749431714,
            -1000000.5772140200139,
            1000000000001.6450222,
        ),
        (
            1e-3,
            6.9071788853838536617,
            -1000.5755719318102797,
            1000001.6425331958273,
        ),
        (0.1, 2.252712651734205902, -10.423754940411076232, 101.4332991507927477),
        (
            0.5,
            0.57236494292470008707,
            -1.9635100260214234794,
            4.9348022005446793094,
        ),
        (1.0, 0.0, -0.57721566490153286061, 1.6449340668482264365),
        (
            1.5,
            -0.12078223763524522235,
            0.036489973978576520559,
            0.93480220054467930942,
        ),
        (2.0, 0.0, 0.42278433509846713939, 0.64493406684822643647),
        (
            2.5,
            0.28468287047291915963,
            0.70315664064524318723,
            0.49035775610023486497,
        ),
        (
            3.7,
            1.4280723266653881292,
            1.1671535393615114409,
            0.31003785767003830216,
        ),
        (
            7.0,
            6.5792512120101009951,
            1.8727843350984671394,
            0.15354517795933754758,
        ),
        (
            10.5,
            13.940625219403763633,
            2.3030010342976863753,
            0.099916956059126733204,
        ),
        (
            33.3,
            82.603723581654943008,
            3.4904672385202427773,
            0.03048544409533888779,
        ),
        (
            100.0,
            359.13420536957539878,
            4.6001618527380874002,
            0.010050166663333571395,
        ),
        (
            1234.5,
            7550.5509010778948957,
            7.1180162318279978433,
            0.0008103727271269666527,
        ),
        (
            1e5,
            1051287.7089736568949,
            11.512920464961895087,
            0.000010000050000166666667,
        ),
        (
            1e8,
            1742068066.1038347093,
            18.420680738952365464,
            1.0000000050000000167e-8,
        ),
    ];

    #[test]
    fn log_gamma_matches_reference() {
        for &(x, lg, _, _) in REFERENCE.iter() {
            let got = log_gamma(x).unwrap();
            // relative error, measured against max(|ref|, 1) near the zeros at 1 and 2
            let err = (got - lg).abs() / lg.abs().max(1.0);
            assert!(err <= 1e-12, "x={x}: got {got}, want {lg}, err {err}");
        }
    }

    #[test]
    fn digamma_matches_reference() {
        for &(x, _, dg, _) in REFERENCE.iter() {
            let got = digamma(x).unwrap();
            assert!((got - dg).abs() <= 1e-10, "x={x}: got {got}, want {dg}");
        }
    }

    #[test]
    fn trigamma_matches_reference() {
        for &(x, _, _, tg) in REFERENCE.iter() {
            let got = trigamma(x).unwrap();
            assert!((got - tg).abs() <= 1e-12 * tg, "x={x}: got {got}, want {tg}");
        }
    }

    #[test]
    fn named_values() {
        assert_eq!(log_gamma(1.0).unwrap(), 0.0);
        assert!((log_gamma(5.0).unwrap() - 24f64.ln()).abs() < 1e-14);
        assert!((log_gamma(0.5f64).unwrap() - 0.572364943).abs() < 1e-9);
        assert!((digamma(1.0f64).unwrap() + 0.577215665).abs() < 1e-9);
        assert!((digamma(2.0f64).unwrap() - 0.422784335).abs() < 1e-9);
        assert!((digamma(0.5f64).unwrap() + 1.963510026).abs() < 1e-9);
    }

    #[test]
    fn domain_errors() {
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.0).is_err());
        assert!(log_gamma(f64::INFINITY).is_err());
        assert!(digamma(f64::NAN).is_err());
        assert!(trigamma(-0.5).is_err());
        assert!(dirichlet_expected_log::<f64>(&[]).is_err());
        assert!(dirichlet_expected_log(&[1.0, 0.0]).is_err());
        assert!(log_sum_exp::<f64>(&[]).is_err());
        assert!(log_sum_exp(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn expected_log_examples() {
        let e = dirichlet_expected_log(&[1.0f64, 1.0]).unwrap();
        assert!((e[0] + 1.0).abs() < 1e-14 && (e[1] + 1.0).abs() < 1e-14);
        assert_eq!(dirichlet_expected_log(&[5.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[-1000.0, -1000.0]).unwrap(), -1000.0 + 2f64.ln());
        assert_eq!(log_sum_exp(&[3.0]).unwrap(), 3.0);
    }

    #[test]
    fn digamma_recurrence_on_log_grid() {
        let n = 1000;
        for i in 0..n {
            let x = 10f64.powf(-3.0 + 9.0 * i as f64 / (n - 1) as f64);
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((d - 1.0 / x).abs() <= 1e-10, "x={x}: {d} vs {}", 1.0 / x);
        }
    }

    #[test]
    fn log_gamma_convex_on_grid() {
        let h = 1e-3;
        let mut x = 0.01;
        while x < 50.0 {
            let d2 = log_gamma(x + h).unwrap() - 2.0 * log_gamma(x).unwrap() + log_gamma(x - h).unwrap();
            assert!(d2 >= -1e-9, "x={x}: {d2}");
            x += 0.0371;
        }
    }

    #[test]
    fn exact_sum_is_correctly_rounded() {
        assert_eq!(exact_sum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(exact_sum([0.1f64; 10]), 1.0);
        assert_eq!(exact_sum(Vec::<f64>::new()), 0.0);
        let xs = [1.0, 1e-16, 1e-16];
        assert_eq!(exact_sum(xs), 1.0000000000000002);
    }

    #[test]
    fn works_in_single_precision() {
        let lg = log_gamma(5.0f32).unwrap();
        assert!((lg - 24f32.ln()).abs() < 1e-5);
        assert!((digamma(1.0f32).unwrap() + 0.577_215_7).abs() < 1e-5);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn log_sum_exp_shift(xs in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
                let base = log_sum_exp(&xs).unwrap();
                let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
                let got = log_sum_exp(&shifted).unwrap();
                prop_assert!((got - (base + c)).abs() <= 1e-12);
            }

            #[test]
            fn exact_sum_order_independent(mut xs in prop::collection::vec(-1e6f64..1e6, 0..40)) {
                let a = exact_sum(xs.iter().copied());
                xs.reverse();
                prop_assert_eq!(a, exact_sum(xs.iter().copied()));
            }
        }
    }
}
