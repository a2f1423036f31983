//! Scalar special functions: standard-normal CDF/ICDF/log-PDF and the
//! sigmoid family.
//!
//! Everything downstream leans on these. The forward kernel map feeds
//! mixture CDF values through the normal quantile function, log-dets
//! subtract the normal log-density, and the bisection inverse compares
//! CDF values at interval midpoints, so the accuracy targets here are
//! deliberately strict:
//!
//! | function           | guarantee                                  |
//! |--------------------|--------------------------------------------|
//! | `std_normal_cdf`   | absolute error ≤ 1e-12 (measured ~1e-16)   |
//! | `std_normal_icdf`  | |cdf(icdf(p)) − p| ≤ 1e-9 on [1e-12, 1−1e-12] |
//! | `std_normal_logpdf`| exact formula −x²/2 − ln√(2π)              |
//! | `sigmoid` family   | overflow-safe for |x| ≤ 1e3                |
//!
//! All functions are total on `f64`: NaN propagates, infinities saturate
//! to the mathematical limit. Probability arguments outside [0, 1]
//! return NaN. Callers that feed data batches validate finiteness at the
//! batch boundary and surface typed domain errors there.

/// Lower clamp for probabilities entering the normal quantile function.
///
/// Mixture CDF values are pinched into `[EPS_P, 1 − EPS_P]` before
/// inversion, bounding forward outputs to |z| ≤ 5.2 and keeping
/// log-dets finite. See [`clamp_probability`].
pub const EPS_P: f64 = 1e-7;

/// ln(2π)/2, the normalization constant of the standard normal log-density.
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Clamp a probability into the closed interval `[EPS_P, 1 − EPS_P]`.
///
/// NaN passes through unchanged so that upstream validation can still
/// observe it.
#[inline]
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(EPS_P, 1.0 - EPS_P)
}

/// Standard normal cumulative distribution function Φ(x).
///
/// Evaluated as `0.5 · erfc(−x/√2)` so the tails keep full relative
/// precision instead of cancelling against 1. Absolute error is below
/// 1e-15 across the real line; the crate-level requirement is 1e-12.
///
/// `NaN` propagates; ±∞ map to 1 and 0.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal log-density: `−x²/2 − ln√(2π)`.
#[inline]
pub fn std_normal_logpdf(x: f64) -> f64 {
    -0.5 * x * x - HALF_LN_2PI
}

/// Standard normal quantile function Φ⁻¹(p).
///
/// # Algorithm
///
/// Acklam's rational approximation (absolute error ≤ ~1.2e-9) followed
/// by one Halley refinement step against [`std_normal_cdf`], which
/// brings the error to a few ulp. The computation runs on the lower
/// half `p ≤ 0.5` and mirrors for `p > 0.5`; `1 − p` is exact there, so
/// odd symmetry `icdf(1 − p) = −icdf(p)` holds by construction wherever
/// `1 − p` is itself exactly representable.
///
/// Returns −∞ at `p = 0`, +∞ at `p = 1`, and NaN outside `[0, 1]`.
pub fn std_normal_icdf(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        // Sterbenz: 1 − p is exact for p ∈ (0.5, 1).
        -icdf_lower(1.0 - p)
    } else {
        icdf_lower(p)
    }
}

/// Quantile for `p ∈ (0, 0.5]`; result is ≤ 0.
fn icdf_lower(p: f64) -> f64 {
    // Acklam's coefficients: central region |p − 0.5| ≤ 0.47575.
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    // Tail region p < 0.02425.
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };

    // One Halley step: with f = cdf(x) − p, f' = pdf, f'' = −x·pdf,
    // the update is x − r/(1 + r·x/2) where r = f/pdf. On this half
    // cdf(x) ≤ 0.55, so f keeps full precision even in the deep tail.
    let r = (std_normal_cdf(x) - p) * (-std_normal_logpdf(x)).exp();
    x - r / (1.0 + 0.5 * r * x)
}

/// Logistic sigmoid σ(x) = 1/(1 + e^(−x)).
///
/// Branches on the sign so the exponential argument is never positive;
/// no overflow for any finite input.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log σ(x), computed as −softplus(−x).
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// softplus(x) = ln(1 + e^x), evaluated as max(x, 0) + ln(1 + e^(−|x|)).
///
/// Satisfies softplus(x) ≥ max(x, 0) and stays exact in both asymptotes.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// erf/erfc kernels
// ---------------------------------------------------------------------------

/// Complementary error function, rational Chebyshev approximation after
/// W. J. Cody (1969) / SPECFUN `calerf`. Relative error ≤ ~1e-15 on the
/// positive axis; underflows to 0 beyond x ≈ 26.54.
fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= ERF_THRESH {
        return 1.0 - erf_small(x);
    } else if y <= 4.0 {
        let mut xnum = C[8] * y;
        let mut xden = y;
        for i in 0..7 {
            xnum = (xnum + C[i]) * y;
            xden = (xden + D[i]) * y;
        }
        exp_neg_sq(y) * (xnum + C[7]) / (xden + D[7])
    } else if y < ERFC_XBIG {
        let z = 1.0 / (y * y);
        let mut xnum = P[5] * z;
        let mut xden = z;
        for i in 0..4 {
            xnum = (xnum + P[i]) * z;
            xden = (xden + Q[i]) * z;
        }
        let r = z * (xnum + P[4]) / (xden + Q[4]);
        exp_neg_sq(y) * (FRAC_1_SQRT_PI - r) / y
    } else if y.is_nan() {
        return f64::NAN;
    } else {
        0.0
    };
    if x < 0.0 { 2.0 - result } else { result }
}

/// erf on |x| ≤ 0.46875, where the direct series keeps full precision.
fn erf_small(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let z = x * x;
    let mut xnum = A[4] * z;
    let mut xden = z;
    for i in 0..3 {
        xnum = (xnum + A[i]) * z;
        xden = (xden + B[i]) * z;
    }
    x * (xnum + A[3]) / (xden + B[3])
}

/// e^(−y²) with the argument split at 1/16 granularity; the split keeps
/// the rounding error of y² out of the exponential for large y.
#[inline]
fn exp_neg_sq(y: f64) -> f64 {
    let ysq = (y * 16.0).floor() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

const ERF_THRESH: f64 = 0.46875;
const ERFC_XBIG: f64 = 26.543;
const FRAC_1_SQRT_PI: f64 = 5.641_895_835_477_563e-1;

const A: [f64; 5] = [
    3.16112374387056560e00,
    1.13864154151050156e02,
    3.77485237685302021e02,
    3.20937758913846947e03,
    1.85777706184603153e-1,
];
const B: [f64; 4] = [
    2.36012909523441209e01,
    2.44024637934444173e02,
    1.28261652607737228e03,
    2.84423683343917062e03,
];
const C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e00,
    6.61191906371416295e01,
    2.98635138197400131e02,
    8.81952221241769090e02,
    1.71204761263407058e03,
    2.05107837782607147e03,
    1.23033935479799725e03,
    2.15311535474403846e-8,
];
const D: [f64; 8] = [
    1.57449261107098347e01,
    1.17693950891312499e02,
    5.37181101862009858e02,
    1.62138957456669019e03,
    3.29079923573345963e03,
    4.36261909014324716e03,
    3.43936767414372164e03,
    1.23033935480374942e03,
];
const P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const Q: [f64; 5] = [
    2.56852019228982242e00,
    1.87295284992346047e00,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];
