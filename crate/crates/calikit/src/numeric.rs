//! Scalar special functions for the standard normal distribution.
//!
//! Self-contained rational approximations: `erf` in the Abramowitz–Stegun
//! 7.1.26 family (|err| < 1.5e-7), and the standard normal quantile via an
//! Acklam-style initializer polished with Newton steps against [`std_normal_cdf`],
//! so `std_normal_cdf(std_normal_icdf(p)) == p` holds to near machine
//! precision wherever `f64` conditioning allows.

/// ln(2π), used by Gaussian log-densities.
pub const LN_2PI: f64 = 1.8378770664093453;

/// 1/√(2π).
pub const INV_SQRT_2PI: f64 = 0.3989422804014327;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

const ERF_A: f64 = 0.3275911;
const ERF_C: [f64; 5] = [
    0.254829592,
    -0.284496736,
    1.421413741,
    -1.453152027,
    1.061405429,
];
// Constant shift so erf(0) == 0 exactly (the raw polynomial sums to
// 1 - ~1e-9 at t = 1).
const ERF_D0: f64 =
    1.0 - (0.254829592 - 0.284496736 + 1.421413741 - 1.453152027 + 1.061405429);

fn erf_poly(t: f64) -> f64 {
    ERF_D0
        + t * (ERF_C[0]
            + t * (ERF_C[1] + t * (ERF_C[2] + t * (ERF_C[3] + t * ERF_C[4]))))
}

fn erf_poly_deriv(t: f64) -> f64 {
    ERF_C[0]
        + t * (2.0 * ERF_C[1] + t * (3.0 * ERF_C[2] + t * (4.0 * ERF_C[3] + t * 5.0 * ERF_C[4])))
}

/// Error function, Abramowitz–Stegun 7.1.26 rational approximation.
///
/// Absolute error below 1.5e-7 on the real line; exactly odd, with
/// `erf(0) == 0`.
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + ERF_A * x);
    sign * (1.0 - erf_poly(t) * (-x * x).exp())
}

/// Exact derivative of the [`erf`] approximation (not of the true erf).
///
/// Reverse-mode differentiation must follow the function actually computed,
/// so finite differences of [`erf`] agree with this to machine precision.
pub fn erf_deriv(x: f64) -> f64 {
    let x = x.abs();
    let t = 1.0 / (1.0 + ERF_A * x);
    // d/dx [1 - q(t) e^{-x^2}] with dt/dx = -a t^2
    (-x * x).exp() * (ERF_A * t * t * erf_poly_deriv(t) + 2.0 * x * erf_poly(t))
}

/// Standard normal density φ(z).
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal cdf Φ(z) = (1 + erf(z/√2)) / 2.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / SQRT_2))
}

/// Exact derivative of [`std_normal_cdf`] as implemented; within ~2e-5
/// relative of the true density φ(z).
pub fn std_normal_cdf_deriv(z: f64) -> f64 {
    0.5 * erf_deriv(z / SQRT_2) / SQRT_2
}

/// Standard normal quantile Φ⁻¹(p) for p ∈ (0, 1).
///
/// Acklam-style rational initial estimate followed by three Newton steps on
/// [`std_normal_cdf`], making this the numerical inverse of the cdf used
/// everywhere else in the crate.
pub fn std_normal_icdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "icdf requires p in (0,1), got {p}");

    // Acklam's coefficients.
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

    let mut z = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // Newton polish against our own cdf.
    for _ in 0..3 {
        let err = std_normal_cdf(z) - p;
        let pdf = std_normal_pdf(z);
        if pdf > 0.0 {
            let step = err / pdf;
            if step.is_finite() {
                z -= step.clamp(-1.0, 1.0);
            }
        }
    }
    z
}

/// Median of the pairwise Euclidean distances between rows, the standard
/// bandwidth heuristic for RBF kernels. Returns 1.0 when every pairwise
/// distance is zero or fewer than two rows are given.
pub fn median_pairwise_distance(rows: &[&[f64]]) -> f64 {
    let n = rows.len();
    if n < 2 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}
