//! Modified Bessel functions of the first kind, evaluated in log space.

use statrs::function::gamma::ln_gamma;

/// Arguments at or above this use the large-argument expansion.
pub const ASYMPTOTIC_FROM: f64 = 30.0;

/// `ln I_ν(r)` by the ascending series, summed relative to its largest term.
fn log_series(nu: f64, r: f64) -> f64 {
    let lh = (r / 2.0).ln();
    let mut lt = nu * lh - ln_gamma(nu + 1.0);
    let mut terms = vec![lt];
    let mut k: f64 = 0.0;
    loop {
        k += 1.0;
        lt += 2.0 * lh - k.ln() - (k + nu).ln();
        terms.push(lt);
        let peak = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // past the peak the terms decay at least geometrically
        if lt < peak - 40.0 && (r / 2.0).powi(2) < k * (k + nu) {
            break;
        }
    }
    let peak = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln()
}

/// `ln I_ν(r)` from `e^r/√(2πr) Σ_k (−1)^k a_k(ν)/r^k`, or `None` when the
/// expansion stops converging before reaching double precision.
fn log_asymptotic(nu: f64, r: f64) -> Option<f64> {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0f64;
    let mut sum = 1.0;
    for k in 1..200 {
        let kf = k as f64;
        let next = -term * (mu - (2.0 * kf - 1.0).powi(2)) / (kf * 8.0 * r);
        if next.abs() > term.abs() && k > 1 {
            return None;
        }
        sum += next;
        term = next;
        if term.abs() < 1e-17 * sum.abs() {
            return (sum > 0.0).then(|| r - 0.5 * (2.0 * std::f64::consts::PI * r).ln() + sum.ln());
        }
    }
    None
}

/// `ln I_ν(r)` for `ν ≥ 0`, `r ≥ 0`.
pub fn log_bessel_i(nu: f64, r: f64) -> f64 {
    assert!(nu >= 0.0 && r >= 0.0, "bessel_i: need nu >= 0 and r >= 0");
    if r == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if r >= ASYMPTOTIC_FROM {
        if let Some(v) = log_asymptotic(nu, r) {
            return v;
        }
    }
    log_series(nu, r)
}

pub fn bessel_i(nu: f64, r: f64) -> f64 {
    log_bessel_i(nu, r).exp()
}

/// `ln(r^{−ν} I_ν(r))`, finite at `r = 0`.
pub fn log_scaled_bessel_i(nu: f64, r: f64) -> f64 {
    if r < 1e-150 {
        -nu * 2f64.ln() - ln_gamma(nu + 1.0)
    } else {
        log_bessel_i(nu, r) - nu * r.ln()
    }
}

/// `I_{d/2}(κ) / I_{d/2−1}(κ)`, the mean resultant length of vMF(κ) on `S^{d−1}`.
pub fn bessel_ratio(d: usize, kappa: f64) -> f64 {
    let nu = d as f64 / 2.0;
    (log_bessel_i(nu, kappa) - log_bessel_i(nu - 1.0, kappa)).exp()
}

/// `|I_{ν−1}(r) − I_{ν+1}(r) − (2ν/r) I_ν(r)| / I_{ν−1}(r)`.
pub fn recurrence_residual(nu: f64, r: f64) -> f64 {
    let base = log_bessel_i(nu - 1.0, r);
    let rel = |n: f64| (log_bessel_i(n, r) - base).exp();
    (1.0 - rel(nu + 1.0) - 2.0 * nu / r * rel(nu)).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_at_zero() {
        assert_eq!(bessel_i(0.0, 0.0), 1.0);
        assert_eq!(bessel_i(1.5, 0.0), 0.0);
    }

    #[test]
    fn half_order_closed_forms() {
        // I_{1/2}(r) = √(2/(πr)) sinh r, I_{-1/2} is not needed here
        for r in [0.3, 2.0, 12.0, 31.0, 45.0] {
            let want = (2.0 / (std::f64::consts::PI * r)).sqrt() * r.sinh();
            let got = bessel_i(0.5, r);
            assert!((got / want - 1.0).abs() < 1e-12, "r={r}: {got} vs {want}");
        }
    }

    #[test]
    fn branches_agree_at_the_switch() {
        for nu in [0.0, 1.0, 2.5, 4.0] {
            let s = log_series(nu, ASYMPTOTIC_FROM);
            let a = log_asymptotic(nu, ASYMPTOTIC_FROM).unwrap();
            assert!((s - a).abs() < 1e-12, "nu={nu}: {s} vs {a}");
        }
    }

    #[test]
    fn large_argument_does_not_overflow() {
        let v = log_bessel_i(2.0, 1e4);
        assert!(v.is_finite() && v > 9990.0);
    }
}
