//! Moment generating function of a linear pushforward of vMF draws.

use rand::Rng;
use rand_distr::StandardNormal;
use scar_core::rng::stream;
use scar_world::vmf_sample;
use serde::Serialize;

use crate::bessel::log_scaled_bessel_i;
use crate::error::TheoryError;
use crate::experiment::VmfExperiment;

/// `ln Ψ(r)` up to the additive constant that `C(κ)` cancels:
/// `Ψ(r) ∝ r^{1−d/2} I_{d/2−1}(r)`.
fn log_psi(r: f64, d_a: usize) -> f64 {
    log_scaled_bessel_i(d_a as f64 / 2.0 - 1.0, r)
}

/// `E[exp⟨ũ, M ã⟩ | e]` for `ã ~ vMF(v_e, κ)`, normalized so the value at
/// `ũ = 0` is exactly 1.
pub fn mgf_closed_form(u_tilde: &[f64], m: &[f64], v_e: &[f64], kappa: f64, d_a: usize) -> f64 {
    let d_z = u_tilde.len();
    let mt_u: Vec<f64> = (0..d_a)
        .map(|j| (0..d_z).map(|i| m[i * d_a + j] * u_tilde[i]).sum::<f64>())
        .collect();
    // ‖Mᵀũ + κv_e‖² with ‖v_e‖ = 1
    let cross: f64 = mt_u.iter().zip(v_e).map(|(a, b)| a * b).sum();
    let r = (mt_u.iter().map(|v| v * v).sum::<f64>() + 2.0 * kappa * cross + kappa * kappa).max(0.0).sqrt();
    (log_psi(r, d_a) - log_psi(kappa, d_a)).exp()
}

/// Monte-Carlo mean of `exp⟨ũ, M ã⟩` and its standard error.
pub fn mgf_monte_carlo(u_tilde: &[f64], m: &[f64], v_e: &[f64], kappa: f64, n: usize, seed: u64) -> Result<(f64, f64), TheoryError> {
    let d_a = v_e.len();
    let d_z = u_tilde.len();
    let mut rng = stream(seed, "mgf-mc");
    let (mut s, mut s2) = (0.0, 0.0);
    let chunk = 50_000;
    let mut left = n;
    while left > 0 {
        let k = left.min(chunk);
        for x in vmf_sample(v_e, kappa, k, &mut rng)? {
            let dot: f64 = (0..d_z)
                .map(|i| u_tilde[i] * (0..d_a).map(|j| m[i * d_a + j] * x[j]).sum::<f64>())
                .sum();
            let y = dot.exp();
            s += y;
            s2 += y * y;
        }
        left -= k;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    Ok((mean, (var / nf).sqrt()))
}

#[derive(Clone, Debug, Serialize)]
pub struct MgfProbe {
    pub embodiment: usize,
    pub u_tilde: Vec<f64>,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
    /// `|closed − MC| / SE`.
    pub z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MgfReport {
    pub d_a: usize,
    pub d_z: usize,
    pub samples: usize,
    pub probes: Vec<MgfProbe>,
}

impl MgfReport {
    pub fn max_z(&self) -> f64 {
        self.probes.iter().map(|p| p.z).fold(0.0, f64::max)
    }

    /// Every probe within three standard errors.
    pub fn passes(&self) -> bool {
        self.max_z() <= 3.0
    }
}

/// Closed form vs Monte Carlo at `probes` random `(ũ, e)` with `‖ũ‖` of order `scale`.
pub fn mgf_probe_check(exp: &VmfExperiment, probes: usize, samples: usize, scale: f64, seed: u64) -> Result<MgfReport, TheoryError> {
    let mut rng = stream(seed, "mgf-probes");
    let mut out = Vec::with_capacity(probes);
    for p in 0..probes {
        let e = rng.random_range(0..exp.n_e);
        let u: Vec<f64> = (0..exp.d_z).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let closed = mgf_closed_form(&u, &exp.m, &exp.centers[e], exp.kappa, exp.d_a);
        let (mc, se) = mgf_monte_carlo(&u, &exp.m, &exp.centers[e], exp.kappa, samples, seed.wrapping_add(7919 * (p as u64 + 1)))?;
        out.push(MgfProbe {
            embodiment: e,
            u_tilde: u,
            closed_form: closed,
            monte_carlo: mc,
            std_error: se,
            z: (closed - mc).abs() / se.max(1e-300),
        });
    }
    Ok(MgfReport {
        d_a: exp.d_a,
        d_z: exp.d_z,
        samples,
        probes: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_argument_is_one() {
        let exp = VmfExperiment::preset(6, 1).unwrap();
        for c in &exp.centers {
            assert_eq!(mgf_closed_form(&[0.0; 3], &exp.m, c, exp.kappa, 6), 1.0);
        }
    }

    #[test]
    fn depends_on_embodiment_only_through_m_v() {
        let exp = VmfExperiment::preset(6, 2).unwrap();
        let m = exp.v_perp_encoder();
        let u = [0.3, -0.7, 0.2];
        let first = mgf_closed_form(&u, &m, &exp.centers[0], exp.kappa, 6);
        for c in &exp.centers[1..] {
            let v = mgf_closed_form(&u, &m, c, exp.kappa, 6);
            assert!((v - first).abs() <= 1e-12 * first, "{v} vs {first}");
        }
    }
}
