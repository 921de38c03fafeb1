//! von Mises–Fisher sampling on the unit sphere (Wood's rejection scheme).

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use scar_core::rng::Stream;

use crate::error::WorldError;

/// `n` i.i.d. draws from vMF(`center`, `kappa`) in `center.len()` dimensions.
pub fn vmf_sample(center: &[f64], kappa: f64, n: usize, rng: &mut Stream) -> Result<Vec<Vec<f64>>, WorldError> {
    if kappa < 0.0 || kappa.is_nan() {
        return Err(WorldError::NegativeKappa(kappa));
    }
    let norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(WorldError::NotUnit(norm));
    }
    let d = center.len();
    assert!(d >= 2, "vMF needs at least two dimensions");
    let dm1 = (d - 1) as f64;
    let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid shape");

    // Householder reflection taking e_1 to the center
    let mut h: Vec<f64> = center.iter().map(|v| -v).collect();
    h[0] += 1.0;
    let hn = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let reflect = hn > 1e-12;
    if reflect {
        h.iter_mut().for_each(|v| *v /= hn);
    }

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w = loop {
            let z: f64 = beta.sample(rng);
            let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
            let u: f64 = rng.random();
            if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
                break w;
            }
        };
        let mut tang: Vec<f64> = (0..d - 1).map(|_| rng.sample(StandardNormal)).collect();
        let tn = tang.iter().map(|v| v * v).sum::<f64>().sqrt();
        tang.iter_mut().for_each(|v| *v /= tn);
        let r = (1.0 - w * w).max(0.0).sqrt();
        let mut y = Vec::with_capacity(d);
        y.push(w);
        y.extend(tang.iter().map(|v| r * v));
        if reflect {
            let dot: f64 = y.iter().zip(&h).map(|(a, b)| a * b).sum();
            y.iter_mut().zip(&h).for_each(|(a, b)| *a -= 2.0 * dot * b);
        }
        out.push(y);
    }
    Ok(out)
}
