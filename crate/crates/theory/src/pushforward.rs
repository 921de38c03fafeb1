//! Per-body bijection fits, the common pushforward law and cross-body
//! alignment `Φ_{e2} ∘ Φ_{e1}⁻¹`.

use scar_eval::{fit_regressor, gather, pushforward_test, r_squared, FitConfig, LatentSample, PushforwardReport, Regressor};
use serde::Serialize;

use crate::error::TheoryError;

#[derive(Clone, Debug, Serialize)]
pub struct BodyMap {
    pub embodiment: usize,
    /// Held-out `1 − R²` of `Φ_e: u → z`.
    pub fit_error: f64,
    /// Held-out `1 − R²` of `u → Φ_e⁻¹(Φ_e(u))`.
    pub round_trip_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Alignment {
    pub from: usize,
    pub to: usize,
    /// Held-out `1 − R²` of `z_{e2}` against `Φ_{e2}(Φ_{e1}⁻¹(Φ_{e1}(u)))`.
    pub error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PushforwardCheck {
    pub maps: Vec<BodyMap>,
    pub energy: PushforwardReport,
    pub alignment: Vec<Alignment>,
}

impl PushforwardCheck {
    pub fn max_alignment_error(&self) -> f64 {
        self.alignment.iter().map(|a| a.error).fold(0.0, f64::max)
    }
}

pub fn pushforward_and_transfer_check(
    s: &LatentSample,
    per_group: usize,
    permutations: usize,
    seed: u64,
) -> Result<PushforwardCheck, TheoryError> {
    let cfg = FitConfig::mlp(seed);
    let mut fwd: Vec<Regressor> = Vec::new();
    let mut inv: Vec<Regressor> = Vec::new();
    let mut held = Vec::new();
    let mut maps = Vec::new();
    for e in 0..s.classes {
        let (f, h) = s.split(e);
        let (uf, zf) = (gather(&s.u, s.d_u, &f), gather(&s.z, s.d_z, &f));
        let (uh, zh) = (gather(&s.u, s.d_u, &h), gather(&s.z, s.d_z, &h));
        let phi = fit_regressor(&uf, s.d_u, &zf, s.d_z, &cfg)?;
        let psi = fit_regressor(&zf, s.d_z, &uf, s.d_u, &cfg)?;
        let zhat = phi.predict(&uh)?;
        maps.push(BodyMap {
            embodiment: e,
            fit_error: 1.0 - r_squared(&zh, &zhat, s.d_z),
            round_trip_error: 1.0 - r_squared(&uh, &psi.predict(&zhat)?, s.d_u),
        });
        fwd.push(phi);
        inv.push(psi);
        held.push((uh, zh));
    }
    let mut alignment = Vec::new();
    for from in 0..s.classes {
        for to in 0..s.classes {
            if from == to {
                continue;
            }
            let (u2, z2) = &held[to];
            let through = inv[from].predict(&fwd[from].predict(u2)?)?;
            alignment.push(Alignment {
                from,
                to,
                error: 1.0 - r_squared(z2, &fwd[to].predict(&through)?, s.d_z),
            });
        }
    }
    Ok(PushforwardCheck {
        maps,
        energy: pushforward_test(s, per_group, permutations, seed)?,
        alignment,
    })
}
