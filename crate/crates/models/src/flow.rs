//! Flow-matching targets and diffusion-forcing noise levels.

use rand::Rng;
use scar_core::rng::Stream;

use crate::config::Schedule;
use crate::error::ModelError;

/// `ṽ = (1−σ_τ) v + σ_τ ε` and `u = ε − v`, row by row with one `τ` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub v: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub tau: Vec<f64>,
    pub v_tilde: Vec<f64>,
    pub u_tau: Vec<f64>,
}

/// `v` and `epsilon` hold `tau.len()` rows of width `d`.
pub fn make_flow_target(
    v: &[f64],
    epsilon: &[f64],
    tau: &[f64],
    d: usize,
    schedule: Schedule,
) -> Result<FlowBatch, ModelError> {
    if v.len() != epsilon.len() || v.len() != tau.len() * d {
        return Err(ModelError::Misaligned {
            expected: tau.len() * d,
            got: v.len().min(epsilon.len()),
        });
    }
    if let Some((index, &value)) = tau.iter().enumerate().find(|(_, t)| !(0.0..=1.0).contains(*t)) {
        return Err(ModelError::TauRange { index, value });
    }
    let mut v_tilde = Vec::with_capacity(v.len());
    let mut u_tau = Vec::with_capacity(v.len());
    for (row, &t) in tau.iter().enumerate() {
        let s = schedule.sigma(t);
        for k in row * d..(row + 1) * d {
            v_tilde.push((1.0 - s) * v[k] + s * epsilon[k]);
            u_tau.push(epsilon[k] - v[k]);
        }
    }
    Ok(FlowBatch {
        v: v.to_vec(),
        epsilon: epsilon.to_vec(),
        tau: tau.to_vec(),
        v_tilde,
        u_tau,
    })
}

/// Per-token noise levels for `batch` sequences of `f` tokens. Every level is
/// drawn from U[0,1]; then, with probability `p_clean` per sequence, the first
/// `f_hist` levels are reset to 0.
pub fn diffusion_forcing_schedule(
    batch: usize,
    f: usize,
    f_hist: usize,
    p_clean: f64,
    rng: &mut Stream,
) -> Vec<f64> {
    assert!(f_hist <= f, "history longer than the sequence");
    let mut out = Vec::with_capacity(batch * f);
    for _ in 0..batch {
        let start = out.len();
        out.extend((0..f).map(|_| rng.random::<f64>()));
        if rng.random::<f64>() < p_clean {
            out[start..start + f_hist].iter_mut().for_each(|t| *t = 0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use scar_core::rng::stream;

    #[test]
    fn endpoints_and_midpoint() {
        let v = [1.0, -2.0, 0.5, 3.0, 0.0, -1.0];
        let e = [0.3, 0.7, -0.2, 1.0, -1.5, 2.0];
        let fb = make_flow_target(&v, &e, &[0.0, 0.5, 1.0], 2, Schedule::Linear).unwrap();
        assert_eq!(&fb.v_tilde[0..2], &v[0..2]);
        assert_eq!(fb.v_tilde[2], (v[2] + e[2]) / 2.0);
        assert_eq!(fb.v_tilde[3], (v[3] + e[3]) / 2.0);
        assert_eq!(&fb.v_tilde[4..6], &e[4..6]);
        for k in 0..6 {
            assert_eq!(fb.u_tau[k], e[k] - v[k]);
        }
    }

    #[test]
    fn tau_out_of_range() {
        let err = make_flow_target(&[0.0], &[0.0], &[1.5], 1, Schedule::Linear).unwrap_err();
        assert!(matches!(err, ModelError::TauRange { index: 0, .. }));
    }

    #[test]
    fn clean_history_when_forced() {
        let mut rng = stream(0, "df");
        let tau = diffusion_forcing_schedule(50, 17, 5, 1.0, &mut rng);
        for seq in tau.chunks(17) {
            assert!(seq[..5].iter().all(|t| *t == 0.0));
            assert!(seq[5..].iter().all(|t| *t > 0.0));
        }
    }
}
