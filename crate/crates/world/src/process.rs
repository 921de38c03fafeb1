//! The generative maps: unified action prior, per-embodiment realization,
//! dynamics, observation rendering and frame rasterization.

use rand::Rng;
use scar_core::rng::Stream;

use crate::error::WorldError;
use crate::spec::{matvec, DgpSpec, FRAME, GLYPH};

/// `u ~ U[-1, 1]^{d_u}`; drawn without reference to any embodiment.
pub fn sample_unified_action(rng: &mut Stream, d_u: usize) -> Vec<f64> {
    (0..d_u).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Grayscale `FRAME × FRAME` image, row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * FRAME + col]
    }
}

impl DgpSpec {
    /// `a = squash(Q_e u + b_e)`.
    pub fn realize_action(&self, u: &[f64], e: usize) -> Result<Vec<f64>, WorldError> {
        let emb = self
            .embodiments
            .get(e)
            .ok_or_else(|| WorldError::UnknownEmbodiment(e.to_string()))?;
        let (d_a, d_u) = (self.cfg.d_a, self.cfg.d_u);
        let lin = matvec(&emb.q, d_a, d_u, u);
        Ok(lin
            .iter()
            .zip(&emb.b)
            .map(|(v, b)| self.cfg.action_squash.apply(v + b))
            .collect())
    }

    /// Inverse of [`DgpSpec::realize_action`] on its image: `Q_e⁺(squash⁻¹(a) − b_e)`.
    pub fn recover_unified(&self, a: &[f64], e: usize) -> Result<Vec<f64>, WorldError> {
        let emb = self
            .embodiments
            .get(e)
            .ok_or_else(|| WorldError::UnknownEmbodiment(e.to_string()))?;
        let centered: Vec<f64> = a
            .iter()
            .zip(&emb.b)
            .map(|(v, b)| self.cfg.action_squash.invert(*v) - b)
            .collect();
        Ok(matvec(&emb.q_pinv, self.cfg.d_u, self.cfg.d_a, &centered))
    }

    pub fn gain(&self, s: &[f64]) -> f64 {
        1.0 + self.cfg.gain * s[0].tanh()
    }

    /// `s' = m(s) + g(s)·W_dyn a` with `m(s) = s + pull·(goal − s)`.
    pub fn step_dynamics(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let eff = matvec(&self.w_dyn, self.cfg.d_s, self.cfg.d_a, a);
        let g = self.gain(s);
        s.iter()
            .zip(&self.goal)
            .zip(&eff)
            .map(|((si, gi), ei)| si + self.cfg.pull * (gi - si) + g * ei)
            .collect()
    }

    /// Raw observation: `squash(P s)` followed by the nuisance block
    /// `code_e + lighting`.
    pub fn render(&self, s: &[f64], e: usize, lighting: &[f64]) -> Vec<f64> {
        let c = &self.cfg;
        let mut x: Vec<f64> = matvec(&self.render, c.n_render(), c.d_s, s)
            .into_iter()
            .map(|v| c.render_squash.apply(v))
            .collect();
        for k in 0..c.n_nuisance {
            x.push(self.embodiments[e].code[k] + lighting.get(k).copied().unwrap_or(0.0));
        }
        x
    }

    /// Fixed invertible latent encoder `v = E x`.
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        matvec(&self.encoder, self.cfg.d_x, self.cfg.d_x, x)
    }

    pub fn decode(&self, v: &[f64]) -> Vec<f64> {
        matvec(&self.encoder_inv, self.cfg.d_x, self.cfg.d_x, v)
    }

    /// State estimate from an observation (exact on rendered observations).
    pub fn state_from_observation(&self, x: &[f64]) -> Vec<f64> {
        let c = &self.cfg;
        let pre: Vec<f64> = x[..c.n_render()].iter().map(|v| c.render_squash.invert(*v)).collect();
        matvec(&self.render_pinv, c.d_s, c.n_render(), &pre)
    }

    /// Frame of state `s` for embodiment `e` under neutral lighting.
    pub fn render_frame(&self, s: &[f64], e: usize) -> (Frame, bool) {
        let x = self.render(s, e, &[]);
        self.frame_from_observation(&x)
    }

    /// Rasterizes an observation: a 2×2 bilinear blob at the position given by
    /// the first two state coordinates (rows below the glyph band) and a glyph
    /// in the top-left corner whose pixels are driven by the nuisance block.
    /// The flag reports whether the blob position had to be clamped.
    pub fn frame_from_observation(&self, x: &[f64]) -> (Frame, bool) {
        let c = &self.cfg;
        let s = self.state_from_observation(x);
        let mut px = vec![0.0; FRAME * FRAME];
        let r = c.render_range;
        let span_c = (FRAME - 2) as f64;
        let span_r = (FRAME - GLYPH - 2) as f64;
        let mut fc = (s[0] + r) / (2.0 * r) * span_c;
        let mut fr = GLYPH as f64 + (s.get(1).copied().unwrap_or(0.0) + r) / (2.0 * r) * span_r;
        let mut clamped = false;
        if !(0.0..=span_c).contains(&fc) {
            fc = fc.clamp(0.0, span_c);
            clamped = true;
        }
        if !(GLYPH as f64..=GLYPH as f64 + span_r).contains(&fr) {
            fr = fr.clamp(GLYPH as f64, GLYPH as f64 + span_r);
            clamped = true;
        }
        // coverage of the unit-intensity square [fr, fr+2) × [fc, fc+2)
        for row in GLYPH..FRAME {
            let oy = overlap(row as f64, fr);
            if oy == 0.0 {
                continue;
            }
            for col in 0..FRAME {
                let ox = overlap(col as f64, fc);
                px[row * FRAME + col] = oy * ox;
            }
        }
        let n = c.n_nuisance;
        if n > 0 {
            let y = &x[c.n_render()..];
            for p in 0..GLYPH * GLYPH {
                let drive: f64 = (0..n).map(|k| self.glyph[p * n + k] * y[k]).sum();
                let v = (0.5 + 0.5 * drive).clamp(0.0, 1.0);
                px[(p / GLYPH) * FRAME + p % GLYPH] = v;
            }
        }
        (Frame { pixels: px }, clamped)
    }
}

/// Length of `[cell, cell+1) ∩ [start, start+2)`.
fn overlap(cell: f64, start: f64) -> f64 {
    let lo = cell.max(start);
    let hi = (cell + 1.0).min(start + 2.0);
    (hi - lo).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{DgpConfig, Squash};
    use scar_core::rng::stream;

    fn spec() -> DgpSpec {
        DgpSpec::build(DgpConfig::default()).unwrap()
    }

    #[test]
    fn unknown_embodiment_errors() {
        let s = spec();
        assert!(matches!(s.realize_action(&[0.0, 0.0], 9), Err(WorldError::UnknownEmbodiment(_))));
        assert!(s.embodiment_index("spot").is_err());
    }

    #[test]
    fn identity_block_embeds_u() {
        let mut s = DgpSpec::build(DgpConfig::linear(2, 3, 3)).unwrap();
        s.embodiments[0].q = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        s.embodiments[0].b = vec![0.0; 3];
        assert_eq!(s.realize_action(&[0.25, -0.5], 0).unwrap(), vec![0.25, -0.5, 0.0]);
    }

    #[test]
    fn zero_action_identity_mixing_keeps_state() {
        let mut cfg = DgpConfig::default();
        cfg.pull = 0.0;
        let s = DgpSpec::build(cfg).unwrap();
        let st = vec![0.3, -0.2, 0.9, 0.1];
        assert_eq!(s.step_dynamics(&st, &[0.0; 5]), st);
    }

    #[test]
    fn gain_field_changes_displacement_with_state() {
        let mut cfg = DgpConfig::default();
        cfg.pull = 0.0;
        let s = DgpSpec::build(cfg).unwrap();
        let a = s.realize_action(&[0.7, -0.4], 0).unwrap();
        let d = |st: &[f64]| -> Vec<f64> {
            s.step_dynamics(st, &a).iter().zip(st).map(|(n, o)| n - o).collect()
        };
        let d1 = d(&[-1.0, 0.0, 0.0, 0.0]);
        let d2 = d(&[1.0, 0.0, 0.0, 0.0]);
        assert!(d1.iter().zip(&d2).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn identity_render_with_tanh() {
        let mut cfg = DgpConfig::linear(2, 3, 3);
        cfg.render_squash = Squash::Tanh;
        let mut s = DgpSpec::build(cfg).unwrap();
        s.render = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        s.render_pinv = s.render.clone();
        let st = [0.2, -1.0, 3.0];
        let x = s.render(&st, 0, &[]);
        for i in 0..3 {
            assert_eq!(x[i], st[i].tanh());
        }
    }

    #[test]
    fn frames_differ_only_in_glyph_across_embodiments() {
        let s = spec();
        let st = [0.3, -0.4, 0.1, 0.0];
        let (f0, _) = s.render_frame(&st, 0);
        let (f1, _) = s.render_frame(&st, 1);
        let mut glyph_diff = false;
        for r in 0..FRAME {
            for c in 0..FRAME {
                let same = f0.get(r, c) == f1.get(r, c);
                if r < GLYPH && c < GLYPH {
                    glyph_diff |= !same;
                } else {
                    assert!(same, "pixel {r},{c} differs outside the glyph");
                }
            }
        }
        assert!(glyph_diff);
        assert!(f0.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.render_frame(&st, 0).0, f0);
    }

    #[test]
    fn blob_has_unit_mass_and_clamps() {
        let s = spec();
        let (f, clamped) = s.render_frame(&[0.1, 0.2, 0.0, 0.0], 2);
        assert!(!clamped);
        let mass: f64 = (GLYPH..FRAME).flat_map(|r| (0..FRAME).map(move |c| (r, c))).map(|(r, c)| f.get(r, c)).sum();
        assert!((mass - 4.0).abs() < 1e-9, "{mass}");
        let (_, clamped) = s.render_frame(&[9.0, 0.0, 0.0, 0.0], 2);
        assert!(clamped);
    }

    #[test]
    fn state_round_trips_through_observation() {
        let s = spec();
        let mut rng = stream(4, "rt");
        for _ in 0..100 {
            let st: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let back = s.state_from_observation(&s.render(&st, 1, &[0.05, 0.0, -0.02]));
            for (a, b) in st.iter().zip(&back) {
                assert!((a - b).abs() < 1e-8);
            }
        }
    }
}
