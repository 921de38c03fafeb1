//! Parameters of the synthetic data-generating process.
//!
//! A [`DgpConfig`] holds the scalar knobs read from a config file; [`DgpSpec`]
//! is the materialized process with every matrix drawn from a stream keyed by
//! `param_seed`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use scar_core::rng::{hex, stream, Stream};
use scar_core::Config;
use sha2::{Digest, Sha256};

use crate::error::WorldError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Squash {
    Identity,
    Tanh,
}

impl Squash {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Squash::Identity => x,
            Squash::Tanh => x.tanh(),
        }
    }

    pub fn invert(self, y: f64) -> f64 {
        match self {
            Squash::Identity => y,
            Squash::Tanh => y.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh(),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "none" => Some(Squash::Identity),
            "tanh" => Some(Squash::Tanh),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Squash::Identity => "identity",
            Squash::Tanh => "tanh",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DgpConfig {
    pub param_seed: u64,
    pub d_u: usize,
    pub d_a: usize,
    pub d_s: usize,
    pub d_x: usize,
    pub n_nuisance: usize,
    pub embodiments: Vec<String>,
    pub target: String,
    pub t: usize,
    /// Strength of the gain field `g(s) = 1 + gain·tanh(s_1)`; 0 disables it.
    pub gain: f64,
    /// Pull of the state-mixing map toward the goal.
    pub pull: f64,
    pub render_squash: Squash,
    pub action_squash: Squash,
    pub action_scale: f64,
    pub offset_scale: f64,
    pub dyn_scale: f64,
    pub code_scale: f64,
    pub lighting: f64,
    pub lighting_drift: f64,
    pub init_range: f64,
    pub render_range: f64,
    pub goal_scale: f64,
    pub random_encoder: bool,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            param_seed: 1,
            d_u: 2,
            d_a: 5,
            d_s: 4,
            d_x: 12,
            n_nuisance: 3,
            embodiments: ["aloha", "arx", "franka", "ur5"].map(String::from).to_vec(),
            target: "franka".into(),
            t: 17,
            gain: 0.5,
            pull: 0.1,
            render_squash: Squash::Tanh,
            action_squash: Squash::Identity,
            action_scale: 1.0,
            offset_scale: 0.3,
            dyn_scale: 0.15,
            code_scale: 0.6,
            lighting: 0.1,
            lighting_drift: 0.01,
            init_range: 0.8,
            render_range: 2.0,
            goal_scale: 0.6,
            random_encoder: false,
        }
    }
}

impl DgpConfig {
    /// Reads the `[dgp]` section, leaving other sections untouched.
    pub fn from_config(c: &mut Config) -> Result<Self, WorldError> {
        let d = DgpConfig::default();
        let squash = |c: &mut Config, key: &str, def: Squash| -> Result<Squash, WorldError> {
            let v = c.str_or(key, def.name());
            Squash::parse(&v).ok_or_else(|| WorldError::InvalidSpec(format!("{key}: unknown squashing `{v}`")))
        };
        let embodiments = c.list_or("dgp.embodiments", &["aloha", "arx", "franka", "ur5"]);
        let cfg = DgpConfig {
            param_seed: c.u64_or("dgp.param_seed", d.param_seed)?,
            d_u: c.usize_or("dgp.d_u", d.d_u)?,
            d_a: c.usize_or("dgp.d_a", d.d_a)?,
            d_s: c.usize_or("dgp.d_s", d.d_s)?,
            d_x: c.usize_or("dgp.d_x", d.d_x)?,
            n_nuisance: c.usize_or("dgp.nuisance", d.n_nuisance)?,
            embodiments,
            target: c.str_or("dgp.target", &d.target),
            t: c.usize_or("dgp.T", d.t)?,
            gain: c.f64_or("dgp.gain", d.gain)?,
            pull: c.f64_or("dgp.pull", d.pull)?,
            render_squash: squash(c, "dgp.render_squash", d.render_squash)?,
            action_squash: squash(c, "dgp.action_squash", d.action_squash)?,
            action_scale: c.f64_or("dgp.action_scale", d.action_scale)?,
            offset_scale: c.f64_or("dgp.offset_scale", d.offset_scale)?,
            dyn_scale: c.f64_or("dgp.dyn_scale", d.dyn_scale)?,
            code_scale: c.f64_or("dgp.code_scale", d.code_scale)?,
            lighting: c.f64_or("dgp.lighting", d.lighting)?,
            lighting_drift: c.f64_or("dgp.lighting_drift", d.lighting_drift)?,
            init_range: c.f64_or("dgp.init_range", d.init_range)?,
            render_range: c.f64_or("dgp.render_range", d.render_range)?,
            goal_scale: c.f64_or("dgp.goal_scale", d.goal_scale)?,
            random_encoder: c.bool_or("dgp.random_encoder", d.random_encoder)?,
        };
        Ok(cfg)
    }

    /// Fully linear variant used by the identifiability checks: no squashing,
    /// no gain field, no nuisance block.
    pub fn linear(d_u: usize, d_a: usize, d_s: usize) -> Self {
        DgpConfig {
            d_u,
            d_a,
            d_s,
            d_x: d_s,
            n_nuisance: 0,
            gain: 0.0,
            pull: 0.0,
            render_squash: Squash::Identity,
            action_squash: Squash::Identity,
            offset_scale: 0.0,
            lighting: 0.0,
            lighting_drift: 0.0,
            ..DgpConfig::default()
        }
    }

    pub fn n_render(&self) -> usize {
        self.d_x - self.n_nuisance
    }
}

/// Per-embodiment realization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Embodiment {
    pub name: String,
    /// `d_a × d_u`, row-major.
    pub q: Vec<f64>,
    pub q_pinv: Vec<f64>,
    pub b: Vec<f64>,
    /// Appearance code written into the nuisance block.
    pub code: Vec<f64>,
}

/// Materialized data-generating process.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpSpec {
    pub cfg: DgpConfig,
    pub embodiments: Vec<Embodiment>,
    pub target: usize,
    /// `d_s × d_a`
    pub w_dyn: Vec<f64>,
    pub goal: Vec<f64>,
    /// `n_render × d_s`
    pub render: Vec<f64>,
    pub render_pinv: Vec<f64>,
    /// `d_x × d_x` latent encoder and its inverse.
    pub encoder: Vec<f64>,
    pub encoder_inv: Vec<f64>,
    /// `GLYPH_PIXELS × n_nuisance` glyph pattern weights.
    pub glyph: Vec<f64>,
    pub transfer: bool,
}

pub const FRAME: usize = 16;
pub const GLYPH: usize = 4;
pub const GLYPH_PIXELS: usize = GLYPH * GLYPH;

fn gaussian(rng: &mut Stream, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn pinv(rows: usize, cols: usize, m: &[f64]) -> (Vec<f64>, f64) {
    let mat = DMatrix::from_row_slice(rows, cols, m);
    let svd = mat.clone().svd(true, true);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let p = mat.pseudo_inverse(1e-12).expect("svd converges");
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..cols {
        for j in 0..rows {
            out.push(p[(i, j)]);
        }
    }
    (out, smin)
}

/// `y = M x` for a row-major `rows × cols` matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    (0..rows)
        .map(|i| m[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl DgpSpec {
    pub fn build(cfg: DgpConfig) -> Result<Self, WorldError> {
        if cfg.d_u == 0 || cfg.d_a < cfg.d_u || cfg.d_s < cfg.d_u {
            return Err(WorldError::InvalidSpec(format!(
                "need 0 < d_u <= d_a and d_u <= d_s (d_u={}, d_a={}, d_s={})",
                cfg.d_u, cfg.d_a, cfg.d_s
            )));
        }
        if cfg.d_x < cfg.n_nuisance || cfg.n_render() < cfg.d_s {
            return Err(WorldError::InvalidSpec(format!(
                "render block of {} coordinates cannot embed a {}-dimensional state",
                cfg.d_x.saturating_sub(cfg.n_nuisance),
                cfg.d_s
            )));
        }
        if cfg.t < 2 {
            return Err(WorldError::InvalidSpec("episodes need T >= 2".into()));
        }
        let target = cfg
            .embodiments
            .iter()
            .position(|n| *n == cfg.target)
            .ok_or_else(|| WorldError::UnknownEmbodiment(cfg.target.clone()))?;
        let mut rng = stream(cfg.param_seed, "dgp-params");
        let (d_u, d_a, d_s) = (cfg.d_u, cfg.d_a, cfg.d_s);

        let w_dyn = loop {
            let w = gaussian(&mut rng, d_s * d_a, cfg.dyn_scale / (d_a as f64).sqrt());
            if d_s >= d_a {
                let (_, smin) = pinv(d_s, d_a, &w);
                if smin > 0.1 * cfg.dyn_scale {
                    break w;
                }
            } else {
                break w;
            }
        };

        let mut embodiments = Vec::new();
        for name in &cfg.embodiments {
            let (q, q_pinv) = loop {
                let q = gaussian(&mut rng, d_a * d_u, cfg.action_scale / (d_u as f64).sqrt());
                let (qp, smin) = pinv(d_a, d_u, &q);
                // the action effect W_dyn·Q_e must stay injective in u
                let mut wq = vec![0.0; d_s * d_u];
                for i in 0..d_s {
                    for j in 0..d_u {
                        wq[i * d_u + j] = (0..d_a).map(|k| w_dyn[i * d_a + k] * q[k * d_u + j]).sum();
                    }
                }
                let (_, wq_min) = pinv(d_s, d_u, &wq);
                if smin > 0.3 * cfg.action_scale && wq_min > 0.2 * cfg.dyn_scale * cfg.action_scale {
                    break (q, qp);
                }
            };
            let b = (0..d_a)
                .map(|_| if cfg.offset_scale > 0.0 { rng.random_range(-cfg.offset_scale..cfg.offset_scale) } else { 0.0 })
                .collect();
            embodiments.push(Embodiment {
                name: name.clone(),
                q,
                q_pinv,
                b,
                code: Vec::new(),
            });
        }
        // appearance codes: spread on a sphere of radius code_scale, well separated
        let n_e = embodiments.len();
        if cfg.n_nuisance > 0 {
            let codes = loop {
                let codes: Vec<Vec<f64>> = (0..n_e)
                    .map(|_| {
                        let g = gaussian(&mut rng, cfg.n_nuisance, 1.0);
                        let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                        g.iter().map(|v| cfg.code_scale * v / n).collect()
                    })
                    .collect();
                let mut min_d = f64::INFINITY;
                for i in 0..n_e {
                    for j in i + 1..n_e {
                        let d: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        min_d = min_d.min(d);
                    }
                }
                if min_d > 0.8 * cfg.code_scale {
                    break codes;
                }
            };
            for (e, c) in embodiments.iter_mut().zip(codes) {
                e.code = c;
            }
        }

        let goal = (0..d_s).map(|_| rng.random_range(-cfg.goal_scale..cfg.goal_scale)).collect();
        let n_r = cfg.n_render();
        let (render, render_pinv) = loop {
            let p = gaussian(&mut rng, n_r * d_s, 1.0 / (d_s as f64).sqrt());
            let (pp, smin) = pinv(n_r, d_s, &p);
            if smin > 0.3 {
                break (p, pp);
            }
        };
        let d_x = cfg.d_x;
        let (encoder, encoder_inv) = if cfg.random_encoder {
            let g = DMatrix::from_iterator(d_x, d_x, gaussian(&mut rng, d_x * d_x, 1.0));
            let q = g.qr().q();
            let mut e = Vec::with_capacity(d_x * d_x);
            let mut ei = Vec::with_capacity(d_x * d_x);
            for i in 0..d_x {
                for j in 0..d_x {
                    e.push(q[(i, j)]);
                    ei.push(q[(j, i)]);
                }
            }
            (e, ei)
        } else {
            let mut id = vec![0.0; d_x * d_x];
            for i in 0..d_x {
                id[i * d_x + i] = 1.0;
            }
            (id.clone(), id)
        };
        let glyph = (0..GLYPH_PIXELS * cfg.n_nuisance)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        Ok(DgpSpec {
            cfg,
            embodiments,
            target,
            w_dyn,
            goal,
            render,
            render_pinv,
            encoder,
            encoder_inv,
            glyph,
            transfer: false,
        })
    }

    /// Same process with the goal mirrored along the first state axis.
    pub fn transfer_task(&self) -> DgpSpec {
        let mut t = self.clone();
        t.goal[0] = -t.goal[0];
        t.transfer = !self.transfer;
        t
    }

    pub fn n_embodiments(&self) -> usize {
        self.embodiments.len()
    }

    pub fn embodiment_index(&self, name: &str) -> Result<usize, WorldError> {
        self.embodiments
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| WorldError::UnknownEmbodiment(name.to_string()))
    }

    /// SHA-256 over every parameter of the process.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut put = |xs: &[f64]| {
            h.update((xs.len() as u64).to_le_bytes());
            for x in xs {
                h.update(x.to_le_bytes());
            }
        };
        put(&self.w_dyn);
        put(&self.goal);
        put(&self.render);
        put(&self.encoder);
        put(&self.glyph);
        for e in &self.embodiments {
            put(&e.q);
            put(&e.b);
            put(&e.code);
        }
        let c = &self.cfg;
        put(&[
            c.d_u as f64,
            c.d_a as f64,
            c.d_s as f64,
            c.d_x as f64,
            c.n_nuisance as f64,
            c.t as f64,
            c.gain,
            c.pull,
            c.lighting,
            c.lighting_drift,
            c.init_range,
            c.render_range,
            match c.render_squash {
                Squash::Identity => 0.0,
                Squash::Tanh => 1.0,
            },
            match c.action_squash {
                Squash::Identity => 0.0,
                Squash::Tanh => 1.0,
            },
        ]);
        for e in &self.embodiments {
            h.update(e.name.as_bytes());
            h.update([0]);
        }
        h.update([self.target as u8, self.transfer as u8]);
        h.finalize().into()
    }

    pub fn hash_hex(&self) -> String {
        hex(&self.hash())
    }
}
