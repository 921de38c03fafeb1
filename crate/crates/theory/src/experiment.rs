//! vMF cluster experiments on the intermediate action code.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use scar_core::rng::stream;
use scar_world::vmf_sample;
use serde::Serialize;

use crate::error::TheoryError;

/// Unit cluster centers whose pairwise differences span a subspace `V` of
/// dimension `d_a − d_z`, a concentration, and a linear encoder `M`.
#[derive(Clone, Debug, Serialize)]
pub struct VmfExperiment {
    pub d_a: usize,
    pub d_z: usize,
    pub n_e: usize,
    pub kappa: f64,
    pub centers: Vec<Vec<f64>>,
    /// Encoder, `d_z × d_a` row-major.
    pub m: Vec<f64>,
    /// Orthonormal basis of `V`, one row per vector.
    pub v_basis: Vec<Vec<f64>>,
    /// Orthonormal basis of `V⊥`.
    pub v_perp: Vec<Vec<f64>>,
}

/// Norm of the component of every center inside `V`.
const IN_V: f64 = 0.8;

pub fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, "frame");
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

pub fn rank(rows: &[Vec<f64>], tol: f64) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    m.singular_values().iter().filter(|s| **s > tol).count()
}

impl VmfExperiment {
    pub fn build(d_a: usize, d_z: usize, n_e: usize, kappa: f64, seed: u64) -> Result<Self, TheoryError> {
        if d_z == 0 || d_z >= d_a {
            return Err(TheoryError::InvalidExperiment(format!("need 0 < d_z < d_a, got d_z={d_z}, d_a={d_a}")));
        }
        let k = d_a - d_z;
        if n_e < 2 || n_e - 1 < k {
            return Err(TheoryError::InvalidExperiment(format!("|E|-1 = {} cannot span dim V = {k}", n_e.saturating_sub(1))));
        }
        if kappa <= 0.0 {
            return Err(TheoryError::InvalidExperiment(format!("kappa {kappa} must be positive")));
        }
        let q = random_orthogonal(d_a, seed);
        let col = |j: usize| q.column(j).iter().copied().collect::<Vec<f64>>();
        let v_basis: Vec<Vec<f64>> = (0..k).map(col).collect();
        let v_perp: Vec<Vec<f64>> = (k..d_a).map(col).collect();
        let shared = &v_perp[0];
        let mut rng = stream(seed, "centers");
        let centers = loop {
            let centers: Vec<Vec<f64>> = (0..n_e)
                .map(|_| {
                    let g: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
                    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mut c: Vec<f64> = shared.iter().map(|s| s * (1.0 - IN_V * IN_V).sqrt()).collect();
                    for (j, b) in v_basis.iter().enumerate() {
                        for i in 0..d_a {
                            c[i] += IN_V * g[j] / gn * b[i];
                        }
                    }
                    c
                })
                .collect();
            let diffs: Vec<Vec<f64>> = centers[1..]
                .iter()
                .map(|c| c.iter().zip(&centers[0]).map(|(a, b)| a - b).collect())
                .collect();
            if rank(&diffs, 1e-3) == k {
                break centers;
            }
        };
        let mut rng = stream(seed, "encoder");
        let m = (0..d_z * d_a)
            .map(|_| rng.sample::<f64, _>(StandardNormal) / (d_a as f64).sqrt())
            .collect();
        Ok(VmfExperiment {
            d_a,
            d_z,
            n_e,
            kappa,
            centers,
            m,
            v_basis,
            v_perp,
        })
    }

    /// Shipped presets: `d_a ∈ {4, 6, 8}` with four embodiments and κ = 8.
    pub fn preset(d_a: usize, seed: u64) -> Result<Self, TheoryError> {
        let d_z = match d_a {
            4 => 2,
            6 => 3,
            8 => 5,
            _ => return Err(TheoryError::InvalidExperiment(format!("no preset for d_a={d_a}"))),
        };
        Self::build(d_a, d_z, 4, 8.0, seed)
    }

    pub fn presets(seed: u64) -> Vec<Self> {
        [4, 6, 8].iter().map(|&d| Self::preset(d, seed).expect("valid preset")).collect()
    }

    /// `n` draws per embodiment, rows grouped by embodiment.
    pub fn sample(&self, n: usize, seed: u64, key: &str) -> Result<(Vec<f64>, Vec<usize>), TheoryError> {
        let mut x = Vec::with_capacity(n * self.n_e * self.d_a);
        let mut labels = Vec::with_capacity(n * self.n_e);
        for (e, c) in self.centers.iter().enumerate() {
            let mut rng = stream(seed, &format!("{key}/{e}"));
            for row in vmf_sample(c, self.kappa, n, &mut rng)? {
                x.extend(row);
                labels.push(e);
            }
        }
        Ok((x, labels))
    }

    /// `M v` for a vector of width `d_a`.
    pub fn encode(&self, m: &[f64], v: &[f64]) -> Vec<f64> {
        (0..self.d_z)
            .map(|i| (0..self.d_a).map(|j| m[i * self.d_a + j] * v[j]).sum())
            .collect()
    }

    /// Rows of `V⊥` stacked as an encoder.
    pub fn v_perp_encoder(&self) -> Vec<f64> {
        self.v_perp.iter().flatten().copied().collect()
    }
}
