//! Scores latent codes against the ground-truth unified action: per-body
//! bijection fits, an embodiment probe and pushforward equality tests.

use rand::seq::SliceRandom;
use scar_core::rng::stream;
use serde::Serialize;

use crate::error::EvalError;
use crate::regress::{fit_probe, fit_regressor, r_squared, FitConfig};

/// Codes `z` (`d_z` wide), unified actions `u` (`d_u` wide) and body labels, row-aligned.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub d_z: usize,
    pub u: Vec<f64>,
    pub d_u: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LatentSample {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    fn check(&self) -> Result<(), EvalError> {
        let n = self.rows();
        if self.z.len() != n * self.d_z || self.u.len() != n * self.d_u {
            return Err(EvalError::SizeMismatch(format!(
                "{n} labels, {} z values, {} u values",
                self.z.len(),
                self.u.len()
            )));
        }
        Ok(())
    }

    /// Row indices of body `e`, split into fit and held-out parts (last 30% held out).
    pub fn split(&self, e: usize) -> (Vec<usize>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.rows()).filter(|&i| self.labels[i] == e).collect();
        let cut = idx.len() * 7 / 10;
        (idx[..cut].to_vec(), idx[cut..].to_vec())
    }
}

pub fn gather(x: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct BodyFit {
    pub embodiment: usize,
    pub r2_u_to_z: f64,
    pub r2_z_to_u: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RecoveryReport {
    pub per_body: Vec<BodyFit>,
    pub probe_ce: f64,
    pub probe_accuracy: f64,
    /// `ln|E| − CE`, floored at zero.
    pub mi_lower_bound: f64,
}

impl RecoveryReport {
    pub fn min_r2(&self) -> f64 {
        self.per_body
            .iter()
            .flat_map(|b| [b.r2_u_to_z, b.r2_z_to_u])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Held-out R² of `u → z` and `z → u` for one body.
pub fn body_fit(s: &LatentSample, e: usize, cfg: &FitConfig) -> Result<BodyFit, EvalError> {
    let (fit, held) = s.split(e);
    if fit.is_empty() || held.is_empty() {
        return Err(EvalError::NotEnoughData(format!("embodiment {e} has {} rows", fit.len() + held.len())));
    }
    let (zf, uf) = (gather(&s.z, s.d_z, &fit), gather(&s.u, s.d_u, &fit));
    let (zh, uh) = (gather(&s.z, s.d_z, &held), gather(&s.u, s.d_u, &held));
    let fwd = fit_regressor(&uf, s.d_u, &zf, s.d_z, cfg)?;
    let inv = fit_regressor(&zf, s.d_z, &uf, s.d_u, cfg)?;
    Ok(BodyFit {
        embodiment: e,
        r2_u_to_z: r_squared(&zh, &fwd.predict(&uh)?, s.d_z),
        r2_z_to_u: r_squared(&uh, &inv.predict(&zh)?, s.d_u),
    })
}

/// Held-out cross-entropy and accuracy of a logistic probe `e | z`.
pub fn embodiment_probe(s: &LatentSample, cfg: &FitConfig) -> Result<(f64, f64), EvalError> {
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for e in 0..s.classes {
        let (f, h) = s.split(e);
        fit.extend(f);
        held.extend(h);
    }
    let lab = |idx: &[usize]| idx.iter().map(|&i| s.labels[i]).collect::<Vec<_>>();
    let probe = fit_probe(&gather(&s.z, s.d_z, &fit), s.d_z, &lab(&fit), s.classes, cfg)?;
    probe.score(&gather(&s.z, s.d_z, &held), &lab(&held))
}

pub fn latent_recovery_score(s: &LatentSample, seed: u64) -> Result<RecoveryReport, EvalError> {
    s.check()?;
    let per_body = (0..s.classes)
        .map(|e| body_fit(s, e, &FitConfig::mlp(seed)))
        .collect::<Result<Vec<_>, _>>()?;
    let (probe_ce, probe_accuracy) = embodiment_probe(s, &FitConfig::linear(seed))?;
    Ok(RecoveryReport {
        per_body,
        probe_ce,
        probe_accuracy,
        mi_lower_bound: ((s.classes as f64).ln() - probe_ce).max(0.0),
    })
}

/// Pairwise Euclidean distances of `n` points of width `d`.
fn distance_matrix(x: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let r: f64 = (0..d).map(|k| (x[i * d + k] - x[j * d + k]).powi(2)).sum::<f64>().sqrt();
            m[i * n + j] = r;
            m[j * n + i] = r;
        }
    }
    m
}

/// `2E|X−Y| − E|X−X'| − E|Y−Y'|` from a distance matrix and two index groups.
fn energy_from(m: &[f64], n: usize, a: &[usize], b: &[usize]) -> f64 {
    let mean = |p: &[usize], q: &[usize]| {
        let mut s = 0.0;
        for &i in p {
            for &j in q {
                s += m[i * n + j];
            }
        }
        s / (p.len() * q.len()) as f64
    };
    2.0 * mean(a, b) - mean(a, a) - mean(b, b)
}

/// Energy distance between two samples of width `d`.
pub fn energy_distance(x: &[f64], y: &[f64], d: usize) -> f64 {
    let mut pooled = x.to_vec();
    pooled.extend_from_slice(y);
    let n = pooled.len() / d;
    let nx = x.len() / d;
    let a: Vec<usize> = (0..nx).collect();
    let b: Vec<usize> = (nx..n).collect();
    energy_from(&distance_matrix(&pooled, d), n, &a, &b)
}

#[derive(Clone, Debug, Serialize)]
pub struct EnergyPair {
    pub a: usize,
    pub b: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PushforwardReport {
    pub pairs: Vec<EnergyPair>,
    pub permutations: usize,
    pub per_group: usize,
}

impl PushforwardReport {
    pub fn min_p(&self) -> f64 {
        self.pairs.iter().map(|p| p.p_value).fold(1.0, f64::min)
    }

    pub fn max_statistic(&self) -> f64 {
        self.pairs.iter().map(|p| p.statistic).fold(0.0, f64::max)
    }

    /// Smallest Bonferroni-adjusted p-value over the pairs.
    pub fn adjusted_min_p(&self) -> f64 {
        (self.min_p() * self.pairs.len() as f64).min(1.0)
    }

    /// No pair rejects equality at family-wise level 0.05.
    pub fn passes(&self) -> bool {
        self.adjusted_min_p() > 0.05
    }
}

/// Pairwise energy-distance permutation tests of `z | e`, on at most
/// `per_group` rows per body.
pub fn pushforward_test(s: &LatentSample, per_group: usize, permutations: usize, seed: u64) -> Result<PushforwardReport, EvalError> {
    s.check()?;
    let mut rng = stream(seed, "energy");
    let mut groups = Vec::new();
    let mut pooled = Vec::new();
    for e in 0..s.classes {
        let mut idx: Vec<usize> = (0..s.rows()).filter(|&i| s.labels[i] == e).collect();
        if idx.len() < 2 {
            return Err(EvalError::NotEnoughData(format!("embodiment {e} has {} rows", idx.len())));
        }
        idx.shuffle(&mut rng);
        idx.truncate(per_group);
        let start = pooled.len() / s.d_z;
        pooled.extend(gather(&s.z, s.d_z, &idx));
        groups.push((start..start + idx.len()).collect::<Vec<usize>>());
    }
    let n = pooled.len() / s.d_z;
    let m = distance_matrix(&pooled, s.d_z);
    let mut pairs = Vec::new();
    for a in 0..s.classes {
        for b in a + 1..s.classes {
            let obs = energy_from(&m, n, &groups[a], &groups[b]);
            let mut both: Vec<usize> = groups[a].iter().chain(&groups[b]).copied().collect();
            let na = groups[a].len();
            let mut exceed = 0usize;
            for _ in 0..permutations {
                both.shuffle(&mut rng);
                if energy_from(&m, n, &both[..na], &both[na..]) >= obs {
                    exceed += 1;
                }
            }
            pairs.push(EnergyPair {
                a,
                b,
                statistic: obs,
                p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
            });
        }
    }
    Ok(PushforwardReport {
        pairs,
        permutations,
        per_group,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn energy_distance_zero_on_identical_samples_and_positive_on_shift() {
        let mut rng = stream(1, "t");
        let x: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(energy_distance(&x, &x, 2).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert!(energy_distance(&x, &y, 2) > 0.5);
    }

    #[test]
    fn energy_distance_matches_one_dimensional_closed_form() {
        // point masses at 0 and 1: 2·1 − 0 − 0
        assert!((energy_distance(&[0.0, 0.0], &[1.0, 1.0], 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shuffled_labels_pass_and_offsets_fail() {
        let mut rng = stream(2, "t");
        let n = 240;
        let u: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let same = LatentSample {
            z: u.clone(),
            d_z: 2,
            u: u.clone(),
            d_u: 2,
            labels: labels.clone(),
            classes: 3,
        };
        assert!(pushforward_test(&same, 80, 99, 3).unwrap().passes());
        let shifted: Vec<f64> = u
            .chunks(2)
            .zip(&labels)
            .flat_map(|(r, &e)| [r[0] + e as f64, r[1]])
            .collect();
        let diff = LatentSample { z: shifted, ..same };
        let rep = pushforward_test(&diff, 80, 99, 3).unwrap();
        assert!(!rep.passes());
        assert!(rep.min_p() <= 0.01);
    }
}
