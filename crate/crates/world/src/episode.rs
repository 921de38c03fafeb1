//! Episodes and multi-split datasets.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use scar_core::checkpoint::{read_tensors, write_tensors};
use scar_core::rng::{child_seed, stream};
use scar_core::Tensor;

use crate::error::WorldError;
use crate::process::sample_unified_action;
use crate::spec::DgpSpec;

/// One episode with its synthetic side channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub embodiment: usize,
    pub t: usize,
    /// Observations `t × d_x`.
    pub x: Vec<f64>,
    /// Raw actions `(t−1) × d_a`.
    pub a: Vec<f64>,
    /// Unified actions `(t−1) × d_u`.
    pub u: Vec<f64>,
    /// States `t × d_s`.
    pub s: Vec<f64>,
    /// Lighting offsets `t × n_nuisance`.
    pub lighting: Vec<f64>,
    /// Some state left the renderable range.
    pub clamped: bool,
}

impl Trajectory {
    pub fn x_row(&self, i: usize) -> &[f64] {
        let d = self.x.len() / self.t;
        &self.x[i * d..(i + 1) * d]
    }

    pub fn s_row(&self, i: usize) -> &[f64] {
        let d = self.s.len() / self.t;
        &self.s[i * d..(i + 1) * d]
    }

    pub fn a_row(&self, i: usize) -> &[f64] {
        let d = self.a.len() / (self.t - 1);
        &self.a[i * d..(i + 1) * d]
    }

    pub fn u_row(&self, i: usize) -> &[f64] {
        let d = self.u.len() / (self.t - 1);
        &self.u[i * d..(i + 1) * d]
    }
}

/// Deterministic in `(seed, e, t, spec)`.
pub fn generate_episode(seed: u64, e: usize, t: usize, spec: &DgpSpec) -> Result<Trajectory, WorldError> {
    if t < 2 {
        return Err(WorldError::InvalidSpec("episodes need T >= 2".into()));
    }
    if e >= spec.n_embodiments() {
        return Err(WorldError::UnknownEmbodiment(e.to_string()));
    }
    let c = &spec.cfg;
    let mut rng = stream(seed, "episode");
    let mut s: Vec<f64> = (0..c.d_s)
        .map(|_| rng.random_range(-c.init_range..c.init_range))
        .collect();
    let mut light: Vec<f64> = (0..c.n_nuisance)
        .map(|_| if c.lighting > 0.0 { rng.random_range(-c.lighting..c.lighting) } else { 0.0 })
        .collect();
    let drift: Vec<f64> = (0..c.n_nuisance)
        .map(|_| if c.lighting_drift > 0.0 { rng.random_range(-c.lighting_drift..c.lighting_drift) } else { 0.0 })
        .collect();

    let mut traj = Trajectory {
        embodiment: e,
        t,
        x: Vec::with_capacity(t * c.d_x),
        a: Vec::with_capacity((t - 1) * c.d_a),
        u: Vec::with_capacity((t - 1) * c.d_u),
        s: Vec::with_capacity(t * c.d_s),
        lighting: Vec::with_capacity(t * c.n_nuisance),
        clamped: false,
    };
    for step in 0..t {
        traj.s.extend_from_slice(&s);
        traj.lighting.extend_from_slice(&light);
        let x = spec.render(&s, e, &light);
        traj.clamped |= spec.frame_from_observation(&x).1;
        traj.x.extend(spec.encode(&x));
        if step + 1 == t {
            break;
        }
        let u = sample_unified_action(&mut rng, c.d_u);
        let a = spec.realize_action(&u, e)?;
        s = spec.step_dynamics(&s, &a);
        for (l, d) in light.iter_mut().zip(&drift) {
            *l += d;
        }
        traj.u.extend(u);
        traj.a.extend(a);
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    EvalTarget,
    EvalTransfer,
    A2l,
    Analysis,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::EvalTarget, Split::EvalTransfer, Split::A2l, Split::Analysis];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalTarget => "eval_target",
            Split::EvalTransfer => "eval_transfer",
            Split::A2l => "a2l",
            Split::Analysis => "analysis",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Split::ALL.get(c as usize).copied()
    }
}

/// Episode counts per split. Source counts apply to every non-target embodiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DataCounts {
    pub target_train: usize,
    pub source_train: usize,
    pub eval_target: usize,
    pub eval_transfer: usize,
    pub a2l: usize,
    /// Per embodiment, held out for probes and distribution tests.
    pub analysis: usize,
}

impl Default for DataCounts {
    fn default() -> Self {
        DataCounts {
            target_train: 10,
            source_train: 300,
            eval_target: 50,
            eval_transfer: 50,
            a2l: 50,
            analysis: 40,
        }
    }
}

impl DataCounts {
    pub fn from_config(c: &mut scar_core::Config) -> Result<Self, WorldError> {
        let d = DataCounts::default();
        Ok(DataCounts {
            target_train: c.usize_or("data.target_train", d.target_train)?,
            source_train: c.usize_or("data.source_train", d.source_train)?,
            eval_target: c.usize_or("data.eval_target", d.eval_target)?,
            eval_transfer: c.usize_or("data.eval_transfer", d.eval_transfer)?,
            a2l: c.usize_or("data.a2l", d.a2l)?,
            analysis: c.usize_or("data.analysis", d.analysis)?,
        })
    }

    /// `(split, embodiment, count)` in generation order.
    pub fn plan(&self, spec: &DgpSpec) -> Vec<(Split, usize, usize)> {
        let tgt = spec.target;
        let mut out = Vec::new();
        for e in 0..spec.n_embodiments() {
            out.push((Split::Train, e, if e == tgt { self.target_train } else { self.source_train }));
        }
        out.push((Split::EvalTarget, tgt, self.eval_target));
        out.push((Split::EvalTransfer, tgt, self.eval_transfer));
        out.push((Split::A2l, tgt, self.a2l));
        for e in 0..spec.n_embodiments() {
            out.push((Split::Analysis, e, self.analysis));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub split: Split,
    pub seed: u64,
    pub traj: Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec_hash: [u8; 32],
    pub d_u: usize,
    pub d_a: usize,
    pub d_s: usize,
    pub d_x: usize,
    pub t: usize,
    pub n_embodiments: usize,
    pub target: usize,
    pub records: Vec<Record>,
}

/// Generates every split. Episodes of the transfer split come from the
/// transfer-task variant of `spec`.
pub fn generate_dataset(root_seed: u64, counts: &DataCounts, spec: &DgpSpec) -> Result<Dataset, WorldError> {
    let transfer = spec.transfer_task();
    let jobs: Vec<(Split, usize, usize)> = counts
        .plan(spec)
        .into_iter()
        .flat_map(|(split, e, n)| (0..n).map(move |k| (split, e, k)))
        .collect();
    let t = spec.cfg.t;
    let records: Result<Vec<Record>, WorldError> = jobs
        .par_iter()
        .map(|&(split, e, k)| {
            let seed = child_seed(root_seed, &format!("{}/{}/{}", split.name(), e, k));
            let process = if split == Split::EvalTransfer { &transfer } else { spec };
            Ok(Record {
                split,
                seed,
                traj: generate_episode(seed, e, t, process)?,
            })
        })
        .collect();
    let c = &spec.cfg;
    Ok(Dataset {
        spec_hash: spec.hash(),
        d_u: c.d_u,
        d_a: c.d_a,
        d_s: c.d_s,
        d_x: c.d_x,
        t,
        n_embodiments: spec.n_embodiments(),
        target: spec.target,
        records: records?,
    })
}

const MAGIC: &[u8; 4] = b"SCDS";
const VERSION: u32 = 1;

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn trajectories(&self, split: Split) -> Vec<&Trajectory> {
        self.split(split).map(|r| &r.traj).collect()
    }

    pub fn count(&self, split: Split, e: usize) -> usize {
        self.split(split).filter(|r| r.traj.embodiment == e).count()
    }

    /// Header: magic `SCDS`, version, spec hash, dims, embodiment count,
    /// target, a `(split, embodiment, count)` table and the episode count.
    /// Each episode follows as `u8` split, `u8` embodiment, `u64` seed, `u8`
    /// clamp flag, `u32` byte length and a tensor blob (`x`, `a`, `u`, `s`,
    /// `lighting`) in the checkpoint encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash);
        for d in [self.d_u, self.d_a, self.d_s, self.d_x, self.t, self.n_embodiments, self.target] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut table: Vec<(u8, u8, u32)> = Vec::new();
        for r in &self.records {
            let key = (r.split.code(), r.traj.embodiment as u8);
            match table.iter_mut().find(|(s, e, _)| (*s, *e) == key) {
                Some(row) => row.2 += 1,
                None => table.push((key.0, key.1, 1)),
            }
        }
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (s, e, n) in table {
            out.push(s);
            out.push(e);
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let tr = &r.traj;
            let t = tr.t;
            let tensors = [
                ("x", Tensor::matrix(t, self.d_x, tr.x.clone())),
                ("a", Tensor::matrix(t - 1, self.d_a, tr.a.clone())),
                ("u", Tensor::matrix(t - 1, self.d_u, tr.u.clone())),
                ("s", Tensor::matrix(t, self.d_s, tr.s.clone())),
                ("lighting", Tensor::matrix(t, tr.lighting.len() / t, tr.lighting.clone())),
            ];
            let owned: Vec<(&str, Tensor)> = tensors
                .into_iter()
                .map(|(n, t)| (n, t.expect("trajectory shapes are consistent")))
                .collect();
            let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (*n, t)).collect();
            let mut blob = Vec::new();
            write_tensors(&mut blob, &refs).expect("writing to a Vec cannot fail");
            out.push(r.split.code());
            out.push(tr.embodiment as u8);
            out.extend_from_slice(&r.seed.to_le_bytes());
            out.push(tr.clamped as u8);
            out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WorldError> {
        let mut cur = Cursor { b: bytes, at: 0 };
        if cur.take(4)? != MAGIC {
            return Err(WorldError::Format("bad magic".into()));
        }
        let v = cur.u32()?;
        if v != VERSION {
            return Err(WorldError::Format(format!("unsupported version {v}")));
        }
        let mut spec_hash = [0u8; 32];
        spec_hash.copy_from_slice(cur.take(32)?);
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = cur.u32()? as usize;
        }
        let [d_u, d_a, d_s, d_x, t, n_embodiments, target] = dims;
        let n_table = cur.u32()?;
        let mut table = Vec::new();
        for _ in 0..n_table {
            let s = cur.take(1)?[0];
            let e = cur.take(1)?[0];
            table.push((s, e, cur.u32()?));
        }
        let n = cur.u32()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let split = Split::from_code(cur.take(1)?[0]).ok_or_else(|| WorldError::Format("bad split code".into()))?;
            let embodiment = cur.take(1)?[0] as usize;
            let seed = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            let clamped = cur.take(1)?[0] != 0;
            let len = cur.u32()? as usize;
            let tensors = read_tensors(cur.take(len)?)?;
            let get = |name: &str| -> Result<Vec<f64>, WorldError> {
                tensors
                    .iter()
                    .find(|(n, _)| n == name)
                    .map(|(_, t)| t.data().to_vec())
                    .ok_or_else(|| WorldError::Format(format!("episode lacks tensor {name}")))
            };
            records.push(Record {
                split,
                seed,
                traj: Trajectory {
                    embodiment,
                    t,
                    x: get("x")?,
                    a: get("a")?,
                    u: get("u")?,
                    s: get("s")?,
                    lighting: get("lighting")?,
                    clamped,
                },
            });
        }
        if cur.at != bytes.len() {
            return Err(WorldError::Format("trailing bytes".into()));
        }
        let ds = Dataset {
            spec_hash,
            d_u,
            d_a,
            d_s,
            d_x,
            t,
            n_embodiments,
            target,
            records,
        };
        for (s, e, c) in table {
            let split = Split::from_code(s).ok_or_else(|| WorldError::Format("bad split code".into()))?;
            if ds.count(split, e as usize) != c as usize {
                return Err(WorldError::Format(format!("count table disagrees for {} / {e}", split.name())));
            }
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WorldError> {
        if self.at + n > self.b.len() {
            return Err(WorldError::Format("truncated".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, WorldError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::DgpConfig;

    #[test]
    fn replay_reproduces_states_exactly() {
        let spec = DgpSpec::build(DgpConfig::default()).unwrap();
        for e in 0..4 {
            let tr = generate_episode(42 + e as u64, e, 17, &spec).unwrap();
            let mut s = tr.s_row(0).to_vec();
            for i in 0..16 {
                s = spec.step_dynamics(&s, tr.a_row(i));
                assert_eq!(s.as_slice(), tr.s_row(i + 1));
            }
            assert_eq!(generate_episode(42 + e as u64, e, 17, &spec).unwrap(), tr);
        }
    }

    #[test]
    fn recorded_u_is_recoverable() {
        let spec = DgpSpec::build(DgpConfig::default()).unwrap();
        let tr = generate_episode(3, 1, 17, &spec).unwrap();
        for i in 0..16 {
            let u = spec.recover_unified(tr.a_row(i), 1).unwrap();
            for (a, b) in u.iter().zip(tr.u_row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_episode_refused() {
        let spec = DgpSpec::build(DgpConfig::default()).unwrap();
        assert!(generate_episode(0, 0, 1, &spec).is_err());
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let spec = DgpSpec::build(DgpConfig::default()).unwrap();
        let counts = DataCounts {
            target_train: 2,
            source_train: 1,
            eval_target: 1,
            eval_transfer: 1,
            a2l: 1,
            analysis: 1,
        };
        let ds = generate_dataset(9, &counts, &spec).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back.records.len(), ds.records.len());
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.records.iter().zip(&ds.records) {
            for (x, y) in a.traj.x.iter().zip(&b.traj.x) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
