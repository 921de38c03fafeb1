//! The full latent-action world model in one parameter store.

use scar_core::checkpoint::{decode_store, encode_store};
use scar_core::rng::{stream, Stream};
use scar_core::{ParamStore, Tensor};

use crate::batch::EpisodeBatch;
use crate::config::ModelConfig;
use crate::disc::Discriminator;
use crate::error::ModelError;
use crate::fdm::{CondEncoder, Fdm};
use crate::idm::Idm;
use crate::rollout::rollout_generate;

/// What the FDM is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CondSource {
    /// IDM latent actions.
    Latent,
    /// Raw commands, linearly projected by the conditioning convolution.
    RawAction,
}

/// Parameter prefixes: `idm.`, `fdm.`, `cond.`, `disc.` (and `a2l.` once a
/// controller is attached).
#[derive(Clone, Debug)]
pub struct ScarModel {
    pub cfg: ModelConfig,
    pub source: CondSource,
    pub idm: Idm,
    pub fdm: Fdm,
    pub cond: CondEncoder,
    pub disc: Discriminator,
}

impl ScarModel {
    pub fn new(cfg: &ModelConfig, source: CondSource, seed: u64) -> Result<(Self, ParamStore), ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let idm = Idm::new(&mut store, cfg, &mut stream(seed, "init/idm"))?;
        let fdm = Fdm::new(&mut store, cfg, &mut stream(seed, "init/fdm"));
        let d_code = match source {
            CondSource::Latent => cfg.d_z,
            CondSource::RawAction => cfg.d_a,
        };
        let cond = CondEncoder::new(&mut store, d_code, cfg, &mut stream(seed, "init/cond"));
        let disc = Discriminator::new(&mut store, cfg, &mut stream(seed, "init/disc"))?;
        Ok((
            ScarModel {
                cfg: cfg.clone(),
                source,
                idm,
                fdm,
                cond,
                disc,
            },
            store,
        ))
    }

    /// Rebuilds the structure and fills it from checkpoint bytes. Every
    /// parameter of the structure must be present.
    pub fn load(cfg: &ModelConfig, source: CondSource, bytes: &[u8]) -> Result<(Self, ParamStore), ModelError> {
        let (model, mut store) = Self::new(cfg, source, 0)?;
        let saved = decode_store(bytes)?;
        let n = store.load_matching(&saved)?;
        let needed = store.iter().filter(|(n, _)| !n.starts_with("a2l.")).count();
        if n < needed {
            let missing = store
                .iter()
                .map(|(n, _)| n)
                .find(|n| saved.id(n).is_none())
                .unwrap_or("?")
                .to_string();
            return Err(ModelError::MissingComponent(missing));
        }
        Ok((model, store))
    }

    pub fn save(store: &ParamStore) -> Vec<u8> {
        encode_store(store)
    }

    /// Conditioning codes at evaluation time: posterior means, or the raw
    /// commands for the action-conditioned baseline.
    pub fn codes(&self, store: &ParamStore, batch: &EpisodeBatch) -> Result<Tensor, ModelError> {
        match self.source {
            CondSource::Latent => {
                let mu = self.idm.means(store, &batch.frames, batch.b, batch.t)?;
                Ok(Tensor::matrix(batch.b * (batch.t - 1), self.cfg.d_z, mu)?)
            }
            CondSource::RawAction => Ok(batch.actions.clone()),
        }
    }

    /// First `f_hist` tokens of every episode.
    pub fn context(&self, batch: &EpisodeBatch) -> Vec<f64> {
        let d = self.cfg.d_v;
        let h = self.cfg.f_hist;
        let mut out = Vec::with_capacity(batch.b * h * d);
        for ep in 0..batch.b {
            out.extend_from_slice(&batch.tokens.data()[ep * batch.f * d..(ep * batch.f + h) * d]);
        }
        out
    }

    /// Rolls out every episode from its own context under `codes`
    /// (`[b·(t−1), d_code]`). Returns `b·f` token rows.
    pub fn rollout(
        &self,
        store: &ParamStore,
        context: &[f64],
        codes: &Tensor,
        b: usize,
        noise: &mut Stream,
    ) -> Result<Vec<f64>, ModelError> {
        let c = self.cond.tokens(store, codes, b, self.cfg.t)?;
        rollout_generate(
            &self.fdm,
            store,
            context,
            Some(&c),
            b,
            self.cfg.tokens(),
            self.cfg.f_hist,
            self.cfg.rollout_steps,
            noise,
        )
    }
}
