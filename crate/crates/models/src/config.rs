//! Architecture and training hyperparameters.

use scar_core::{Config, ConfigError};

use crate::error::ModelError;

/// Time-to-noise schedule `σ_τ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Linear,
}

impl Schedule {
    pub fn sigma(self, tau: f64) -> f64 {
        match self {
            Schedule::Linear => tau,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Schedule::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Latent observation width.
    pub d_v: usize,
    pub d_z: usize,
    /// Raw action width, used by the action-conditioned baseline and A2L.
    pub d_a: usize,
    pub n_embodiments: usize,
    /// Frames per episode.
    pub t: usize,
    /// Temporal compression of the FDM token timeline.
    pub stride: usize,
    /// Clean history tokens during rollout.
    pub f_hist: usize,
    pub p_clean: f64,
    pub idm_hidden: usize,
    pub fdm_hidden: usize,
    pub fdm_blocks: usize,
    pub cond_width: usize,
    pub time_width: usize,
    pub disc_hidden: usize,
    pub a2l_width: usize,
    pub rollout_steps: usize,
    pub schedule: Schedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_v: 12,
            d_z: 8,
            d_a: 5,
            n_embodiments: 4,
            t: 17,
            stride: 1,
            f_hist: 5,
            p_clean: 0.5,
            idm_hidden: 64,
            fdm_hidden: 64,
            fdm_blocks: 2,
            cond_width: 32,
            time_width: 8,
            disc_hidden: 64,
            a2l_width: 32,
            rollout_steps: 8,
            schedule: Schedule::Linear,
        }
    }
}

impl ModelConfig {
    /// Reads `model.*` keys; dimensions tied to the data come from `base`.
    pub fn from_config(c: &mut Config, base: ModelConfig) -> Result<Self, ModelError> {
        let sched = c.str_or("model.schedule", "linear");
        let schedule = Schedule::parse(&sched).ok_or_else(|| ModelError::UnknownName {
            key: "model.schedule",
            value: sched.clone(),
        })?;
        let m = ModelConfig {
            d_z: c.usize_or("model.d_z", base.d_z)?,
            stride: c.usize_or("model.stride", base.stride)?,
            f_hist: c.usize_or("model.f_hist", base.f_hist)?,
            p_clean: c.f64_or("model.p_clean", base.p_clean)?,
            idm_hidden: c.usize_or("model.idm_hidden", base.idm_hidden)?,
            fdm_hidden: c.usize_or("model.fdm_hidden", base.fdm_hidden)?,
            fdm_blocks: c.usize_or("model.fdm_blocks", base.fdm_blocks)?,
            cond_width: c.usize_or("model.cond_width", base.cond_width)?,
            time_width: c.usize_or("model.time_width", base.time_width)?,
            disc_hidden: c.usize_or("model.disc_hidden", base.disc_hidden)?,
            a2l_width: c.usize_or("model.a2l_width", base.a2l_width)?,
            rollout_steps: c.usize_or("model.rollout_steps", base.rollout_steps)?,
            schedule,
            ..base
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ConfigError::Contradiction(msg).into());
        if self.t < 2 {
            return bad(format!("episodes of {} frames have no transitions", self.t));
        }
        if self.stride == 0 || (self.t - 1) % self.stride != 0 {
            return bad(format!("stride {} does not divide T-1 = {}", self.stride, self.t - 1));
        }
        if self.f_hist == 0 || self.f_hist >= self.tokens() {
            return bad(format!("f_hist {} must lie in 1..{}", self.f_hist, self.tokens()));
        }
        if !(0.0..=1.0).contains(&self.p_clean) {
            return bad(format!("p_clean {} outside [0, 1]", self.p_clean));
        }
        if self.time_width < 2 || self.time_width % 2 != 0 {
            return bad(format!("time_width {} must be even", self.time_width));
        }
        if self.rollout_steps == 0 {
            return bad("rollout_steps must be positive".into());
        }
        Ok(())
    }

    /// FDM tokens per episode, `1 + (T−1)/stride`.
    pub fn tokens(&self) -> usize {
        1 + (self.t - 1) / self.stride
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    SharedLatent,
    ScarKl,
    ScarGrl,
    ScarKlGrl,
    TargetOnlyLatent,
    GtAction,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SharedLatent,
        Variant::ScarKl,
        Variant::ScarGrl,
        Variant::ScarKlGrl,
        Variant::TargetOnlyLatent,
        Variant::GtAction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::SharedLatent => "shared-latent",
            Variant::ScarKl => "scar-kl",
            Variant::ScarGrl => "scar-grl",
            Variant::ScarKlGrl => "scar-kl-grl",
            Variant::TargetOnlyLatent => "target-only-latent",
            Variant::GtAction => "gt-action-baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_kl(self) -> bool {
        matches!(self, Variant::ScarKl | Variant::ScarKlGrl)
    }

    pub fn uses_grl(self) -> bool {
        matches!(self, Variant::ScarGrl | Variant::ScarKlGrl)
    }

    pub fn target_only(self) -> bool {
        self == Variant::TargetOnlyLatent
    }

    pub fn raw_actions(self) -> bool {
        self == Variant::GtAction
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub beta: f64,
    pub lambda_adv: f64,
    pub alpha: f64,
    pub lr_idm: f64,
    pub wd_idm: f64,
    pub lr_fdm: f64,
    pub wd_fdm: f64,
    pub lr_disc: f64,
    pub wd_disc: f64,
    pub lr_a2l: f64,
    pub wd_a2l: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub pretrain_fdm: bool,
    pub pretrain_steps: usize,
}

pub const DEFAULT_BETA: f64 = 5e-4;
pub const DEFAULT_LAMBDA_ADV: f64 = 5e-3;
pub const DEFAULT_ALPHA: f64 = 0.25;

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            variant,
            beta: if variant.uses_kl() { DEFAULT_BETA } else { 0.0 },
            lambda_adv: if variant.uses_grl() { DEFAULT_LAMBDA_ADV } else { 0.0 },
            alpha: DEFAULT_ALPHA,
            lr_idm: 1e-3,
            wd_idm: 1e-4,
            lr_fdm: 1e-3,
            wd_fdm: 5e-2,
            lr_disc: 1e-3,
            wd_disc: 1e-4,
            lr_a2l: 1e-3,
            wd_a2l: 1e-4,
            steps: 2000,
            batch: 16,
            seed,
            pretrain_fdm: false,
            pretrain_steps: 1000,
        }
    }

    /// Reads `train.*` keys. The variant fixes which loss terms are active, so
    /// a weight that contradicts it is refused rather than ignored.
    pub fn from_config(c: &mut Config, variant: Option<Variant>) -> Result<Self, ModelError> {
        let name = match variant {
            Some(v) => v.name().to_string(),
            None => c.str_or("train.variant", "scar-kl-grl"),
        };
        let variant = Variant::parse(&name).ok_or_else(|| ModelError::UnknownName {
            key: "train.variant",
            value: name.clone(),
        })?;
        let d = TrainConfig::new(variant, 0);
        let cfg = TrainConfig {
            variant,
            beta: c.f64_or("train.beta", d.beta)?,
            lambda_adv: c.f64_or("train.lambda_adv", d.lambda_adv)?,
            alpha: c.f64_or("train.alpha", d.alpha)?,
            lr_idm: c.f64_or("train.lr_idm", d.lr_idm)?,
            wd_idm: c.f64_or("train.wd_idm", d.wd_idm)?,
            lr_fdm: c.f64_or("train.lr_fdm", d.lr_fdm)?,
            wd_fdm: c.f64_or("train.wd_fdm", d.wd_fdm)?,
            lr_disc: c.f64_or("train.lr_disc", d.lr_disc)?,
            wd_disc: c.f64_or("train.wd_disc", d.wd_disc)?,
            lr_a2l: c.f64_or("train.lr_a2l", d.lr_a2l)?,
            wd_a2l: c.f64_or("train.wd_a2l", d.wd_a2l)?,
            steps: c.usize_or("train.steps", d.steps)?,
            batch: c.usize_or("train.batch", d.batch)?,
            seed: c.u64_or("train.seed", d.seed)?,
            pretrain_fdm: c.bool_or("train.pretrain_fdm", d.pretrain_fdm)?,
            pretrain_steps: c.usize_or("train.pretrain_steps", d.pretrain_steps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let v = self.variant;
        let bad = |msg: String| -> Result<(), ModelError> { Err(ConfigError::Contradiction(msg).into()) };
        if self.beta < 0.0 || self.lambda_adv < 0.0 || self.alpha < 0.0 {
            return bad("loss weights and GRL strength must be non-negative".into());
        }
        if v.uses_kl() != (self.beta > 0.0) {
            let need = if v.uses_kl() { "beta > 0" } else { "beta = 0" };
            return bad(format!("variant {} needs {need}, got beta = {}", v.name(), self.beta));
        }
        if v.uses_grl() != (self.lambda_adv > 0.0) {
            let need = if v.uses_grl() { "lambda_adv > 0" } else { "lambda_adv = 0" };
            return bad(format!("variant {} needs {need}, got lambda_adv = {}", v.name(), self.lambda_adv));
        }
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        Ok(())
    }
}
