//! Reading generated data directories and trained checkpoints back in.

use std::fs;
use std::path::{Path, PathBuf};

use scar_core::checkpoint::load_store;
use scar_core::{Config, ParamStore};
use scar_models::{CondSource, ModelConfig, ScarModel, Variant};
use scar_world::{DataCounts, Dataset, DgpConfig, DgpSpec};

use crate::error::{io_err, CliError};

pub const DATASET_FILE: &str = "dataset.bin";
pub const SPEC_FILE: &str = "spec.cfg";

pub fn read_text(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn parse_config(path: &Path) -> Result<Config, CliError> {
    Config::parse(&read_text(path)?).map_err(|source| CliError::Config {
        file: path.display().to_string(),
        source,
    })
}

/// Consumes the `[dgp]` and `[data]` sections and rejects anything else.
pub fn parse_spec(mut c: Config, file: &str) -> Result<(DgpSpec, DataCounts), CliError> {
    let dgp = DgpConfig::from_config(&mut c)?;
    let counts = DataCounts::from_config(&mut c)?;
    c.finish().map_err(|source| CliError::Config {
        file: file.to_string(),
        source,
    })?;
    Ok((DgpSpec::build(dgp)?, counts))
}

/// A directory written by `scar gen`.
pub struct DataDir {
    pub spec: DgpSpec,
    pub counts: DataCounts,
    pub ds: Dataset,
}

impl DataDir {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let spec_path = dir.join(SPEC_FILE);
        let (spec, counts) = parse_spec(parse_config(&spec_path)?, &spec_path.display().to_string())?;
        let data_path = dir.join(DATASET_FILE);
        if !data_path.exists() {
            return Err(CliError::Missing(data_path.display().to_string()));
        }
        let ds = Dataset::load(&data_path)?;
        if ds.spec_hash != spec.hash() {
            return Err(CliError::Usage(format!(
                "{} was generated from a different spec than {}",
                data_path.display(),
                spec_path.display()
            )));
        }
        Ok(DataDir { spec, counts, ds })
    }

    /// Model dimensions tied to the data.
    pub fn model_base(&self) -> ModelConfig {
        let c = &self.spec.cfg;
        ModelConfig {
            d_v: c.d_x,
            d_a: c.d_a,
            n_embodiments: self.spec.n_embodiments(),
            t: c.t,
            ..ModelConfig::default()
        }
    }
}

pub fn cond_source(v: Variant) -> CondSource {
    if v.raw_actions() {
        CondSource::RawAction
    } else {
        CondSource::Latent
    }
}

/// A trained variant: checkpoint plus the config echo written next to it.
pub struct Method {
    pub variant: Variant,
    pub path: PathBuf,
    pub model: ScarModel,
    pub store: ParamStore,
}

impl Method {
    pub fn name(&self) -> &'static str {
        self.variant.name()
    }

    /// Loads `<stem>.ckpt` using the model keys of `<stem>.cfg`.
    pub fn load(ckpt: &Path, data: &DataDir) -> Result<Self, CliError> {
        let echo = ckpt.with_extension("cfg");
        let mut c = parse_config(&echo)?;
        let name = c.str_or("train.variant", "");
        let variant = Variant::parse(&name).ok_or_else(|| CliError::Usage(format!("{}: unknown variant `{name}`", echo.display())))?;
        let mc = ModelConfig::from_config(&mut c, data.model_base())?;
        if !ckpt.exists() {
            return Err(CliError::Missing(ckpt.display().to_string()));
        }
        let bytes = fs::read(ckpt).map_err(io_err(ckpt))?;
        let (model, store) = ScarModel::load(&mc, cond_source(variant), &bytes)?;
        Ok(Method {
            variant,
            path: ckpt.to_path_buf(),
            model,
            store,
        })
    }

    /// Every `<stem>.ckpt` in `dir` that has a config echo, in variant order.
    pub fn load_dir(dir: &Path, data: &DataDir) -> Result<Vec<Self>, CliError> {
        if !dir.is_dir() {
            return Err(CliError::Missing(dir.display().to_string()));
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).map_err(io_err(dir))? {
            let p = entry.map_err(io_err(dir))?.path();
            if p.extension().is_some_and(|e| e == "ckpt") && p.with_extension("cfg").exists() {
                out.push(Method::load(&p, data)?);
            }
        }
        if out.is_empty() {
            return Err(CliError::Missing(format!("no trained checkpoints in {}", dir.display())));
        }
        out.sort_by_key(|m| Variant::ALL.iter().position(|v| *v == m.variant));
        Ok(out)
    }
}

pub fn load_params(path: &Path) -> Result<ParamStore, CliError> {
    if !path.exists() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    Ok(load_store(path)?)
}
