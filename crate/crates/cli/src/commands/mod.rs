pub mod bench;
pub mod eval;
pub mod sample;
pub mod train;
pub mod verify;

use std::collections::BTreeMap;
use std::path::Path;

use pyrpix_core::checkpoint::{self, Checkpoint};
use pyrpix_core::network::Model;
use pyrpix_core::tensor::{RmsPropState, Tensor};
use pyrpix_core::{Error, Result};

use crate::config::{self, RunConfig};

const OPT_PREFIX: &str = "opt.acc/";

/// A checkpoint unpacked into its run config, model, and optimizer state.
pub struct LoadedRun {
    pub cfg: RunConfig,
    pub model: Model,
    pub step: u64,
    pub opt: RmsPropState,
}

pub fn load_run(path: &Path) -> Result<LoadedRun> {
    let ck = checkpoint::load(path)?;
    let cfg = config::parse(&ck.config_text)
        .map_err(|e| Error::Checkpoint(format!("config echo does not parse: {e}")))?;
    let mut model = cfg.build_model(0)?;
    let mut opt = RmsPropState::new();
    let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, t) in ck.params {
        match name.strip_prefix(OPT_PREFIX) {
            Some(pname) => {
                opt.acc.insert(pname.to_string(), t);
            }
            None => {
                loaded.insert(name, t);
            }
        }
    }
    let want: Vec<&String> = model.params().keys().collect();
    for name in &want {
        let got = loaded
            .get(*name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        if got.shape() != model.params()[*name].shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, model wants {:?}",
                got.shape(),
                model.params()[*name].shape()
            )));
        }
    }
    if loaded.len() != want.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model wants {}",
            loaded.len(),
            want.len()
        )));
    }
    *model.params_mut() = loaded;
    Ok(LoadedRun {
        cfg,
        model,
        step: ck.step,
        opt,
    })
}

pub fn save_run(
    path: &Path,
    cfg: &RunConfig,
    model: &Model,
    step: u64,
    opt: &RmsPropState,
) -> Result<()> {
    let mut params = model.params().clone();
    for (name, t) in &opt.acc {
        params.insert(format!("{OPT_PREFIX}{name}"), t.clone());
    }
    checkpoint::save(
        path,
        &Checkpoint {
            step,
            config_text: config::serialize(cfg),
            params,
        },
    )
}
