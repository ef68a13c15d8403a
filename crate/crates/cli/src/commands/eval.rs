//! Streaming mean NLL over a dataset split, printed as key=value lines in
//! both nats and bits per sub-pixel.

use std::path::Path;

use pyrpix_core::data::Split;
use pyrpix_core::likelihood::dataset_nll;
use pyrpix_core::{Error, Result};

use crate::commands::load_run;
use crate::config;

pub fn cmd_eval(checkpoint: &Path, split: Split, config_override: Option<&Path>) -> Result<String> {
    let run = load_run(checkpoint)?;
    let cfg = match config_override {
        None => run.cfg,
        Some(path) => config::parse(&std::fs::read_to_string(path)?)?,
    };
    let dataset = cfg.dataset()?;
    if dataset.is_empty(split) {
        return Err(Error::EmptyDataset);
    }
    let report = dataset_nll(&run.model, dataset.iter(split))?;
    let mut out = format!("split={}\ncount={}\n", split.name(), dataset.len(split));
    out.push_str(&report.to_text());
    Ok(out)
}
