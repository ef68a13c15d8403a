//! Emit images and traces from a checkpoint. Sample i uses seed + i, so a
//! fixed seed reproduces the whole batch bit-exactly.

use std::path::PathBuf;

use pyrpix_core::data::netpbm;
use pyrpix_core::network::{Conditioning, Model};
use pyrpix_core::sampler::{
    flat_sample, independent_sample, sample_pyramid, superresolve, SampleOpts,
};
use pyrpix_core::{Error, Result};

use crate::commands::load_run;

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    pub count: usize,
    pub seed: u64,
    pub temperature: f64,
    pub argmax: bool,
    pub from_lowres: Option<PathBuf>,
    pub pyramid: bool,
    pub class_id: Option<usize>,
}

pub fn cmd_sample(args: &SampleArgs) -> Result<Vec<PathBuf>> {
    let run = load_run(&args.checkpoint)?;
    let levels = run.cfg.model.levels;
    let opts = SampleOpts {
        temperature: args.temperature,
        argmax: args.argmax,
    };
    let cond = match args.class_id {
        Some(id) => Conditioning::class(id),
        None => {
            if run.cfg.model.num_classes > 0 {
                return Err(Error::Config(
                    "model is class-conditional; pass --class <id>".into(),
                ));
            }
            Conditioning::none()
        }
    };
    let lowres = match &args.from_lowres {
        Some(path) => Some(netpbm::read_image(path, Some(levels))?),
        None => None,
    };
    if args.pyramid && !matches!(run.model, Model::Multiscale(_)) {
        return Err(Error::Config(
            "--pyramid needs a multiscale checkpoint".into(),
        ));
    }
    if lowres.is_some() && !matches!(run.model, Model::Multiscale(_)) {
        return Err(Error::Config(
            "--from-lowres needs a multiscale checkpoint".into(),
        ));
    }

    std::fs::create_dir_all(&args.out_dir)?;
    let ext = if run.cfg.model.channels == 3 {
        "ppm"
    } else {
        "pgm"
    };
    let mut written = Vec::new();
    for i in 0..args.count {
        let seed = args.seed + i as u64;
        let stem = format!("sample_{i:04}");
        let (final_image, trace, levels_stack) = match (&run.model, &lowres) {
            (Model::Multiscale(m), Some(low)) => {
                let (img, trace) = superresolve(m, low, &cond, seed, &opts)?;
                (img, trace, None)
            }
            (Model::Multiscale(m), None) => {
                let (stack, trace) = sample_pyramid(m, &cond, seed, &opts)?;
                let img = stack.last().expect("nonempty").clone();
                (img, trace, args.pyramid.then_some(stack))
            }
            (Model::Flat(m), None) => {
                let (img, trace) = flat_sample(m, &cond, seed, &opts)?;
                (img, trace, None)
            }
            (Model::Independent(m), None) => {
                let (img, trace) = independent_sample(m, seed, &opts)?;
                (img, trace, None)
            }
            _ => unreachable!("lowres restricted to multiscale above"),
        };
        let img_path = args.out_dir.join(format!("{stem}.{ext}"));
        netpbm::write_image(&img_path, &final_image, levels)?;
        std::fs::write(
            args.out_dir.join(format!("{stem}.trace.txt")),
            trace.to_text(),
        )?;
        if let Some(stack) = levels_stack {
            for (s, level) in stack.iter().enumerate() {
                let p = args.out_dir.join(format!(
                    "{stem}.pyr{s}.{}x{}.{ext}",
                    level.height, level.width
                ));
                netpbm::write_image(&p, level, levels)?;
                written.push(p);
            }
        }
        written.push(img_path);
    }
    Ok(written)
}
