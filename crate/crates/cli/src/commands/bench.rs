//! Sampling speed: multiscale vs the flat baseline at matched resolution
//! and width. Step counts are exact; wall-clock is the median over
//! repetitions.

use std::path::Path;
use std::time::Instant;

use pyrpix_core::network::{Conditioning, Model};
use pyrpix_core::sampler::{expected_sequential_steps, flat_sample, sample, SampleOpts};
use pyrpix_core::{Error, Result};

use crate::commands::load_run;

pub struct BenchOutcome {
    pub multiscale_steps: usize,
    pub flat_steps: usize,
    pub multiscale_median_s: f64,
    pub flat_median_s: f64,
    pub speedup: f64,
    pub table: String,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    xs[xs.len() / 2]
}

pub fn cmd_bench(multiscale: &Path, flat: &Path, reps: usize, seed: u64) -> Result<BenchOutcome> {
    if reps == 0 {
        return Err(Error::Config("repetitions must be at least 1".into()));
    }
    if reps == 1 {
        eprintln!("warning: repetitions=1, the reported median is a single observation");
    }
    let ms_run = load_run(multiscale)?;
    let flat_run = load_run(flat)?;
    let Model::Multiscale(ms) = &ms_run.model else {
        return Err(Error::Config(
            "--multiscale checkpoint is not multiscale".into(),
        ));
    };
    let Model::Flat(fl) = &flat_run.model else {
        return Err(Error::Config(
            "--flat checkpoint is not a flat model".into(),
        ));
    };
    let (mc, fc) = (&ms.cfg, &fl.cfg);
    if (mc.target_h, mc.target_w, mc.channels(), mc.levels())
        != (fc.target_h, fc.target_w, fc.channels(), fc.levels())
    {
        return Err(Error::Config(
            "checkpoints disagree on target resolution/channels/levels".into(),
        ));
    }
    if mc.upscaler.hidden != fc.pixelcnn.hidden {
        return Err(Error::Config(format!(
            "width mismatch: multiscale hidden {} vs flat hidden {}",
            mc.upscaler.hidden, fc.pixelcnn.hidden
        )));
    }

    let cond = Conditioning::none();
    let opts = SampleOpts::default();
    let mut ms_times = Vec::with_capacity(reps);
    let mut ms_steps = 0usize;
    for r in 0..reps {
        let t = Instant::now();
        let (_, trace) = sample(ms, &cond, seed + r as u64, &opts)?;
        ms_times.push(t.elapsed().as_secs_f64());
        ms_steps = trace.sequential_steps;
    }
    let mut flat_times = Vec::with_capacity(reps);
    let mut flat_steps = 0usize;
    for r in 0..reps {
        let t = Instant::now();
        let (_, trace) = flat_sample(fl, &cond, seed + r as u64, &opts)?;
        flat_times.push(t.elapsed().as_secs_f64());
        flat_steps = trace.sequential_steps;
    }
    debug_assert_eq!(ms_steps, expected_sequential_steps(ms));

    let ms_median = median(ms_times);
    let flat_median = median(flat_times);
    let speedup = flat_median / ms_median;
    let mut table = String::new();
    table.push_str(&format!(
        "{:<12} {:>16} {:>16}\n",
        "arm", "sequential_steps", "seconds_median"
    ));
    table.push_str(&format!(
        "{:<12} {:>16} {:>16.6}\n",
        "multiscale", ms_steps, ms_median
    ));
    table.push_str(&format!(
        "{:<12} {:>16} {:>16.6}\n",
        "flat", flat_steps, flat_median
    ));
    table.push_str(&format!("speedup={speedup:.2}x (reps={reps})\n"));
    Ok(BenchOutcome {
        multiscale_steps: ms_steps,
        flat_steps,
        multiscale_median_s: ms_median,
        flat_median_s: flat_median,
        speedup,
        table,
    })
}
