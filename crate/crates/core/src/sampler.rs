//! Group-sequential, within-group-parallel ancestral sampling, with an
//! evaluation counter substantiating the O(log N) claim.
//!
//! Randomness is counter-based: the draw for a (group, pixel, channel) is a
//! pure function of the seed and those coordinates, so batching or write
//! order can never perturb an image. Trace log-probs use the same
//! arithmetic path as the likelihood module, so a sampled image's trace
//! sum equals its teacher-forced joint NLL exactly.

#![allow(clippy::needless_range_loop)] // coordinate loops index several parallel structures

use std::time::Instant;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::likelihood::{logits_row, nll_of_row};
use crate::network::forward::{
    assemble_context, base_logits_node, corner_patches, flat_logits_node, normalized_batch,
    resolve_cond, shallow_logits_node, upscaler_context_node, BatchCond, CtxItem,
};
use crate::network::{Conditioning, FlatModel, MultiscaleModel, UpscalerKind};
use crate::pyramid::{merge, Corner, GroupId};
use crate::rng;
use crate::tensor::Graph;

#[derive(Debug, Clone, Copy)]
pub struct SampleOpts {
    /// Logits are divided by this before the softmax draw.
    pub temperature: f64,
    /// Zero-temperature limit: pick the argmax level (ties to the lowest).
    pub argmax: bool,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts {
            temperature: 1.0,
            argmax: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub group: GroupId,
    pub channel: usize,
    pub eval_count_delta: usize,
    /// Log-probability of the drawn values under the (untempered) model.
    pub group_log_prob_nats: f64,
}

/// Record of one sampling run. `sequential_steps` counts full network
/// forward passes that gate later pixels (base evals plus upscaler/encoder
/// evals); type-B shallow passes are tallied separately because they are
/// very small evaluations.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub seed: u64,
    pub temperature: f64,
    pub argmax: bool,
    pub steps: Vec<TraceStep>,
    pub sequential_steps: usize,
    pub encoder_evals: usize,
    pub shallow_evals: usize,
    pub elapsed_seconds: f64,
}

impl SampleTrace {
    fn new(seed: u64, opts: &SampleOpts) -> Self {
        SampleTrace {
            seed,
            temperature: opts.temperature,
            argmax: opts.argmax,
            steps: Vec::new(),
            sequential_steps: 0,
            encoder_evals: 0,
            shallow_evals: 0,
            elapsed_seconds: 0.0,
        }
    }

    pub fn total_log_prob_nats(&self) -> f64 {
        self.steps.iter().map(|s| s.group_log_prob_nats).sum()
    }

    /// Line-oriented text form, written next to emitted images.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("temperature={}\n", self.temperature));
        out.push_str(&format!("argmax={}\n", self.argmax));
        out.push_str(&format!("sequential_steps={}\n", self.sequential_steps));
        out.push_str(&format!("encoder_evals={}\n", self.encoder_evals));
        out.push_str(&format!("shallow_evals={}\n", self.shallow_evals));
        out.push_str(&format!(
            "total_log_prob_nats={}\n",
            self.total_log_prob_nats()
        ));
        out.push_str(&format!("elapsed_seconds={}\n", self.elapsed_seconds));
        for s in &self.steps {
            out.push_str(&format!(
                "step group={} channel={} evals={} log_prob_nats={}\n",
                s.group, s.channel, s.eval_count_delta, s.group_log_prob_nats
            ));
        }
        out
    }
}

fn check_opts(opts: &SampleOpts) -> Result<()> {
    if opts.temperature.is_nan() || opts.temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    Ok(())
}

/// One categorical draw. Returns the level and its untempered model
/// log-probability (the trace invariant holds at any temperature).
fn draw(
    row: &[f64],
    seed: u64,
    words: &[u64],
    opts: &SampleOpts,
    group: GroupId,
) -> Result<(u16, f64)> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "sampler logits".into(),
            detail: format!("group {group}"),
        });
    }
    let idx = if opts.argmax {
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    } else {
        let scaled: Vec<f64> = row.iter().map(|v| v / opts.temperature).collect();
        let lse = crate::tensor::log_sum_exp_row(&scaled);
        let probs: Vec<f64> = scaled.iter().map(|v| (v - lse).exp()).collect();
        let u = rng::stream_unit(seed, words);
        rng::categorical(&probs, u)
    };
    Ok((idx as u16, -nll_of_row(row, idx)))
}

fn sample_base(
    model: &MultiscaleModel,
    bc: &BatchCond,
    seed: u64,
    opts: &SampleOpts,
    trace: &mut SampleTrace,
) -> Result<Image> {
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let (h0, w0) = (cfg.base_h, cfg.base_w);
    let mut img = Image::zeros(c, h0, w0);
    let mut chan_lp = vec![0.0; c];
    for r in 0..h0 {
        for col in 0..w0 {
            for ch in 0..c {
                let mut g = Graph::new();
                let input = normalized_batch(&[&img], k)?;
                let input = g.leaf(input, false);
                let node = base_logits_node(&mut g, model, input, bc)?;
                trace.sequential_steps += 1;
                let row = logits_row(g.value(node), 0, ch, k, r, col);
                let (level, lp) = draw(
                    &row,
                    seed,
                    &[0, r as u64, col as u64, ch as u64],
                    opts,
                    GroupId::Base,
                )?;
                img.set(ch, r, col, level);
                chan_lp[ch] += lp;
            }
        }
    }
    for (ch, lp) in chan_lp.into_iter().enumerate() {
        trace.steps.push(TraceStep {
            group: GroupId::Base,
            channel: ch,
            eval_count_delta: h0 * w0,
            group_log_prob_nats: lp,
        });
    }
    Ok(img)
}

/// Sample corners UR, LL, LR of one scale given the previous image, and
/// merge into the scale image.
fn sample_scale(
    model: &MultiscaleModel,
    prev: &Image,
    scale: usize,
    bc: &BatchCond,
    seed: u64,
    opts: &SampleOpts,
    trace: &mut SampleTrace,
) -> Result<Image> {
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let (gh, gw) = model.schedule.corner_dims(scale);
    let mut done: Vec<Image> = Vec::new();
    for corner in Corner::GENERATED {
        let group = GroupId::Corner { scale, corner };
        let step_word = model.schedule.step_index(group) as u64;
        let mut target = Image::zeros(c, gh, gw);
        let (ur, ll) = (done.first(), done.get(1));
        match cfg.upscaler.kind {
            UpscalerKind::TypeA => {
                for ch in 0..c {
                    let item = CtxItem {
                        ul: prev,
                        ur,
                        ll,
                        target: Some(&target),
                    };
                    let ctx = assemble_context(&[item], k, ch, true)?;
                    let mut g = Graph::new();
                    let ctx = g.leaf(ctx, false);
                    let node = upscaler_context_node(&mut g, model, scale, corner, ctx, ch, bc)?;
                    trace.sequential_steps += 1;
                    trace.encoder_evals += 1;
                    let logits = g.value(node).clone();
                    let mut lp = 0.0;
                    for r in 0..gh {
                        for col in 0..gw {
                            let row = logits_row(&logits, 0, 0, k, r, col);
                            let (level, l) = draw(
                                &row,
                                seed,
                                &[step_word, r as u64, col as u64, ch as u64],
                                opts,
                                group,
                            )?;
                            target.set(ch, r, col, level);
                            lp += l;
                        }
                    }
                    trace.steps.push(TraceStep {
                        group,
                        channel: ch,
                        eval_count_delta: 1,
                        group_log_prob_nats: lp,
                    });
                }
            }
            UpscalerKind::TypeB => {
                let m = cfg.upscaler.patch;
                let item = CtxItem {
                    ul: prev,
                    ur,
                    ll,
                    target: None,
                };
                let ctx = assemble_context(&[item], k, 0, false)?;
                // One graph per corner: the encoder runs once, every shallow
                // pass reuses its features node.
                let mut g = Graph::new();
                let ctx = g.leaf(ctx, false);
                let feats = upscaler_context_node(&mut g, model, scale, corner, ctx, 0, bc)?;
                trace.sequential_steps += 1;
                trace.encoder_evals += 1;
                let mut chan_lp = vec![0.0; c];
                let (ph, pw) = (gh / m, gw / m);
                for rr in 0..m {
                    for cc in 0..m {
                        for ch in 0..c {
                            let pix = corner_patches(&[&target], m, k)?;
                            let pix = g.leaf(pix, false);
                            let node =
                                shallow_logits_node(&mut g, model, scale, corner, feats, pix, bc)?;
                            trace.shallow_evals += 1;
                            let logits = g.value(node);
                            for pr in 0..ph {
                                for pc in 0..pw {
                                    let p = pr * pw + pc;
                                    let (r, col) = (pr * m + rr, pc * m + cc);
                                    let row = logits_row(logits, p, ch, k, rr, cc);
                                    let (level, l) = draw(
                                        &row,
                                        seed,
                                        &[step_word, r as u64, col as u64, ch as u64],
                                        opts,
                                        group,
                                    )?;
                                    target.set(ch, r, col, level);
                                    chan_lp[ch] += l;
                                }
                            }
                        }
                    }
                }
                for (ch, lp) in chan_lp.into_iter().enumerate() {
                    trace.steps.push(TraceStep {
                        group,
                        channel: ch,
                        eval_count_delta: m * m,
                        group_log_prob_nats: lp,
                    });
                }
            }
        }
        done.push(target);
    }
    let (ur, ll, lr) = (&done[0], &done[1], &done[2]);
    merge(&[
        (Corner::Ul, prev),
        (Corner::Ur, ur),
        (Corner::Ll, ll),
        (Corner::Lr, lr),
    ])
}

#[allow(clippy::too_many_arguments)]
fn run_scales(
    model: &MultiscaleModel,
    start: Image,
    start_scale: usize,
    bc: &BatchCond,
    seed: u64,
    opts: &SampleOpts,
    trace: &mut SampleTrace,
    pyramid: &mut Vec<Image>,
) -> Result<Image> {
    let mut current = start;
    pyramid.push(current.clone());
    for scale in start_scale + 1..=model.schedule.scales {
        current = sample_scale(model, &current, scale, bc, seed, opts, trace)?;
        pyramid.push(current.clone());
    }
    Ok(current)
}

/// Ancestral sample of a full image: base pixels sequentially, then each
/// corner group with one evaluation per channel (type-A) or one encoder
/// plus M^2 shallow evaluations per channel (type-B).
pub fn sample(
    model: &MultiscaleModel,
    cond: &Conditioning,
    seed: u64,
    opts: &SampleOpts,
) -> Result<(Image, SampleTrace)> {
    let (levels, trace) = sample_pyramid(model, cond, seed, opts)?;
    Ok((levels.into_iter().last().expect("at least the base"), trace))
}

/// Like [`sample`] but also returns every intermediate pyramid image
/// (scales + 1 of them, base through target).
pub fn sample_pyramid(
    model: &MultiscaleModel,
    cond: &Conditioning,
    seed: u64,
    opts: &SampleOpts,
) -> Result<(Vec<Image>, SampleTrace)> {
    check_opts(opts)?;
    let started = Instant::now();
    let bc = resolve_cond(&model.cfg, &[cond])?;
    let mut trace = SampleTrace::new(seed, opts);
    let base = sample_base(model, &bc, seed, opts, &mut trace)?;
    let mut pyramid = Vec::with_capacity(model.schedule.scales + 1);
    run_scales(model, base, 0, &bc, seed, opts, &mut trace, &mut pyramid)?;
    trace.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok((pyramid, trace))
}

/// Upscale a given low-resolution image: runs only the scale steps above
/// it; group-1 pixels at the next scale are the given image, bit-exact.
pub fn superresolve(
    model: &MultiscaleModel,
    low_res: &Image,
    cond: &Conditioning,
    seed: u64,
    opts: &SampleOpts,
) -> Result<(Image, SampleTrace)> {
    check_opts(opts)?;
    let started = Instant::now();
    let cfg = &model.cfg;
    if low_res.channels != cfg.channels() {
        return Err(Error::geometry("channel count does not match model"));
    }
    let scale = (0..=model.schedule.scales)
        .find(|&s| model.schedule.dims_at(s) == (low_res.height, low_res.width))
        .ok_or_else(|| {
            Error::geometry(format!(
                "input {}x{} matches no scale of the schedule",
                low_res.height, low_res.width
            ))
        })?;
    crate::likelihood::check_levels(cfg.levels(), low_res)?;
    let bc = resolve_cond(cfg, &[cond])?;
    let mut trace = SampleTrace::new(seed, opts);
    let mut pyramid = Vec::new();
    let out = run_scales(
        model,
        low_res.clone(),
        scale,
        &bc,
        seed,
        opts,
        &mut trace,
        &mut pyramid,
    )?;
    trace.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok((out, trace))
}

/// Baseline O(N) sampler: raster order, one full network evaluation per
/// (pixel, channel). Exists as the speed/likelihood comparison arm.
pub fn flat_sample(
    model: &FlatModel,
    _cond: &Conditioning,
    seed: u64,
    opts: &SampleOpts,
) -> Result<(Image, SampleTrace)> {
    check_opts(opts)?;
    let started = Instant::now();
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let (h, w) = (cfg.target_h, cfg.target_w);
    let mut trace = SampleTrace::new(seed, opts);
    let mut img = Image::zeros(c, h, w);
    let mut chan_lp = vec![0.0; c];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let mut g = Graph::new();
                let input = normalized_batch(&[&img], k)?;
                let input = g.leaf(input, false);
                let node = flat_logits_node(&mut g, model, input)?;
                trace.sequential_steps += 1;
                let row = logits_row(g.value(node), 0, ch, k, r, col);
                let (level, lp) = draw(
                    &row,
                    seed,
                    &[0, r as u64, col as u64, ch as u64],
                    opts,
                    GroupId::Base,
                )?;
                img.set(ch, r, col, level);
                chan_lp[ch] += lp;
            }
        }
    }
    for (ch, lp) in chan_lp.into_iter().enumerate() {
        trace.steps.push(TraceStep {
            group: GroupId::Base,
            channel: ch,
            eval_count_delta: h * w,
            group_log_prob_nats: lp,
        });
    }
    trace.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok((img, trace))
}

/// Sampler for the factorized-independent baseline: every subpixel is an
/// independent categorical draw from the per-position table.
pub fn independent_sample(
    model: &crate::network::IndependentModel,
    seed: u64,
    opts: &SampleOpts,
) -> Result<(Image, SampleTrace)> {
    check_opts(opts)?;
    let started = Instant::now();
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let (h, w) = (cfg.target_h, cfg.target_w);
    let mut g = Graph::new();
    let node = crate::network::forward::independent_logits_node(&mut g, model)?;
    let logits = g.value(node).clone();
    let mut trace = SampleTrace::new(seed, opts);
    trace.sequential_steps = 1;
    let mut img = Image::zeros(c, h, w);
    let mut chan_lp = vec![0.0; c];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let row = logits_row(&logits, 0, ch, k, r, col);
                let (level, lp) = draw(
                    &row,
                    seed,
                    &[0, r as u64, col as u64, ch as u64],
                    opts,
                    GroupId::Base,
                )?;
                img.set(ch, r, col, level);
                chan_lp[ch] += lp;
            }
        }
    }
    for (ch, lp) in chan_lp.into_iter().enumerate() {
        trace.steps.push(TraceStep {
            group: GroupId::Base,
            channel: ch,
            eval_count_delta: if ch == 0 { 1 } else { 0 },
            group_log_prob_nats: lp,
        });
    }
    trace.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok((img, trace))
}

/// Expected sequential step count for a multiscale model: base pixels times
/// channels, plus (type-A) one eval per corner per channel or (type-B) one
/// encoder eval per corner, per scale.
pub fn expected_sequential_steps(model: &MultiscaleModel) -> usize {
    let cfg = &model.cfg;
    let base = cfg.base_h * cfg.base_w * cfg.channels();
    let per_scale = match cfg.upscaler.kind {
        UpscalerKind::TypeA => 3 * cfg.channels(),
        UpscalerKind::TypeB => 3,
    };
    base + model.schedule.scales * per_scale
}

#[cfg(test)]
mod tests;
