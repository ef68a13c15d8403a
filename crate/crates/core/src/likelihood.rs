//! Exact joint log-likelihood under the pixel-group factorization, plus the
//! unit conversions used for reporting.
//!
//! Everything is accumulated in f64 nats; bits appear only at reporting.
//! The teacher-forced evaluator here is the single arithmetic path for
//! likelihoods: the sampler and the enumeration oracle reuse it (the oracle
//! through a pass memo keyed on exact integer inputs, so cached logits are
//! bit-identical to uncached ones).

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::forward::{
    assemble_context, base_logits_node, corner_patches, flat_logits_node, independent_logits_node,
    normalized_batch, resolve_cond, shallow_logits_node, upscaler_context_node, CtxItem,
};
use crate::network::{Conditioning, Model, MultiscaleModel, UpscalerKind};
use crate::pyramid::{Corner, GroupId};
use crate::tensor::{Graph, Tensor};

/// Negative log-likelihood of one image (or a dataset mean), with the
/// per-group breakdown.
#[derive(Debug, Clone)]
pub struct NllReport {
    pub total_nats: f64,
    pub per_group: Vec<(GroupId, f64)>,
    pub nats_per_subpixel: f64,
    pub bits_per_subpixel: f64,
    pub subpixel_count: usize,
}

impl NllReport {
    fn from_groups(per_group: Vec<(GroupId, f64)>, subpixel_count: usize) -> NllReport {
        let total_nats: f64 = per_group.iter().map(|(_, n)| n).sum();
        let nats_per_subpixel = total_nats / subpixel_count as f64;
        NllReport {
            total_nats,
            nats_per_subpixel,
            bits_per_subpixel: nats_per_subpixel / std::f64::consts::LN_2,
            per_group,
            subpixel_count,
        }
    }

    /// Line-oriented key=value serialization for the CLI.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("total_nats={}\n", self.total_nats));
        out.push_str(&format!("subpixel_count={}\n", self.subpixel_count));
        out.push_str(&format!("nats_per_subpixel={}\n", self.nats_per_subpixel));
        out.push_str(&format!("bits_per_subpixel={}\n", self.bits_per_subpixel));
        for (g, n) in &self.per_group {
            out.push_str(&format!("group.{g}={n}\n"));
        }
        out
    }
}

/// NLL of one prediction row in nats, shared by every consumer so traces,
/// reports, and the oracle agree bit-for-bit.
pub(crate) fn nll_of_row(row: &[f64], target: usize) -> f64 {
    crate::tensor::log_sum_exp_row(row) - row[target]
}

/// K logit values for prediction (b, group_ch, r, c) of a [B, G*K, h, w]
/// conv output.
pub(crate) fn logits_row(
    v: &Tensor,
    b: usize,
    group_ch: usize,
    levels: usize,
    r: usize,
    c: usize,
) -> Vec<f64> {
    (0..levels)
        .map(|k| v.at4(b, group_ch * levels + k, r, c))
        .collect()
}

pub(crate) fn check_levels(model_levels: usize, img: &Image) -> Result<()> {
    if let Some(&bad) = img.data().iter().find(|&&v| v as usize >= model_levels) {
        return Err(Error::Index(format!(
            "image intensity {bad} out of range [0, {model_levels})"
        )));
    }
    Ok(())
}

/// Memo of teacher-forced network passes keyed on their exact integer
/// inputs. Valid for one (model, conditioning) pair; enumeration over a
/// tiny image space revisits the same contexts constantly.
#[derive(Default)]
pub struct PassMemo {
    map: HashMap<Vec<u16>, Arc<Tensor>>,
}

impl PassMemo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

const KEY_SEP: u16 = u16::MAX;

fn key_push_img(key: &mut Vec<u16>, img: Option<&Image>) {
    match img {
        Some(i) => key.extend_from_slice(i.data()),
        None => key.push(KEY_SEP - 1),
    }
    key.push(KEY_SEP);
}

/// Logits of one teacher-forced network pass.
#[derive(Debug, Clone)]
pub(crate) enum PassLogits {
    /// [1, C*K, h0, w0]
    Base(Arc<Tensor>),
    /// [1, K, h, w] for one (corner, channel)
    CornerA {
        scale: usize,
        corner: Corner,
        chan: usize,
        logits: Arc<Tensor>,
    },
    /// [P, C*K, M, M], patch-major
    CornerB {
        scale: usize,
        corner: Corner,
        logits: Arc<Tensor>,
    },
}

/// Run every teacher-forced pass of the factorization on one image; the
/// single evaluation path shared by likelihood, probes, and enumeration.
pub(crate) fn teacher_forced_passes(
    model: &MultiscaleModel,
    image: &Image,
    cond: &Conditioning,
    mut memo: Option<&mut PassMemo>,
) -> Result<Vec<PassLogits>> {
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    check_levels(k, image)?;
    if (image.channels, image.height, image.width) != (c, cfg.target_h, cfg.target_w) {
        return Err(Error::dim(format!(
            "image {}x{}x{} does not match model target {}x{}x{}",
            image.channels, image.height, image.width, c, cfg.target_h, cfg.target_w
        )));
    }
    let bc = resolve_cond(cfg, &[cond])?;
    let pyramid = model.schedule.pyramid(image)?;
    let mut out = Vec::new();

    let base_img = &pyramid[0];
    let base_logits = run_or_memo(
        &mut memo,
        {
            let mut key = vec![0xB000];
            key_push_img(&mut key, Some(base_img));
            key
        },
        || {
            let mut g = Graph::new();
            let input = normalized_batch(&[base_img], k)?;
            let input = g.leaf(input, false);
            let node = base_logits_node(&mut g, model, input, &bc)?;
            Ok(Arc::new(g.value(node).clone()))
        },
    )?;
    out.push(PassLogits::Base(base_logits));

    for scale in 1..=model.schedule.scales {
        let prev = &pyramid[scale - 1];
        let scale_img = &pyramid[scale];
        let ur = crate::pyramid::split_corner(scale_img, Corner::Ur);
        let ll = crate::pyramid::split_corner(scale_img, Corner::Ll);
        let lr = crate::pyramid::split_corner(scale_img, Corner::Lr);
        for corner in Corner::GENERATED {
            let (target, known_ur, known_ll) = match corner {
                Corner::Ur => (&ur, None, None),
                Corner::Ll => (&ll, Some(&ur), None),
                Corner::Lr => (&lr, Some(&ur), Some(&ll)),
                Corner::Ul => unreachable!(),
            };
            match cfg.upscaler.kind {
                UpscalerKind::TypeA => {
                    for ch in 0..c {
                        let logits = run_or_memo(
                            &mut memo,
                            {
                                let mut key =
                                    vec![0xA000, scale as u16, corner_code(corner), ch as u16];
                                key_push_img(&mut key, Some(prev));
                                key_push_img(&mut key, known_ur);
                                key_push_img(&mut key, known_ll);
                                // Only the already-sampled channel prefix matters.
                                key.extend(
                                    target.data()[..ch * target.height * target.width].iter(),
                                );
                                key
                            },
                            || {
                                let item = CtxItem {
                                    ul: prev,
                                    ur: known_ur,
                                    ll: known_ll,
                                    target: Some(target),
                                };
                                let ctx = assemble_context(&[item], k, ch, true)?;
                                let mut g = Graph::new();
                                let ctx = g.leaf(ctx, false);
                                let node = upscaler_context_node(
                                    &mut g, model, scale, corner, ctx, ch, &bc,
                                )?;
                                Ok(Arc::new(g.value(node).clone()))
                            },
                        )?;
                        out.push(PassLogits::CornerA {
                            scale,
                            corner,
                            chan: ch,
                            logits,
                        });
                    }
                }
                UpscalerKind::TypeB => {
                    let m = cfg.upscaler.patch;
                    let logits = run_or_memo(
                        &mut memo,
                        {
                            let mut key = vec![0xC000, scale as u16, corner_code(corner)];
                            key_push_img(&mut key, Some(prev));
                            key_push_img(&mut key, known_ur);
                            key_push_img(&mut key, known_ll);
                            key_push_img(&mut key, Some(target));
                            key
                        },
                        || {
                            let item = CtxItem {
                                ul: prev,
                                ur: known_ur,
                                ll: known_ll,
                                target: None,
                            };
                            let ctx = assemble_context(&[item], k, 0, false)?;
                            let mut g = Graph::new();
                            let ctx = g.leaf(ctx, false);
                            let feats =
                                upscaler_context_node(&mut g, model, scale, corner, ctx, 0, &bc)?;
                            let pix = corner_patches(&[target], m, k)?;
                            let pix = g.leaf(pix, false);
                            let node =
                                shallow_logits_node(&mut g, model, scale, corner, feats, pix, &bc)?;
                            Ok(Arc::new(g.value(node).clone()))
                        },
                    )?;
                    out.push(PassLogits::CornerB {
                        scale,
                        corner,
                        logits,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Teacher-forced per-group NLL of one image under a multiscale model.
pub(crate) fn multiscale_group_nlls(
    model: &MultiscaleModel,
    image: &Image,
    cond: &Conditioning,
    memo: Option<&mut PassMemo>,
) -> Result<Vec<(GroupId, f64)>> {
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let passes = teacher_forced_passes(model, image, cond, memo)?;
    let pyramid = model.schedule.pyramid(image)?;
    let mut out: Vec<(GroupId, f64)> = Vec::new();
    for pass in passes {
        match pass {
            PassLogits::Base(logits) => {
                let base_img = &pyramid[0];
                let mut nats = 0.0;
                for r in 0..base_img.height {
                    for col in 0..base_img.width {
                        for ch in 0..c {
                            let row = logits_row(&logits, 0, ch, k, r, col);
                            nats += nll_of_row(&row, base_img.at(ch, r, col) as usize);
                        }
                    }
                }
                out.push((GroupId::Base, nats));
            }
            PassLogits::CornerA {
                scale,
                corner,
                chan,
                logits,
            } => {
                let target = crate::pyramid::split_corner(&pyramid[scale], corner);
                let mut nats = 0.0;
                for r in 0..target.height {
                    for col in 0..target.width {
                        let row = logits_row(&logits, 0, 0, k, r, col);
                        nats += nll_of_row(&row, target.at(chan, r, col) as usize);
                    }
                }
                let group = GroupId::Corner { scale, corner };
                match out.last_mut() {
                    Some((g, acc)) if *g == group => *acc += nats,
                    _ => out.push((group, nats)),
                }
            }
            PassLogits::CornerB {
                scale,
                corner,
                logits,
            } => {
                let target = crate::pyramid::split_corner(&pyramid[scale], corner);
                let m = cfg.upscaler.patch;
                let pw = target.width / m;
                let mut nats = 0.0;
                for pr in 0..target.height / m {
                    for pc in 0..pw {
                        let p = pr * pw + pc;
                        for ch in 0..c {
                            for rr in 0..m {
                                for cc in 0..m {
                                    let row = logits_row(&logits, p, ch, k, rr, cc);
                                    nats += nll_of_row(
                                        &row,
                                        target.at(ch, pr * m + rr, pc * m + cc) as usize,
                                    );
                                }
                            }
                        }
                    }
                }
                out.push((GroupId::Corner { scale, corner }, nats));
            }
        }
    }
    Ok(out)
}

fn corner_code(c: Corner) -> u16 {
    match c {
        Corner::Ul => 0,
        Corner::Ur => 1,
        Corner::Ll => 2,
        Corner::Lr => 3,
    }
}

fn run_or_memo(
    memo: &mut Option<&mut PassMemo>,
    key: Vec<u16>,
    run: impl FnOnce() -> Result<Arc<Tensor>>,
) -> Result<Arc<Tensor>> {
    match memo {
        None => run(),
        Some(m) => {
            if let Some(hit) = m.map.get(&key) {
                return Ok(hit.clone());
            }
            let v = run()?;
            m.map.insert(key, v.clone());
            Ok(v)
        }
    }
}

fn single_pass_nll(logits: &Tensor, image: &Image, levels: usize) -> f64 {
    let mut nats = 0.0;
    for ch in 0..image.channels {
        for r in 0..image.height {
            for c in 0..image.width {
                let row = logits_row(logits, 0, ch, levels, r, c);
                nats += nll_of_row(&row, image.at(ch, r, c) as usize);
            }
        }
    }
    nats
}

/// Graph-form teacher-forced loss over a batch: base group plus every
/// corner at every scale, summed into one scalar nats node so one backward
/// pass covers the whole factorization. `include_base` off restricts the
/// loss to the upscalers (used by the upscaler gradient check).
pub fn multiscale_loss_node(
    g: &mut Graph,
    model: &MultiscaleModel,
    images: &[&Image],
    conds: &[&Conditioning],
    include_base: bool,
) -> Result<crate::tensor::NodeId> {
    use crate::network::forward::{
        assemble_context, base_logits_node, corner_patches, normalized_batch, shallow_logits_node,
        upscaler_context_node, CtxItem,
    };
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let bc = resolve_cond(cfg, conds)?;
    let mut pyramids = Vec::with_capacity(images.len());
    for img in images {
        check_levels(k, img)?;
        pyramids.push(model.schedule.pyramid(img)?);
    }
    let mut terms: Vec<crate::tensor::NodeId> = Vec::new();

    if include_base {
        let bases: Vec<&Image> = pyramids.iter().map(|p| &p[0]).collect();
        let input = normalized_batch(&bases, k)?;
        let input = g.leaf(input, false);
        let logits = base_logits_node(g, model, input, &bc)?;
        let mut targets = Vec::with_capacity(images.len() * c * cfg.base_h * cfg.base_w);
        for img in &bases {
            targets.extend_from_slice(img.data());
        }
        let per = g.xent(logits, k, std::sync::Arc::new(targets))?;
        terms.push(g.sum(per));
    }

    for scale in 1..=model.schedule.scales {
        let split3: Vec<(Image, Image, Image)> = pyramids
            .iter()
            .map(|p| {
                let si = &p[scale];
                (
                    crate::pyramid::split_corner(si, Corner::Ur),
                    crate::pyramid::split_corner(si, Corner::Ll),
                    crate::pyramid::split_corner(si, Corner::Lr),
                )
            })
            .collect();
        for corner in Corner::GENERATED {
            let items: Vec<CtxItem> = pyramids
                .iter()
                .zip(&split3)
                .map(|(p, (ur, ll, lr))| {
                    let target = match corner {
                        Corner::Ur => ur,
                        Corner::Ll => ll,
                        Corner::Lr => lr,
                        Corner::Ul => unreachable!(),
                    };
                    CtxItem {
                        ul: &p[scale - 1],
                        ur: if corner != Corner::Ur { Some(ur) } else { None },
                        ll: if corner == Corner::Lr { Some(ll) } else { None },
                        target: Some(target),
                    }
                })
                .collect();
            let targets_of = |b: usize| -> &Image {
                let (ur, ll, lr) = &split3[b];
                match corner {
                    Corner::Ur => ur,
                    Corner::Ll => ll,
                    Corner::Lr => lr,
                    Corner::Ul => unreachable!(),
                }
            };
            match cfg.upscaler.kind {
                UpscalerKind::TypeA => {
                    for ch in 0..c {
                        let ctx = assemble_context(&items, k, ch, true)?;
                        let ctx = g.leaf(ctx, false);
                        let logits = upscaler_context_node(g, model, scale, corner, ctx, ch, &bc)?;
                        let (gh, gw) = model.schedule.corner_dims(scale);
                        let mut targets = Vec::with_capacity(images.len() * gh * gw);
                        for b in 0..images.len() {
                            let t = targets_of(b);
                            targets.extend_from_slice(&t.data()[ch * gh * gw..(ch + 1) * gh * gw]);
                        }
                        let per = g.xent(logits, k, std::sync::Arc::new(targets))?;
                        terms.push(g.sum(per));
                    }
                }
                UpscalerKind::TypeB => {
                    let m = cfg.upscaler.patch;
                    let ctx = assemble_context(&items, k, 0, false)?;
                    let ctx = g.leaf(ctx, false);
                    let feats = upscaler_context_node(g, model, scale, corner, ctx, 0, &bc)?;
                    let targets_imgs: Vec<&Image> = (0..images.len()).map(targets_of).collect();
                    let pix = corner_patches(&targets_imgs, m, k)?;
                    let pix = g.leaf(pix, false);
                    let logits = shallow_logits_node(g, model, scale, corner, feats, pix, &bc)?;
                    // Targets in the same [P, C, m, m] patch-major order.
                    let (gh, gw) = model.schedule.corner_dims(scale);
                    let (ph, pw) = (gh / m, gw / m);
                    let mut targets = Vec::with_capacity(images.len() * gh * gw * c);
                    for b in 0..images.len() {
                        let t = targets_of(b);
                        for pr in 0..ph {
                            for pc in 0..pw {
                                for ch in 0..c {
                                    for rr in 0..m {
                                        for cc in 0..m {
                                            targets.push(t.at(ch, pr * m + rr, pc * m + cc));
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let per = g.xent(logits, k, std::sync::Arc::new(targets))?;
                    terms.push(g.sum(per));
                }
            }
        }
    }

    let mut total = *terms
        .first()
        .ok_or_else(|| Error::dim("loss over zero groups"))?;
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(total)
}

/// Upscaler-only loss of one image; the gradient-check target.
pub fn upscaler_loss_node(
    g: &mut Graph,
    model: &MultiscaleModel,
    image: &Image,
) -> Result<crate::tensor::NodeId> {
    multiscale_loss_node(g, model, &[image], &[&Conditioning::none()], false)
}

/// Single-pass loss for the flat baseline.
pub fn flat_loss_node(
    g: &mut Graph,
    model: &crate::network::FlatModel,
    images: &[&Image],
) -> Result<crate::tensor::NodeId> {
    use crate::network::forward::{flat_logits_node, normalized_batch};
    let k = model.cfg.levels();
    for img in images {
        check_levels(k, img)?;
    }
    let input = normalized_batch(images, k)?;
    let input = g.leaf(input, false);
    let logits = flat_logits_node(g, model, input)?;
    let mut targets = Vec::new();
    for img in images {
        targets.extend_from_slice(img.data());
    }
    let per = g.xent(logits, k, std::sync::Arc::new(targets))?;
    Ok(g.sum(per))
}

/// Per-position table loss for the independent baseline; one xent node per
/// batch item against the shared table so gradients accumulate on it.
pub fn independent_loss_node(
    g: &mut Graph,
    model: &crate::network::IndependentModel,
    images: &[&Image],
) -> Result<crate::tensor::NodeId> {
    use crate::network::forward::independent_logits_node;
    let k = model.cfg.levels();
    let logits = independent_logits_node(g, model)?;
    let mut terms = Vec::new();
    for img in images {
        check_levels(k, img)?;
        let per = g.xent(logits, k, std::sync::Arc::new(img.data().to_vec()))?;
        terms.push(g.sum(per));
    }
    let mut total = *terms
        .first()
        .ok_or_else(|| Error::dim("loss over zero images"))?;
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(total)
}

/// Exact joint NLL of one image under any model arm.
pub fn joint_nll(model: &Model, image: &Image, cond: &Conditioning) -> Result<NllReport> {
    joint_nll_memo(model, image, cond, None)
}

pub(crate) fn joint_nll_memo(
    model: &Model,
    image: &Image,
    cond: &Conditioning,
    memo: Option<&mut PassMemo>,
) -> Result<NllReport> {
    let n = image.subpixels();
    match model {
        Model::Multiscale(m) => {
            let groups = multiscale_group_nlls(m, image, cond, memo)?;
            Ok(NllReport::from_groups(groups, n))
        }
        Model::Flat(m) => {
            let k = m.cfg.levels();
            check_levels(k, image)?;
            if (image.height, image.width) != (m.cfg.target_h, m.cfg.target_w) {
                return Err(Error::dim("image does not match flat model dims"));
            }
            let mut g = Graph::new();
            let input = normalized_batch(&[image], k)?;
            let input = g.leaf(input, false);
            let node = flat_logits_node(&mut g, m, input)?;
            let nats = single_pass_nll(g.value(node), image, k);
            Ok(NllReport::from_groups(vec![(GroupId::Base, nats)], n))
        }
        Model::Independent(m) => {
            let k = m.cfg.levels();
            check_levels(k, image)?;
            if (image.height, image.width) != (m.cfg.target_h, m.cfg.target_w) {
                return Err(Error::dim("image does not match model dims"));
            }
            let mut g = Graph::new();
            let node = independent_logits_node(&mut g, m)?;
            let nats = single_pass_nll(g.value(node), image, k);
            Ok(NllReport::from_groups(vec![(GroupId::Base, nats)], n))
        }
    }
}

/// Streaming arithmetic mean of per-image reports over a dataset.
/// Dimensions must be homogeneous; memory is constant in dataset size.
pub fn dataset_nll<I>(model: &Model, items: I) -> Result<NllReport>
where
    I: IntoIterator<Item = Result<(Image, Conditioning)>>,
{
    let mut count = 0usize;
    let mut per_group: Vec<(GroupId, f64)> = Vec::new();
    let mut subpixels = 0usize;
    for item in items {
        let (image, cond) = item?;
        let report = joint_nll(model, &image, &cond)?;
        if count == 0 {
            subpixels = report.subpixel_count;
            per_group = report.per_group.clone();
        } else {
            if report.subpixel_count != subpixels {
                return Err(Error::dim("dataset images must share dimensions"));
            }
            for (acc, cur) in per_group.iter_mut().zip(&report.per_group) {
                acc.1 += cur.1;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let inv = 1.0 / count as f64;
    for g in &mut per_group {
        g.1 *= inv;
    }
    Ok(NllReport::from_groups(per_group, subpixels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{
        init_independent, init_params, CondConfig, ModelConfig, PixelCnnConfig, UpscalerConfig,
        UpscalerKind,
    };
    use crate::rng;

    fn cfg(
        base: usize,
        target: usize,
        channels: usize,
        levels: usize,
        kind: UpscalerKind,
    ) -> ModelConfig {
        ModelConfig {
            base_h: base,
            base_w: base,
            target_h: target,
            target_w: target,
            pixelcnn: PixelCnnConfig {
                layers: 2,
                hidden: 6,
                kernel: 3,
                first_kernel: 3,
                levels,
                channels,
            },
            upscaler: UpscalerConfig {
                kind,
                resnet_layers: 1,
                hidden: 8,
                patch: 2,
                shallow_layers: 2,
                shallow_hidden: 6,
                levels,
                channels,
                separate_corner_weights: false,
            },
            cond: CondConfig::default(),
        }
    }

    fn rand_image(c: usize, h: usize, w: usize, levels: u16, seed: u64) -> Image {
        let mut img = Image::zeros(c, h, w);
        for i in 0..img.data().len() {
            img.data_mut()[i] = (rng::stream_u64(seed, &[i as u64]) % levels as u64) as u16;
        }
        img
    }

    #[test]
    fn uniform_model_hits_exact_log2_levels() {
        let c = cfg(2, 8, 1, 4, UpscalerKind::TypeA);
        let mut model = init_params(&c, 1).unwrap();
        for t in model.params.values_mut() {
            t.data_mut().fill(0.0);
        }
        let img = rand_image(1, 8, 8, 4, 2);
        let report = joint_nll(&Model::Multiscale(model), &img, &Conditioning::none()).unwrap();
        assert_eq!(report.subpixel_count, 64);
        assert_eq!(
            report.bits_per_subpixel, 2.0,
            "uniform K=4 is exactly 2 bits"
        );
        assert!((report.nats_per_subpixel - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn additivity_total_equals_group_sum() {
        let c = cfg(2, 4, 1, 2, UpscalerKind::TypeA);
        let model = Model::Multiscale(init_params(&c, 3).unwrap());
        let img = rand_image(1, 4, 4, 2, 4);
        let report = joint_nll(&model, &img, &Conditioning::none()).unwrap();
        let sum: f64 = report.per_group.iter().map(|(_, n)| n).sum();
        assert!((report.total_nats - sum).abs() < 1e-12);
        assert_eq!(report.per_group.len(), 4, "base + three corners");
    }

    #[test]
    fn tiny_space_normalizes_to_one() {
        // base 1x1, target 2x2, C=1, K=2: sum over all 16 images of
        // exp(-total_nats) must be 1 within 1e-9 for random parameters.
        for (kind, patch) in [(UpscalerKind::TypeA, 2), (UpscalerKind::TypeB, 1)] {
            let mut c = cfg(1, 2, 1, 2, kind);
            c.upscaler.patch = patch;
            let model = Model::Multiscale(init_params(&c, 5).unwrap());
            let mut total = 0.0;
            for bits in 0..16u16 {
                let img = Image::new(1, 2, 2, (0..4).map(|i| (bits >> i) & 1).collect()).unwrap();
                let r = joint_nll(&model, &img, &Conditioning::none()).unwrap();
                total += (-r.total_nats).exp();
            }
            assert!((total - 1.0).abs() < 1e-9, "mass {total} for {kind:?}");
        }
    }

    #[test]
    fn memoized_pass_values_are_bit_identical() {
        let c = cfg(2, 4, 1, 2, UpscalerKind::TypeA);
        let model = init_params(&c, 6).unwrap();
        let mut memo = PassMemo::new();
        for seed in 0..8 {
            let img = rand_image(1, 4, 4, 2, 100 + seed);
            let plain = multiscale_group_nlls(&model, &img, &Conditioning::none(), None).unwrap();
            let cached =
                multiscale_group_nlls(&model, &img, &Conditioning::none(), Some(&mut memo))
                    .unwrap();
            // Twice through the memo to exercise hits as well as misses.
            let cached2 =
                multiscale_group_nlls(&model, &img, &Conditioning::none(), Some(&mut memo))
                    .unwrap();
            for ((g1, n1), ((_, n2), (_, n3))) in
                plain.iter().zip(cached.iter().zip(cached2.iter()))
            {
                assert_eq!(n1.to_bits(), n2.to_bits(), "group {g1}");
                assert_eq!(n1.to_bits(), n3.to_bits(), "group {g1}");
            }
        }
        assert!(!memo.is_empty());
    }

    #[test]
    fn dataset_mean_of_one_and_of_duplicates() {
        let c = cfg(2, 4, 1, 2, UpscalerKind::TypeA);
        let model = Model::Multiscale(init_params(&c, 7).unwrap());
        let img = rand_image(1, 4, 4, 2, 8);
        let single = joint_nll(&model, &img, &Conditioning::none()).unwrap();
        let once = dataset_nll(&model, vec![Ok((img.clone(), Conditioning::none()))]).unwrap();
        assert_eq!(
            once.nats_per_subpixel.to_bits(),
            single.nats_per_subpixel.to_bits()
        );
        let twice = dataset_nll(
            &model,
            vec![
                Ok((img.clone(), Conditioning::none())),
                Ok((img.clone(), Conditioning::none())),
            ],
        )
        .unwrap();
        assert!((twice.nats_per_subpixel - single.nats_per_subpixel).abs() < 1e-12);
        assert!(matches!(
            dataset_nll(&model, Vec::new()).unwrap_err(),
            Error::EmptyDataset
        ));
    }

    #[test]
    fn pyramid_uses_target_resolution_pixels_exactly() {
        // Sub-sampled pixels must equal target-resolution pixels; no
        // re-quantization at intermediate scales.
        let c = cfg(2, 8, 1, 16, UpscalerKind::TypeA);
        let model = init_params(&c, 9).unwrap();
        let img = rand_image(1, 8, 8, 16, 10);
        let pyr = model.schedule.pyramid(&img).unwrap();
        for (s, level) in pyr.iter().enumerate() {
            for r in 0..level.height {
                for col in 0..level.width {
                    let (tr, tc) = model.schedule.to_target(s, r, col);
                    assert_eq!(level.at(0, r, col), img.at(0, tr, tc));
                }
            }
        }
    }

    #[test]
    fn independent_model_uniform_matches_log_k() {
        let c = cfg(2, 4, 1, 4, UpscalerKind::TypeA);
        let model = Model::Independent(init_independent(&c).unwrap());
        let img = rand_image(1, 4, 4, 4, 11);
        let r = joint_nll(&model, &img, &Conditioning::none()).unwrap();
        assert_eq!(r.bits_per_subpixel, 2.0);
    }

    #[test]
    fn rejects_out_of_range_intensities() {
        let c = cfg(2, 4, 1, 2, UpscalerKind::TypeA);
        let model = Model::Multiscale(init_params(&c, 12).unwrap());
        let img = Image::new(1, 4, 4, vec![3u16; 16]).unwrap();
        assert!(joint_nll(&model, &img, &Conditioning::none()).is_err());
    }
}

#[cfg(test)]
mod cond_tests {
    use super::*;
    use crate::network::{init_params, CondConfig, ModelConfig, PixelCnnConfig, UpscalerConfig, UpscalerKind};
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn spatial_conditioning_trains_the_encoders() {
        let cfg = ModelConfig {
            base_h: 2,
            base_w: 2,
            target_h: 4,
            target_w: 4,
            pixelcnn: PixelCnnConfig {
                layers: 2,
                hidden: 6,
                kernel: 3,
                first_kernel: 3,
                levels: 2,
                channels: 1,
            },
            upscaler: UpscalerConfig {
                kind: UpscalerKind::TypeA,
                resnet_layers: 1,
                hidden: 8,
                patch: 2,
                shallow_layers: 2,
                shallow_hidden: 6,
                levels: 2,
                channels: 1,
                separate_corner_weights: false,
            },
            cond: CondConfig {
                num_classes: None,
                spatial_channels: Some(2),
                encoder_layers: 1,
                encoder_hidden: 4,
            },
        };
        let model = init_params(&cfg, 1).unwrap();
        let mut img = Image::zeros(1, 4, 4);
        for i in 0..16 {
            img.data_mut()[i] = (rng::stream_u64(2, &[i as u64]) % 2) as u16;
        }
        // Raw 3x5 map gets bilinearly resized per scale before encoding.
        let map = Tensor::new(
            vec![2, 3, 5],
            (0..30).map(|i| rng::stream_uniform(3, &[i as u64], 1.0)).collect(),
        )
        .unwrap();
        let cond = Conditioning {
            class_id: None,
            spatial: Some(map),
        };
        let mut g = Graph::new();
        let loss = multiscale_loss_node(&mut g, &model, &[&img], &[&cond], true).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut saw_encoder_grad = false;
        for (name, node) in g.param_names() {
            if name.starts_with("cond") {
                if let Some(t) = grads.get(node) {
                    saw_encoder_grad |= t.data().iter().any(|&v| v != 0.0);
                }
            }
        }
        assert!(saw_encoder_grad, "spatial encoders must receive gradients");

        // And the conditioned NLL differs from the unconditional one.
        let with = multiscale_group_nlls(&model, &img, &cond, None).unwrap();
        let without = multiscale_group_nlls(&model, &img, &Conditioning::none(), None).unwrap();
        let (a, b): (f64, f64) = (
            with.iter().map(|(_, n)| n).sum(),
            without.iter().map(|(_, n)| n).sum(),
        );
        assert_ne!(a.to_bits(), b.to_bits());
    }
}
