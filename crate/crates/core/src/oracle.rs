//! Independent brute-force verification: exhaustive enumeration of tiny
//! image spaces, causality probes, and finite-difference gradient checks.
//! These certify the model before any training result is trusted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::likelihood::{joint_nll_memo, teacher_forced_passes, PassLogits, PassMemo};
use crate::network::{Conditioning, Model, MultiscaleModel, UpscalerKind};
use crate::pyramid::{Corner, GroupId, GroupSchedule};
use crate::rng;
use crate::tensor::{Graph, NodeId, Tensor};

/// An exhaustively enumerable image space: K^(C*H*W) <= 2^16.
#[derive(Debug, Clone, Copy)]
pub struct EnumSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
}

impl EnumSpec {
    pub fn of_model(cfg: &crate::network::ModelConfig) -> Self {
        EnumSpec {
            channels: cfg.channels(),
            height: cfg.target_h,
            width: cfg.target_w,
            levels: cfg.levels(),
        }
    }

    pub fn image_count(&self) -> Result<usize> {
        let n = self.channels * self.height * self.width;
        let mut count = 1usize;
        for _ in 0..n {
            count = count
                .checked_mul(self.levels)
                .filter(|&c| c <= 1 << 16)
                .ok_or_else(|| {
                    Error::EnumerationBound(format!("{}^{} images exceed 2^16", self.levels, n))
                })?;
        }
        Ok(count)
    }

    /// Image `index` in row-major intensity order (first subpixel is the
    /// most significant digit).
    pub fn image_at(&self, index: usize) -> Image {
        let n = self.channels * self.height * self.width;
        let mut data = vec![0u16; n];
        let mut rest = index;
        for slot in (0..n).rev() {
            data[slot] = (rest % self.levels) as u16;
            rest /= self.levels;
        }
        Image::new(self.channels, self.height, self.width, data).expect("shape matches")
    }
}

/// Total probability mass and the per-image table.
#[derive(Debug, Clone)]
pub struct MassReport {
    pub total: f64,
    pub per_image: Vec<f64>,
}

/// Iterate every image of the space in row-major intensity order, compute
/// exp(-joint_nll), and accumulate with compensated summation. Network
/// passes are memoized on exact integer inputs, so each cached pass is
/// bit-identical to recomputing it.
pub fn enumerate_mass(model: &Model, spec: &EnumSpec, cond: &Conditioning) -> Result<MassReport> {
    let count = spec.image_count()?;
    let mut memo = PassMemo::new();
    let mut per_image = Vec::with_capacity(count);
    let mut sum = 0.0;
    let mut comp = 0.0;
    for index in 0..count {
        let image = spec.image_at(index);
        let report = joint_nll_memo(model, &image, cond, Some(&mut memo))?;
        let p = (-report.total_nats).exp();
        per_image.push(p);
        let y = p - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    Ok(MassReport {
        total: sum,
        per_image,
    })
}

/// A (pixel, channel) site in target coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Site {
    pub r: usize,
    pub c: usize,
    pub ch: usize,
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})ch{}", self.r, self.c, self.ch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeMethod {
    Perturbation,
    Gradient,
}

#[derive(Debug, Clone)]
pub struct Violation {
    pub src: Site,
    pub dst: Site,
    pub method: ProbeMethod,
    pub magnitude: f64,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:?} dependence of {} on forbidden {} (magnitude {:e})",
            self.method, self.dst, self.src, self.magnitude
        )
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub sites: usize,
    pub violations: Vec<Violation>,
    /// observed[s * sites + d]: perturbing source s changed destination d's
    /// logits (allowed or not).
    pub observed: Vec<bool>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn violations_of(&self, method: ProbeMethod) -> usize {
        self.violations
            .iter()
            .filter(|v| v.method == method)
            .count()
    }

    pub fn dependence_observed(&self, src: Site, dst: Site, dims: (usize, usize, usize)) -> bool {
        let (w, c) = (dims.1, dims.2);
        let idx = |s: Site| (s.r * w + s.c) * c + s.ch;
        self.observed[idx(src) * self.sites + idx(dst)]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "sites={}", self.sites);
        let _ = writeln!(out, "violations={}", self.violations.len());
        for v in &self.violations {
            let _ = writeln!(out, "violation {v}");
        }
        out
    }
}

/// May `src` legally influence the logits of `dst` under the factorization?
pub fn dependence_allowed(
    schedule: &GroupSchedule,
    kind: UpscalerKind,
    patch: usize,
    src: Site,
    dst: Site,
) -> bool {
    let s_group = schedule.introducing_step(src.r, src.c);
    let d_group = schedule.introducing_step(dst.r, dst.c);
    let s_idx = schedule.step_index(s_group);
    let d_idx = schedule.step_index(d_group);
    if s_idx != d_idx {
        return s_idx < d_idx;
    }
    match d_group {
        GroupId::Base => {
            // Raster order within the base image, channels within a pixel.
            let f = schedule.scales;
            let (sr, sc) = (src.r >> f, src.c >> f);
            let (dr, dc) = (dst.r >> f, dst.c >> f);
            (sr, sc) < (dr, dc) || ((sr, sc) == (dr, dc) && src.ch < dst.ch)
        }
        GroupId::Corner { scale, corner } => {
            let f = schedule.scales - scale;
            let (off_r, off_c) = corner.offset();
            // Corner-grid coordinates.
            let (sr, sc) = (((src.r >> f) - off_r) / 2, ((src.c >> f) - off_c) / 2);
            let (dr, dc) = (((dst.r >> f) - off_r) / 2, ((dst.c >> f) - off_c) / 2);
            match kind {
                UpscalerKind::TypeA => src.ch < dst.ch,
                UpscalerKind::TypeB => {
                    let same_patch = (sr / patch, sc / patch) == (dr / patch, dc / patch);
                    same_patch
                        && ((sr % patch, sc % patch) < (dr % patch, dc % patch)
                            || ((sr, sc) == (dr, dc) && src.ch < dst.ch))
                }
            }
        }
    }
}

/// Enumeration index of a site in the probe's row tables (HWC order,
/// matching `all_sites`). Not a data offset: `Image` stores CHW.
fn site_index(img: &Image, s: Site) -> usize {
    (s.r * img.width + s.c) * img.channels + s.ch
}

fn all_sites(c: usize, h: usize, w: usize) -> Vec<Site> {
    let mut v = Vec::with_capacity(c * h * w);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                v.push(Site { r, c: col, ch });
            }
        }
    }
    v
}

/// Prediction logits row for every site, teacher-forced on `image`.
fn prediction_logits(
    model: &MultiscaleModel,
    image: &Image,
    cond: &Conditioning,
    memo: &mut PassMemo,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let schedule = &model.schedule;
    let mut rows = vec![Vec::new(); image.subpixels()];
    for pass in teacher_forced_passes(model, image, cond, Some(memo))? {
        match pass {
            PassLogits::Base(logits) => {
                for r in 0..cfg.base_h {
                    for col in 0..cfg.base_w {
                        let (tr, tc) = schedule.to_target(0, r, col);
                        for ch in 0..c {
                            let site = Site { r: tr, c: tc, ch };
                            rows[site_index(image, site)] =
                                crate::likelihood::logits_row(&logits, 0, ch, k, r, col);
                        }
                    }
                }
            }
            PassLogits::CornerA {
                scale,
                corner,
                chan,
                logits,
            } => {
                let (gh, gw) = schedule.corner_dims(scale);
                let (or, oc) = corner.offset();
                for r in 0..gh {
                    for col in 0..gw {
                        let (tr, tc) = schedule.to_target(scale, 2 * r + or, 2 * col + oc);
                        let site = Site {
                            r: tr,
                            c: tc,
                            ch: chan,
                        };
                        rows[site_index(image, site)] =
                            crate::likelihood::logits_row(&logits, 0, 0, k, r, col);
                    }
                }
            }
            PassLogits::CornerB {
                scale,
                corner,
                logits,
            } => {
                let (gh, gw) = schedule.corner_dims(scale);
                let m = cfg.upscaler.patch;
                let (or, oc) = corner.offset();
                let pw = gw / m;
                for pr in 0..gh / m {
                    for pc in 0..pw {
                        let p = pr * pw + pc;
                        for rr in 0..m {
                            for cc in 0..m {
                                let (r, col) = (pr * m + rr, pc * m + cc);
                                let (tr, tc) = schedule.to_target(scale, 2 * r + or, 2 * col + oc);
                                for ch in 0..c {
                                    let site = Site { r: tr, c: tc, ch };
                                    rows[site_index(image, site)] =
                                        crate::likelihood::logits_row(&logits, p, ch, k, rr, cc);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// For every (source, destination) site pair, flip the source in the
/// teacher-forced input and compare the destination's logits bitwise;
/// report changes the factorization forbids. Simultaneously checks via
/// autodiff that forbidden-path gradients are exactly zero.
pub fn causality_probe(
    model: &MultiscaleModel,
    cond: &Conditioning,
    seed: u64,
    probe_images: usize,
) -> Result<ProbeReport> {
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let (h, w) = (cfg.target_h, cfg.target_w);
    let sites = all_sites(c, h, w);
    let n = sites.len();
    let mut violations = Vec::new();
    let mut observed = vec![false; n * n];
    let allowed = |src: Site, dst: Site| {
        dependence_allowed(
            &model.schedule,
            cfg.upscaler.kind,
            cfg.upscaler.patch,
            src,
            dst,
        )
    };

    for img_idx in 0..probe_images.max(1) {
        let mut image = Image::zeros(c, h, w);
        for i in 0..image.data().len() {
            image.data_mut()[i] =
                (rng::stream_u64(seed, &[img_idx as u64, i as u64]) % k as u64) as u16;
        }
        let mut memo = PassMemo::new();
        let baseline = prediction_logits(model, &image, cond, &mut memo)?;

        // Perturbation side: flip each source to a different level and
        // look for bitwise logit changes. Masking promises exactness, so a
        // large flip (not an infinitesimal) is the right probe.
        for (si, &src) in sites.iter().enumerate() {
            let mut flipped = image.clone();
            let at = flipped.idx(src.ch, src.r, src.c);
            flipped.data_mut()[at] = (flipped.data()[at] + 1) % k as u16;
            let probed = prediction_logits(model, &flipped, cond, &mut memo)?;
            for (di, &dst) in sites.iter().enumerate() {
                let changed = baseline[di]
                    .iter()
                    .zip(&probed[di])
                    .any(|(a, b)| a.to_bits() != b.to_bits());
                if changed {
                    observed[si * n + di] = true;
                    if !allowed(src, dst) {
                        let mag = baseline[di]
                            .iter()
                            .zip(&probed[di])
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0, f64::max);
                        violations.push(Violation {
                            src,
                            dst,
                            method: ProbeMethod::Perturbation,
                            magnitude: mag,
                        });
                    }
                }
            }
        }

        // Gradient side: backprop a fixed random combination of each
        // destination's logits to the pass inputs; forbidden source slots
        // must hold exactly 0.0.
        gradient_probe(model, &image, cond, seed, &allowed, &mut violations)?;
    }
    violations.sort_by_key(|v| (v.dst.r, v.dst.c, v.dst.ch, v.src.r, v.src.c, v.src.ch));
    violations.dedup_by(|a, b| a.src == b.src && a.dst == b.dst && a.method == b.method);
    Ok(ProbeReport {
        sites: n,
        violations,
        observed,
    })
}

/// A slot of a pass input tensor together with the target-coordinate site
/// it carries, if any. Constant zero-filled slots map to no site.
type SlotMap = Vec<(usize, Site)>;

fn gradient_probe(
    model: &MultiscaleModel,
    image: &Image,
    cond: &Conditioning,
    seed: u64,
    allowed: &dyn Fn(Site, Site) -> bool,
    violations: &mut Vec<Violation>,
) -> Result<()> {
    use crate::network::forward::{
        assemble_context, base_logits_node, corner_patches, normalized_batch, resolve_cond,
        shallow_logits_node, upscaler_context_node, CtxItem,
    };
    let cfg = &model.cfg;
    let (c, k) = (cfg.channels(), cfg.levels());
    let schedule = &model.schedule;
    let bc = resolve_cond(cfg, &[cond])?;
    let pyramid = schedule.pyramid(image)?;

    let mut check_pass = |g: &mut Graph,
                          logits: NodeId,
                          input_slots: &[(NodeId, SlotMap)],
                          dsts: &[(Site, Vec<usize>)]|
     -> Result<()> {
        for (dst, flat_idxs) in dsts {
            let lv = g.value(logits);
            let mut weights = Tensor::zeros(lv.shape().to_vec());
            for (j, &fi) in flat_idxs.iter().enumerate() {
                weights.data_mut()[fi] = 1.0 + rng::stream_unit(seed, &[0x99, fi as u64, j as u64]);
            }
            let wn = g.leaf(weights, false);
            let prod = g.mul(logits, wn)?;
            let loss = g.sum(prod);
            let grads = g.backward(loss)?;
            for (input, slots) in input_slots {
                let Some(gin) = grads.get(*input) else {
                    continue;
                };
                for &(flat, src) in slots {
                    let gv = gin.data()[flat];
                    if !allowed(src, *dst) && gv != 0.0 {
                        violations.push(Violation {
                            src,
                            dst: *dst,
                            method: ProbeMethod::Gradient,
                            magnitude: gv.abs(),
                        });
                    }
                }
            }
        }
        Ok(())
    };

    // Base pass.
    {
        let base_img = &pyramid[0];
        let mut g = Graph::new();
        let input = normalized_batch(&[base_img], k)?;
        let input_node = g.leaf(input, true);
        let logits = base_logits_node(&mut g, model, input_node, &bc)?;
        let mut slots: SlotMap = Vec::new();
        for ch in 0..c {
            for r in 0..cfg.base_h {
                for col in 0..cfg.base_w {
                    let (tr, tc) = schedule.to_target(0, r, col);
                    let flat = (ch * cfg.base_h + r) * cfg.base_w + col;
                    slots.push((flat, Site { r: tr, c: tc, ch }));
                }
            }
        }
        let mut dsts = Vec::new();
        for r in 0..cfg.base_h {
            for col in 0..cfg.base_w {
                let (tr, tc) = schedule.to_target(0, r, col);
                for ch in 0..c {
                    let flat_idxs: Vec<usize> = (0..k)
                        .map(|ki| ((ch * k + ki) * cfg.base_h + r) * cfg.base_w + col)
                        .collect();
                    dsts.push((Site { r: tr, c: tc, ch }, flat_idxs));
                }
            }
        }
        check_pass(&mut g, logits, &[(input_node, slots)], &dsts)?;
    }

    // Corner passes.
    for scale in 1..=schedule.scales {
        let prev = &pyramid[scale - 1];
        let scale_img = &pyramid[scale];
        let ur = crate::pyramid::split_corner(scale_img, Corner::Ur);
        let ll = crate::pyramid::split_corner(scale_img, Corner::Ll);
        let lr = crate::pyramid::split_corner(scale_img, Corner::Lr);
        let (gh, gw) = schedule.corner_dims(scale);
        let fprev = schedule.scales - (scale - 1);
        let plane = gh * gw;

        for corner in Corner::GENERATED {
            let (target, known_ur, known_ll): (&Image, Option<&Image>, Option<&Image>) =
                match corner {
                    Corner::Ur => (&ur, None, None),
                    Corner::Ll => (&ll, Some(&ur), None),
                    Corner::Lr => (&lr, Some(&ur), Some(&ll)),
                    Corner::Ul => unreachable!(),
                };
            let (off_r, off_c) = corner.offset();
            // Slot map of the assembled context tensor.
            let add_corner_slot = |slots: &mut SlotMap, slot: usize, crn: Corner, upto: usize| {
                let (or, oc) = crn.offset();
                for ch in 0..upto {
                    for r in 0..gh {
                        for col in 0..gw {
                            let (tr, tc) = schedule.to_target(scale, 2 * r + or, 2 * col + oc);
                            slots.push((
                                (slot * c + ch) * plane + r * gw + col,
                                Site { r: tr, c: tc, ch },
                            ));
                        }
                    }
                }
            };
            let ctx_slots = |with_prefix: bool, chan: usize| -> SlotMap {
                let mut slots = Vec::new();
                // UL slot: the whole previous-scale image.
                for ch in 0..c {
                    for r in 0..gh {
                        for col in 0..gw {
                            let (tr, tc) = (r << fprev, col << fprev);
                            slots.push((ch * plane + r * gw + col, Site { r: tr, c: tc, ch }));
                        }
                    }
                }
                if known_ur.is_some() {
                    add_corner_slot(&mut slots, 1, Corner::Ur, c);
                }
                if known_ll.is_some() {
                    add_corner_slot(&mut slots, 2, Corner::Ll, c);
                }
                if with_prefix && chan > 0 {
                    add_corner_slot(&mut slots, 3, corner, chan);
                }
                slots
            };
            let dst_sites = |chans: std::ops::Range<usize>| -> Vec<Site> {
                let mut v = Vec::new();
                for r in 0..gh {
                    for col in 0..gw {
                        let (tr, tc) = schedule.to_target(scale, 2 * r + off_r, 2 * col + off_c);
                        for ch in chans.clone() {
                            v.push(Site { r: tr, c: tc, ch });
                        }
                    }
                }
                v
            };

            match cfg.upscaler.kind {
                UpscalerKind::TypeA => {
                    for chan in 0..c {
                        let item = CtxItem {
                            ul: prev,
                            ur: known_ur,
                            ll: known_ll,
                            target: Some(target),
                        };
                        let ctx = assemble_context(&[item], k, chan, true)?;
                        let mut g = Graph::new();
                        let ctx_node = g.leaf(ctx, true);
                        let logits = upscaler_context_node(
                            &mut g, model, scale, corner, ctx_node, chan, &bc,
                        )?;
                        let dsts: Vec<(Site, Vec<usize>)> = dst_sites(chan..chan + 1)
                            .into_iter()
                            .map(|site| {
                                let f = schedule.scales - scale;
                                let (r, col) =
                                    (((site.r >> f) - off_r) / 2, ((site.c >> f) - off_c) / 2);
                                let idxs = (0..k).map(|ki| (ki * gh + r) * gw + col).collect();
                                (site, idxs)
                            })
                            .collect();
                        check_pass(&mut g, logits, &[(ctx_node, ctx_slots(true, chan))], &dsts)?;
                    }
                }
                UpscalerKind::TypeB => {
                    let m = cfg.upscaler.patch;
                    let item = CtxItem {
                        ul: prev,
                        ur: known_ur,
                        ll: known_ll,
                        target: None,
                    };
                    let ctx = assemble_context(&[item], k, 0, false)?;
                    let mut g = Graph::new();
                    let ctx_node = g.leaf(ctx, true);
                    let feats =
                        upscaler_context_node(&mut g, model, scale, corner, ctx_node, 0, &bc)?;
                    let pix = corner_patches(&[target], m, k)?;
                    let pix_node = g.leaf(pix, true);
                    let logits =
                        shallow_logits_node(&mut g, model, scale, corner, feats, pix_node, &bc)?;
                    // Patch-pixel slot map.
                    let pw = gw / m;
                    let mut pix_slots: SlotMap = Vec::new();
                    for pr in 0..gh / m {
                        for pc in 0..pw {
                            let p = pr * pw + pc;
                            for ch in 0..c {
                                for rr in 0..m {
                                    for cc in 0..m {
                                        let (r, col) = (pr * m + rr, pc * m + cc);
                                        let (tr, tc) = schedule.to_target(
                                            scale,
                                            2 * r + off_r,
                                            2 * col + off_c,
                                        );
                                        pix_slots.push((
                                            ((p * c + ch) * m + rr) * m + cc,
                                            Site { r: tr, c: tc, ch },
                                        ));
                                    }
                                }
                            }
                        }
                    }
                    let mut dsts = Vec::new();
                    for site in dst_sites(0..c) {
                        let f = schedule.scales - scale;
                        let (r, col) = (((site.r >> f) - off_r) / 2, ((site.c >> f) - off_c) / 2);
                        let (p, rr, cc) = ((r / m) * pw + col / m, r % m, col % m);
                        let idxs: Vec<usize> = (0..k)
                            .map(|ki| ((p * (c * k) + site.ch * k + ki) * m + rr) * m + cc)
                            .collect();
                        dsts.push((site, idxs));
                    }
                    check_pass(
                        &mut g,
                        logits,
                        &[(ctx_node, ctx_slots(false, 0)), (pix_node, pix_slots)],
                        &dsts,
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Builds a scalar loss node against a parameter registry; gradient
/// checks re-run it with perturbed parameters.
pub type LossBuilder<'a> = dyn Fn(&mut Graph, &BTreeMap<String, Tensor>) -> Result<NodeId> + 'a;

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    pub params_checked: usize,
}

/// Central differences (h = 1e-5 by default) against reverse-mode
/// gradients over every parameter. The error is normalized by the
/// gradient vector's max magnitude, so tiny individual entries do not
/// drown the check in round-off noise.
pub fn gradcheck(
    params: &BTreeMap<String, Tensor>,
    build: &LossBuilder,
    h: f64,
) -> Result<GradCheckResult> {
    let mut g = Graph::new();
    let loss = build(&mut g, params)?;
    let grads = g.backward(loss)?;
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, node) in g.param_names() {
        if let Some(gt) = grads.get(node) {
            analytic.insert(name.clone(), gt.clone());
        }
    }
    let eval = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, p)?;
        Ok(g.value(loss).item())
    };
    let mut scale = 0f64;
    for t in analytic.values() {
        for v in t.data() {
            scale = scale.max(v.abs());
        }
    }
    let mut max_err = 0f64;
    let mut checked = 0usize;
    let mut work = params.clone();
    for (name, an) in &analytic {
        for i in 0..an.len() {
            let orig = work[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let lp = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let lm = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - an.data()[i]).abs() / scale.max(1e-12);
            if err > max_err {
                max_err = err;
            }
            checked += 1;
        }
    }
    Ok(GradCheckResult {
        max_rel_error: max_err,
        params_checked: checked,
    })
}

/// Gradcheck of a plain linear (1x1 conv) layer; exact up to rounding.
pub fn gradcheck_linear(seed: u64) -> Result<GradCheckResult> {
    let mut params = BTreeMap::new();
    let kdata: Vec<f64> = (0..3 * 2)
        .map(|i| rng::stream_uniform(seed, &[1, i as u64], 0.7))
        .collect();
    params.insert("lin.kernel".into(), Tensor::new(vec![3, 2, 1, 1], kdata)?);
    params.insert(
        "lin.bias".into(),
        Tensor::new(vec![3], vec![0.1, -0.2, 0.3])?,
    );
    let x = Tensor::new(
        vec![1, 2, 3, 3],
        (0..18)
            .map(|i| rng::stream_uniform(seed, &[2, i as u64], 1.0))
            .collect(),
    )?;
    let targets: Arc<Vec<u16>> = Arc::new((0..9).map(|i| (i % 3) as u16).collect());
    let build = move |g: &mut Graph, p: &BTreeMap<String, Tensor>| -> Result<NodeId> {
        let xn = g.leaf(x.clone(), false);
        let k = g.param("lin.kernel", &p["lin.kernel"]);
        let b = g.param("lin.bias", &p["lin.bias"]);
        let out = g.conv2d(xn, k, b, None, crate::tensor::Padding::Same)?;
        let per = g.xent(out, 3, targets.clone())?;
        Ok(g.sum(per))
    };
    gradcheck(&params, &build, 1e-5)
}

/// Gradcheck of a masked conv stack with softmax loss.
pub fn gradcheck_masked_stack(seed: u64) -> Result<GradCheckResult> {
    use crate::network::{build_mask, InputRole, MaskType};
    let hidden = 4;
    let k = 3usize;
    let ma = Arc::new(build_mask(
        MaskType::A,
        &vec![0; hidden],
        &[InputRole::Causal(0)],
        3,
    ));
    let mb = Arc::new(build_mask(
        MaskType::B,
        &vec![0; k],
        &vec![InputRole::Causal(0); hidden],
        3,
    ));
    let mut params = BTreeMap::new();
    let rand = |tag: u64, n: usize, bound: f64| -> Vec<f64> {
        (0..n)
            .map(|i| rng::stream_uniform(seed, &[tag, i as u64], bound))
            .collect()
    };
    params.insert(
        "c0.kernel".into(),
        Tensor::new(vec![hidden, 1, 3, 3], rand(1, hidden * 9, 0.6))?,
    );
    params.insert(
        "c0.bias".into(),
        Tensor::new(vec![hidden], rand(2, hidden, 0.1))?,
    );
    params.insert(
        "c1.kernel".into(),
        Tensor::new(vec![k, hidden, 3, 3], rand(3, k * hidden * 9, 0.5))?,
    );
    params.insert("c1.bias".into(), Tensor::new(vec![k], rand(4, k, 0.1))?);
    let x = Tensor::new(vec![1, 1, 4, 4], rand(5, 16, 0.5))?;
    let targets: Arc<Vec<u16>> = Arc::new((0..16).map(|i| (i % k) as u16).collect());
    let build = move |g: &mut Graph, p: &BTreeMap<String, Tensor>| -> Result<NodeId> {
        let xn = g.leaf(x.clone(), false);
        let k0 = g.param("c0.kernel", &p["c0.kernel"]);
        let b0 = g.param("c0.bias", &p["c0.bias"]);
        let h0 = g.conv2d(xn, k0, b0, Some(ma.clone()), crate::tensor::Padding::Same)?;
        let h0 = g.relu(h0);
        let k1 = g.param("c1.kernel", &p["c1.kernel"]);
        let b1 = g.param("c1.bias", &p["c1.bias"]);
        let out = g.conv2d(h0, k1, b1, Some(mb.clone()), crate::tensor::Padding::Same)?;
        let per = g.xent(out, k, targets.clone())?;
        Ok(g.sum(per))
    };
    gradcheck(&params, &build, 1e-5)
}

/// Gradcheck of the full upscaler loss (every corner pass of scale 1,
/// teacher-forced) on a small multiscale model.
pub fn gradcheck_upscaler(model: &MultiscaleModel, seed: u64) -> Result<GradCheckResult> {
    let cfg = model.cfg.clone();
    let (c, k) = (cfg.channels(), cfg.levels());
    let mut image = Image::zeros(c, cfg.target_h, cfg.target_w);
    for i in 0..image.data().len() {
        image.data_mut()[i] = (rng::stream_u64(seed, &[7, i as u64]) % k as u64) as u16;
    }
    let plans = model.clone();
    let build = move |g: &mut Graph, p: &BTreeMap<String, Tensor>| -> Result<NodeId> {
        let mut m = plans.clone();
        m.params = p.clone();
        crate::likelihood::upscaler_loss_node(g, &m, &image)
    };
    // Check only the upscaler parameters (the loss does not touch the base).
    let up_params: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("up"))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let mut all = model.params.clone();
    let result = {
        // Finite differences must see the full registry so the forward
        // passes bind everything; only up* entries are perturbed.
        let build2 = |g: &mut Graph, p: &BTreeMap<String, Tensor>| build(g, p);
        gradcheck_subset(&mut all, &up_params, &build2, 1e-5)
    }?;
    Ok(result)
}

fn gradcheck_subset(
    full: &mut BTreeMap<String, Tensor>,
    subset: &BTreeMap<String, Tensor>,
    build: &LossBuilder,
    h: f64,
) -> Result<GradCheckResult> {
    let mut g = Graph::new();
    let loss = build(&mut g, full)?;
    let grads = g.backward(loss)?;
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, node) in g.param_names() {
        if subset.contains_key(name) {
            if let Some(gt) = grads.get(node) {
                analytic.insert(name.clone(), gt.clone());
            }
        }
    }
    let mut scale = 0f64;
    for t in analytic.values() {
        for v in t.data() {
            scale = scale.max(v.abs());
        }
    }
    let mut max_err = 0f64;
    let mut checked = 0usize;
    for (name, an) in &analytic {
        for i in 0..an.len() {
            let orig = full[name].data()[i];
            full.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let lp = {
                let mut g = Graph::new();
                let l = build(&mut g, full)?;
                g.value(l).item()
            };
            full.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let lm = {
                let mut g = Graph::new();
                let l = build(&mut g, full)?;
                g.value(l).item()
            };
            full.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - an.data()[i]).abs() / scale.max(1e-12);
            max_err = max_err.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckResult {
        max_rel_error: max_err,
        params_checked: checked,
    })
}
