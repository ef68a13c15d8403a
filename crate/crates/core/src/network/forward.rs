//! Graph-building forward passes. One code path serves training,
//! likelihood, sampling, and the verification probes; gradients are simply
//! not requested when they are not needed.

use std::sync::Arc;

use super::{
    Conditioning, ConvPlan, EncoderPlan, FlatModel, IndependentModel, ModelConfig, MultiscaleModel,
    PixelCnnPlan, UpscalerKind,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::pyramid::Corner;
use crate::tensor::{bilinear_resize, Graph, NodeId, Padding, Tensor};

/// Per-batch conditioning resolved against the model's declared kinds.
/// Presence must be uniform across the batch; undeclared kinds are
/// rejected, declared-but-absent kinds fall back to the unconditional
/// path exactly.
pub(crate) struct BatchCond {
    pub batch: usize,
    pub class_ids: Option<Arc<Vec<usize>>>,
    pub spatial: Option<Vec<Tensor>>,
}

impl BatchCond {
    #[cfg_attr(not(test), allow(dead_code))]
    pub fn none(batch: usize) -> Self {
        BatchCond {
            batch,
            class_ids: None,
            spatial: None,
        }
    }
}

pub(crate) fn resolve_cond(cfg: &ModelConfig, conds: &[&Conditioning]) -> Result<BatchCond> {
    let batch = conds.len();
    let with_class = conds.iter().filter(|c| c.class_id.is_some()).count();
    let with_spatial = conds.iter().filter(|c| c.spatial.is_some()).count();
    if with_class > 0 && with_class < batch || with_spatial > 0 && with_spatial < batch {
        return Err(Error::Config(
            "conditioning must be uniformly present or absent across a batch".into(),
        ));
    }
    let class_ids = if with_class == batch && batch > 0 {
        let n = cfg.cond.num_classes.ok_or_else(|| {
            Error::Config("class conditioning passed to a model that does not declare it".into())
        })?;
        let ids: Vec<usize> = conds.iter().map(|c| c.class_id.unwrap()).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!(
                "class id {bad} out of range [0, {n})"
            )));
        }
        Some(Arc::new(ids))
    } else {
        None
    };
    let spatial = if with_spatial == batch && batch > 0 {
        let cc = cfg.cond.spatial_channels.ok_or_else(|| {
            Error::Config("spatial conditioning passed to a model that does not declare it".into())
        })?;
        let maps: Vec<Tensor> = conds.iter().map(|c| c.spatial.clone().unwrap()).collect();
        for m in &maps {
            if m.shape().len() != 3 || m.shape()[0] != cc {
                return Err(Error::dim(format!(
                    "spatial conditioning map shape {:?} wants [{cc}, h, w]",
                    m.shape()
                )));
            }
        }
        Some(maps)
    } else {
        None
    };
    Ok(BatchCond {
        batch,
        class_ids,
        spatial,
    })
}

fn bind_conv(
    g: &mut Graph,
    params: &std::collections::BTreeMap<String, Tensor>,
    name: &str,
) -> Result<(NodeId, NodeId)> {
    let kname = format!("{name}.kernel");
    let bname = format!("{name}.bias");
    let kv = params
        .get(&kname)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {kname}")))?;
    let bv = params
        .get(&bname)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter {bname}")))?;
    Ok((g.param(&kname, kv), g.param(&bname, bv)))
}

/// conv -> optional class bias -> optional fixed input embeddings.
#[allow(clippy::too_many_arguments)]
fn conv_apply(
    g: &mut Graph,
    params: &std::collections::BTreeMap<String, Tensor>,
    name: &str,
    plan: &ConvPlan,
    x: NodeId,
    class_ids: Option<&Arc<Vec<usize>>>,
    input_embeds: &[(String, usize)],
    batch: usize,
) -> Result<NodeId> {
    let (k, b) = bind_conv(g, params, name)?;
    let mut out = g.conv2d(x, k, b, plan.mask.clone(), Padding::Same)?;
    if plan.class_bias {
        if let Some(ids) = class_ids {
            let tname = format!("{name}.class");
            let tv = params
                .get(&tname)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {tname}")))?;
            let t = g.param(&tname, tv);
            out = g.bias_embed(out, t, ids.clone())?;
        }
    }
    for (tname, idx) in input_embeds {
        if let Some(tv) = params.get(tname) {
            let t = g.param(tname, tv);
            out = g.bias_embed(out, t, Arc::new(vec![*idx; batch]))?;
        }
    }
    Ok(out)
}

/// Masked PixelCNN stack: l0 .. l{n-1}, relu between layers, 1x1 head.
pub(crate) fn pixelcnn_forward(
    g: &mut Graph,
    params: &std::collections::BTreeMap<String, Tensor>,
    prefix: &str,
    plan: &PixelCnnPlan,
    input: NodeId,
    class_ids: Option<&Arc<Vec<usize>>>,
    input_embeds: &[(String, usize)],
) -> Result<NodeId> {
    let batch = g.value(input).shape()[0];
    let mut x = input;
    for (i, conv) in plan.convs.iter().enumerate() {
        if i > 0 {
            x = g.relu(x);
        }
        let embeds = if i == 0 { input_embeds } else { &[] };
        x = conv_apply(
            g,
            params,
            &format!("{prefix}.{}", conv.rel),
            conv,
            x,
            class_ids,
            embeds,
            batch,
        )?;
    }
    Ok(x)
}

/// Plain conv ResNet: conv_in then pre-activation residual blocks
/// x + c2(relu(c1(relu(x)))). Returns pre-activation features.
pub(crate) fn encoder_forward(
    g: &mut Graph,
    params: &std::collections::BTreeMap<String, Tensor>,
    prefix: &str,
    plan: &EncoderPlan,
    input: NodeId,
    class_ids: Option<&Arc<Vec<usize>>>,
    input_embeds: &[(String, usize)],
) -> Result<NodeId> {
    let batch = g.value(input).shape()[0];
    let mut x = conv_apply(
        g,
        params,
        &format!("{prefix}.{}", plan.conv_in.rel),
        &plan.conv_in,
        input,
        class_ids,
        input_embeds,
        batch,
    )?;
    for (c1, c2) in &plan.blocks {
        let h = g.relu(x);
        let h = conv_apply(
            g,
            params,
            &format!("{prefix}.{}", c1.rel),
            c1,
            h,
            class_ids,
            &[],
            batch,
        )?;
        let h = g.relu(h);
        let h = conv_apply(
            g,
            params,
            &format!("{prefix}.{}", c2.rel),
            c2,
            h,
            class_ids,
            &[],
            batch,
        )?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

/// Spatial conditioning features for one scale: absent conditioning gives
/// zero-filled slots, which contribute exactly nothing through the concat.
pub(crate) fn cond_features(
    g: &mut Graph,
    model: &MultiscaleModel,
    bc: &BatchCond,
    scale: usize,
    h: usize,
    w: usize,
) -> Result<Option<NodeId>> {
    let Some(plan) = &model.cond_plan else {
        return Ok(None);
    };
    let f = model.cfg.cond.encoder_hidden;
    match &bc.spatial {
        None => Ok(Some(g.leaf(Tensor::zeros(vec![bc.batch, f, h, w]), false))),
        Some(maps) => {
            let cc = model.cfg.cond.spatial_channels.expect("declared");
            let mut data = Vec::with_capacity(bc.batch * cc * h * w);
            for m in maps {
                let resized = bilinear_resize(m, h, w)?;
                data.extend_from_slice(resized.data());
            }
            let input = g.leaf(Tensor::new(vec![bc.batch, cc, h, w], data)?, false);
            let feats = encoder_forward(
                g,
                &model.params,
                &format!("cond{scale}"),
                plan,
                input,
                bc.class_ids.as_ref(),
                &[],
            )?;
            Ok(Some(g.relu(feats)))
        }
    }
}

/// [B, C, h, w] normalized intensities from a batch of same-shaped images.
pub(crate) fn normalized_batch(images: &[&Image], levels: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::dim("empty image batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::dim("image batch must be homogeneous"));
        }
        for &v in img.data() {
            data.push(Image::normalize_level(v, levels));
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Base PixelCNN logits, [B, C*K, h0, w0]. The input node is a normalized
/// [B, C, h0, w0] batch.
pub(crate) fn base_logits_node(
    g: &mut Graph,
    model: &MultiscaleModel,
    base_norm: NodeId,
    bc: &BatchCond,
) -> Result<NodeId> {
    let sh = g.value(base_norm).shape().to_vec();
    if sh
        != [
            bc.batch,
            model.cfg.channels(),
            model.cfg.base_h,
            model.cfg.base_w,
        ]
    {
        return Err(Error::dim(format!(
            "base pass input {sh:?} does not match base dims"
        )));
    }
    let mut input = base_norm;
    if let Some(f) = cond_features(g, model, bc, 0, model.cfg.base_h, model.cfg.base_w)? {
        input = g.concat(&[input, f])?;
    }
    pixelcnn_forward(
        g,
        &model.params,
        "base",
        &model.base_plan,
        input,
        bc.class_ids.as_ref(),
        &[],
    )
}

/// Flat-baseline logits at target resolution, [B, C*K, H, W].
pub(crate) fn flat_logits_node(g: &mut Graph, model: &FlatModel, input: NodeId) -> Result<NodeId> {
    pixelcnn_forward(g, &model.params, "flat", &model.plan, input, None, &[])
}

/// Independent-baseline logits, [1, C*K, H, W]; shared across the batch.
pub(crate) fn independent_logits_node(g: &mut Graph, model: &IndependentModel) -> Result<NodeId> {
    let t = model
        .params
        .get(IndependentModel::TABLE)
        .ok_or_else(|| Error::Checkpoint("missing logits table".into()))?;
    Ok(g.param(IndependentModel::TABLE, t))
}

/// One batch item's context for an upscaler pass at some scale.
pub(crate) struct CtxItem<'a> {
    /// The scale-(s-1) image (group 1).
    pub ul: &'a Image,
    pub ur: Option<&'a Image>,
    pub ll: Option<&'a Image>,
    /// Target corner source for the TypeA channel prefix (channels < chan).
    pub target: Option<&'a Image>,
}

fn corner_index(corner: Corner) -> usize {
    match corner {
        Corner::Ur => 0,
        Corner::Ll => 1,
        Corner::Lr => 2,
        Corner::Ul => panic!("UL is never predicted"),
    }
}

pub(crate) fn upscaler_prefix(cfg: &ModelConfig, scale: usize, corner: Corner) -> String {
    if cfg.upscaler.separate_corner_weights {
        format!("up{scale}.{}", corner.to_string().to_lowercase())
    } else {
        format!("up{scale}")
    }
}

/// Assemble the context tensor for an upscaler pass: slots UL, UR, LL
/// (zero-filled when not yet generated), plus for TypeA the target corner's
/// channel prefix. Shape [B, 3C, h, w] or [B, 4C, h, w].
pub(crate) fn assemble_context(
    items: &[CtxItem],
    levels: usize,
    chan: usize,
    with_prefix_slot: bool,
) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::dim("empty batch"))?;
    let (c, h, w) = (first.ul.channels, first.ul.height, first.ul.width);
    let slots = if with_prefix_slot { 4 } else { 3 };
    let plane = h * w;
    let mut data = vec![0.0; items.len() * slots * c * plane];
    for (bi, item) in items.iter().enumerate() {
        let mut write_slot = |slot: usize, img: Option<&Image>, upto_chan: usize| -> Result<()> {
            let Some(img) = img else { return Ok(()) };
            if (img.channels, img.height, img.width) != (c, h, w) {
                return Err(Error::dim(format!(
                    "context slot {slot}: image {}x{}x{} does not match {c}x{h}x{w}",
                    img.channels, img.height, img.width
                )));
            }
            for ci in 0..upto_chan.min(c) {
                for i in 0..plane {
                    data[((bi * slots + slot) * c + ci) * plane + i] =
                        Image::normalize_level(img.data()[ci * plane + i], levels);
                }
            }
            Ok(())
        };
        write_slot(0, Some(item.ul), c)?;
        write_slot(1, item.ur, c)?;
        write_slot(2, item.ll, c)?;
        if with_prefix_slot {
            write_slot(3, item.target, chan)?;
        }
    }
    Tensor::new(vec![items.len(), slots * c, h, w], data)
}

/// The upscaler's context evaluation at (scale, corner): for TypeA this is
/// the full network and yields the predicted channel's logits
/// [B, K, h, w]; for TypeB it yields encoder features [B, F, h, w] for the
/// shallow PixelCNN.
pub(crate) fn upscaler_context_node(
    g: &mut Graph,
    model: &MultiscaleModel,
    scale: usize,
    corner: Corner,
    ctx: NodeId,
    chan: usize,
    bc: &BatchCond,
) -> Result<NodeId> {
    let cfg = &model.cfg;
    let (gh, gw) = model.schedule.corner_dims(scale);
    let prefix = upscaler_prefix(cfg, scale, corner);
    let mut input = ctx;
    if let Some(f) = cond_features(g, model, bc, scale, gh, gw)? {
        input = g.concat(&[input, f])?;
    }
    let mut embeds = Vec::new();
    if !cfg.upscaler.separate_corner_weights {
        embeds.push((format!("{prefix}.in.corner"), corner_index(corner)));
        if cfg.upscaler.kind == UpscalerKind::TypeA {
            embeds.push((format!("{prefix}.in.chan"), chan));
        }
    }
    let feats = encoder_forward(
        g,
        &model.params,
        &prefix,
        &model.up_plan.encoder,
        input,
        bc.class_ids.as_ref(),
        &embeds,
    )?;
    match cfg.upscaler.kind {
        UpscalerKind::TypeA => {
            let head = model.up_plan.head.as_ref().expect("TypeA has a head");
            let h = g.relu(feats);
            let batch = bc.batch;
            conv_apply(
                g,
                &model.params,
                &format!("{prefix}.{}", head.rel),
                head,
                h,
                None,
                &[],
                batch,
            )
        }
        UpscalerKind::TypeB => Ok(g.relu(feats)),
    }
}

/// TypeB shallow PixelCNN over contiguous MxM patches of the encoder
/// features, batched across patches. `patch_pixels` is [B*P, C, M, M]
/// normalized target-corner pixels (causally masked inside).
/// Returns [B*P, C*K, M, M] logits.
pub(crate) fn shallow_logits_node(
    g: &mut Graph,
    model: &MultiscaleModel,
    scale: usize,
    corner: Corner,
    features: NodeId,
    patch_pixels: NodeId,
    bc: &BatchCond,
) -> Result<NodeId> {
    let cfg = &model.cfg;
    let m = cfg.upscaler.patch;
    let plan = model
        .up_plan
        .shallow
        .as_ref()
        .ok_or_else(|| Error::Config("shallow pass on a TypeA upscaler".into()))?;
    let fpatches = g.patch_split(features, m)?;
    let patches = g.value(fpatches).shape()[0];
    let per_item = patches / bc.batch;
    let input = g.concat(&[patch_pixels, fpatches])?;
    let prefix = format!("{}.sh", upscaler_prefix(cfg, scale, corner));
    let class_ids = bc.class_ids.as_ref().map(|ids| {
        Arc::new(
            ids.iter()
                .flat_map(|&i| std::iter::repeat_n(i, per_item))
                .collect::<Vec<_>>(),
        )
    });
    let embeds = if cfg.upscaler.separate_corner_weights {
        vec![]
    } else {
        vec![(format!("{prefix}.l0.corner"), corner_index(corner))]
    };
    pixelcnn_forward(
        g,
        &model.params,
        &prefix,
        plan,
        input,
        class_ids.as_ref(),
        &embeds,
    )
}

/// Patch-major rearrangement of a corner image: [B*P, C, M, M] normalized.
pub(crate) fn corner_patches(images: &[&Image], m: usize, levels: usize) -> Result<Tensor> {
    let batch = normalized_batch(images, levels)?;
    crate::tensor::patch_split_tensor(&batch, m)
}

// ---------------------------------------------------------------------------
// Public single-image ops.
// ---------------------------------------------------------------------------

/// All previously generated corners available as context for a corner
/// prediction; `ul` is the previous scale's full image.
pub struct KnownCorners<'a> {
    pub ul: &'a Image,
    pub ur: Option<&'a Image>,
    pub ll: Option<&'a Image>,
}

/// Base PixelCNN logits for every pixel/channel, as [h0, w0, C, K].
pub fn base_logits(model: &MultiscaleModel, image: &Image, cond: &Conditioning) -> Result<Tensor> {
    let cfg = &model.cfg;
    if (image.height, image.width, image.channels) != (cfg.base_h, cfg.base_w, cfg.channels()) {
        return Err(Error::dim(format!(
            "base_logits: image {}x{}x{} does not match base {}x{}x{}",
            image.channels,
            image.height,
            image.width,
            cfg.channels(),
            cfg.base_h,
            cfg.base_w
        )));
    }
    let bc = resolve_cond(cfg, &[cond])?;
    let mut g = Graph::new();
    let input = normalized_batch(&[image], cfg.levels())?;
    let input = g.leaf(input, false);
    let node = base_logits_node(&mut g, model, input, &bc)?;
    Ok(reorder_hwck(g.value(node), cfg.channels(), cfg.levels()))
}

/// Upscaler logits for the next channel of one corner, as [h, w, K].
/// `partial_target` carries the already-sampled channels (< `chan`) of the
/// target corner; for TypeB it also carries already-sampled pixels, and
/// masking guarantees later entries cannot matter.
pub fn upscaler_logits(
    model: &MultiscaleModel,
    scale: usize,
    corner: Corner,
    known: &KnownCorners,
    cond: &Conditioning,
    partial_target: &Image,
    chan: usize,
) -> Result<Tensor> {
    let cfg = &model.cfg;
    if scale == 0 || scale > model.schedule.scales {
        return Err(Error::geometry(format!("no upscaler at scale {scale}")));
    }
    let needs_ur = matches!(corner, Corner::Ll | Corner::Lr);
    let needs_ll = matches!(corner, Corner::Lr);
    if corner == Corner::Ul {
        return Err(Error::geometry("UL is never predicted"));
    }
    if needs_ur && known.ur.is_none() || needs_ll && known.ll.is_none() {
        return Err(Error::geometry(format!(
            "missing prerequisite corner for {corner} at scale {scale}"
        )));
    }
    if chan >= cfg.channels() {
        return Err(Error::Index(format!("channel {chan} out of range")));
    }
    let bc = resolve_cond(cfg, &[cond])?;
    let mut g = Graph::new();
    let item = CtxItem {
        ul: known.ul,
        ur: known.ur,
        ll: known.ll,
        target: Some(partial_target),
    };
    match cfg.upscaler.kind {
        UpscalerKind::TypeA => {
            let ctx = assemble_context(&[item], cfg.levels(), chan, true)?;
            let ctx = g.leaf(ctx, false);
            let node = upscaler_context_node(&mut g, model, scale, corner, ctx, chan, &bc)?;
            let v = g.value(node); // [1, K, h, w]
            let (k, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
            let mut out = Tensor::zeros(vec![h, w, k]);
            for r in 0..h {
                for c in 0..w {
                    for ki in 0..k {
                        out.data_mut()[(r * w + c) * k + ki] = v.at4(0, ki, r, c);
                    }
                }
            }
            Ok(out)
        }
        UpscalerKind::TypeB => {
            let ctx = assemble_context(&[item], cfg.levels(), 0, false)?;
            let ctx = g.leaf(ctx, false);
            let feats = upscaler_context_node(&mut g, model, scale, corner, ctx, 0, &bc)?;
            let m = cfg.upscaler.patch;
            let pix = corner_patches(&[partial_target], m, cfg.levels())?;
            let pix = g.leaf(pix, false);
            let node = shallow_logits_node(&mut g, model, scale, corner, feats, pix, &bc)?;
            let v = g.value(node); // [P, C*K, m, m]
            let (gh, gw) = model.schedule.corner_dims(scale);
            let (ph, pw) = (gh / m, gw / m);
            let k = cfg.levels();
            let mut out = Tensor::zeros(vec![gh, gw, k]);
            for pr in 0..ph {
                for pc in 0..pw {
                    let p = pr * pw + pc;
                    for rr in 0..m {
                        for cc in 0..m {
                            for ki in 0..k {
                                let (r, c) = (pr * m + rr, pc * m + cc);
                                out.data_mut()[(r * gw + c) * k + ki] =
                                    v.at4(p, chan * k + ki, rr, cc);
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// [1, C*K, h, w] conv output reordered to the public [h, w, C, K] layout.
pub(crate) fn reorder_hwck(v: &Tensor, c: usize, k: usize) -> Tensor {
    let (h, w) = (v.shape()[2], v.shape()[3]);
    let mut out = Tensor::zeros(vec![h, w, c, k]);
    for r in 0..h {
        for col in 0..w {
            for ci in 0..c {
                for ki in 0..k {
                    out.data_mut()[((r * w + col) * c + ci) * k + ki] =
                        v.at4(0, ci * k + ki, r, col);
                }
            }
        }
    }
    out
}
