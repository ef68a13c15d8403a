//! Forward/backward compute kernels behind the graph ops.
//!
//! Convolution is the optimized path; the test suite cross-checks it
//! against a naive loop-nest reference. Accumulation order per output
//! element is fixed (cin, kh, kw), so results are bit-identical for any
//! rayon thread count.

#![allow(clippy::needless_range_loop)] // coordinate loops index several parallel structures

use rayon::prelude::*;

use super::{Padding, Tensor};
use crate::error::{Error, Result};

pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
) -> Result<ConvDims> {
    let (ish, ksh) = (input.shape(), kernel.shape());
    if ish.len() != 4 || ksh.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d wants rank-4 input and kernel, got {ish:?} and {ksh:?}"
        )));
    }
    let (batch, cin, h, w) = (ish[0], ish[1], ish[2], ish[3]);
    let (cout, kcin, kh, kw) = (ksh[0], ksh[1], ksh[2], ksh[3]);
    if cin != kcin {
        return Err(Error::dim(format!(
            "conv2d input has {cin} channels but kernel expects {kcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv2d bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    let (ph, pw, oh, ow) = match padding {
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::dim(format!(
                    "same padding requires odd kernel dims, got {kh}x{kw}"
                )));
            }
            ((kh - 1) / 2, (kw - 1) / 2, h, w)
        }
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::dim(format!(
                    "valid conv: input {h}x{w} smaller than kernel {kh}x{kw}"
                )));
            }
            (0, 0, h - kh + 1, w - kw + 1)
        }
    };
    Ok(ConvDims {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ph,
        pw,
        oh,
        ow,
    })
}

/// kernel ⊙ mask, or a plain copy when no mask is given.
pub(crate) fn effective_kernel(kernel: &Tensor, mask: Option<&Tensor>) -> Vec<f64> {
    match mask {
        None => kernel.data().to_vec(),
        Some(m) => kernel
            .data()
            .iter()
            .zip(m.data())
            .map(|(k, m)| k * m)
            .collect(),
    }
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    eff_kernel: &[f64],
    bias: &Tensor,
    d: &ConvDims,
) -> Tensor {
    let mut out = Tensor::zeros(vec![d.batch, d.cout, d.oh, d.ow]);
    let plane = d.oh * d.ow;
    let in_plane = d.h * d.w;
    let x = input.data();
    let b = bias.data();
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(bc, o)| {
            let (bi, co) = (bc / d.cout, bc % d.cout);
            o.fill(b[co]);
            let xb = &x[bi * d.cin * in_plane..(bi + 1) * d.cin * in_plane];
            for ci in 0..d.cin {
                let xp = &xb[ci * in_plane..(ci + 1) * in_plane];
                let kbase = ((co * d.cin) + ci) * d.kh * d.kw;
                for khi in 0..d.kh {
                    for kwi in 0..d.kw {
                        let kval = eff_kernel[kbase + khi * d.kw + kwi];
                        if kval == 0.0 {
                            continue;
                        }
                        // out[oh][ow] += kval * x[oh+khi-ph][ow+kwi-pw]
                        let oh_lo = d.ph.saturating_sub(khi);
                        let oh_hi = (d.h + d.ph - khi).min(d.oh);
                        let ow_lo = d.pw.saturating_sub(kwi);
                        let ow_hi = (d.w + d.pw - kwi).min(d.ow);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + khi - d.ph;
                            let orow = &mut o[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                            let xrow =
                                &xp[ih * d.w + ow_lo + kwi - d.pw..ih * d.w + ow_hi + kwi - d.pw];
                            for (ov, xv) in orow.iter_mut().zip(xrow) {
                                *ov += kval * xv;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient w.r.t. the conv input.
pub(crate) fn conv2d_backward_input(gout: &Tensor, eff_kernel: &[f64], d: &ConvDims) -> Tensor {
    let mut gin = Tensor::zeros(vec![d.batch, d.cin, d.h, d.w]);
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let g = gout.data();
    gin.data_mut()
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(bc, gi)| {
            let (bi, ci) = (bc / d.cin, bc % d.cin);
            let gb = &g[bi * d.cout * out_plane..(bi + 1) * d.cout * out_plane];
            for co in 0..d.cout {
                let gp = &gb[co * out_plane..(co + 1) * out_plane];
                let kbase = ((co * d.cin) + ci) * d.kh * d.kw;
                for khi in 0..d.kh {
                    for kwi in 0..d.kw {
                        let kval = eff_kernel[kbase + khi * d.kw + kwi];
                        if kval == 0.0 {
                            continue;
                        }
                        // gin[oh+khi-ph][ow+kwi-pw] += kval * gout[oh][ow]
                        let oh_lo = d.ph.saturating_sub(khi);
                        let oh_hi = (d.h + d.ph - khi).min(d.oh);
                        let ow_lo = d.pw.saturating_sub(kwi);
                        let ow_hi = (d.w + d.pw - kwi).min(d.ow);
                        for oh in oh_lo..oh_hi {
                            let ih = oh + khi - d.ph;
                            let grow = &gp[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                            let iw0 = ow_lo + kwi - d.pw;
                            let irow = &mut gi[ih * d.w + iw0..ih * d.w + iw0 + (ow_hi - ow_lo)];
                            for (iv, gv) in irow.iter_mut().zip(grow) {
                                *iv += kval * gv;
                            }
                        }
                    }
                }
            }
        });
    gin
}

/// Gradient w.r.t. the kernel; masked entries come out exactly 0.0.
pub(crate) fn conv2d_backward_kernel(
    input: &Tensor,
    gout: &Tensor,
    mask: Option<&Tensor>,
    d: &ConvDims,
) -> Tensor {
    let mut gk = Tensor::zeros(vec![d.cout, d.cin, d.kh, d.kw]);
    let in_plane = d.h * d.w;
    let out_plane = d.oh * d.ow;
    let x = input.data();
    let g = gout.data();
    let ktail = d.cin * d.kh * d.kw;
    gk.data_mut()
        .par_chunks_mut(ktail)
        .enumerate()
        .for_each(|(co, gkc)| {
            for ci in 0..d.cin {
                for khi in 0..d.kh {
                    for kwi in 0..d.kw {
                        let mut acc = 0.0;
                        for bi in 0..d.batch {
                            let gp = &g[(bi * d.cout + co) * out_plane
                                ..(bi * d.cout + co + 1) * out_plane];
                            let xp =
                                &x[(bi * d.cin + ci) * in_plane..(bi * d.cin + ci + 1) * in_plane];
                            let oh_lo = d.ph.saturating_sub(khi);
                            let oh_hi = (d.h + d.ph - khi).min(d.oh);
                            let ow_lo = d.pw.saturating_sub(kwi);
                            let ow_hi = (d.w + d.pw - kwi).min(d.ow);
                            for oh in oh_lo..oh_hi {
                                let ih = oh + khi - d.ph;
                                let grow = &gp[oh * d.ow + ow_lo..oh * d.ow + ow_hi];
                                let iw0 = ow_lo + kwi - d.pw;
                                let xrow = &xp[ih * d.w + iw0..ih * d.w + iw0 + (ow_hi - ow_lo)];
                                for (gv, xv) in grow.iter().zip(xrow) {
                                    acc += gv * xv;
                                }
                            }
                        }
                        gkc[(ci * d.kh + khi) * d.kw + kwi] = acc;
                    }
                }
            }
        });
    if let Some(m) = mask {
        for (gv, mv) in gk.data_mut().iter_mut().zip(m.data()) {
            *gv *= mv;
        }
    }
    gk
}

pub(crate) fn conv2d_backward_bias(gout: &Tensor, d: &ConvDims) -> Tensor {
    let mut gb = Tensor::zeros(vec![d.cout]);
    let out_plane = d.oh * d.ow;
    let g = gout.data();
    for co in 0..d.cout {
        let mut acc = 0.0;
        for bi in 0..d.batch {
            let gp = &g[(bi * d.cout + co) * out_plane..(bi * d.cout + co + 1) * out_plane];
            for v in gp {
                acc += v;
            }
        }
        gb.data_mut()[co] = acc;
    }
    gb
}

/// Stabilized log(sum(exp(logits))) over one row.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Prediction-row addressing for cross-entropy. Rank-2 logits are
/// [rows, K] with contiguous rows; rank-4 logits are [B, G*K, H, W] where
/// the K values of prediction (b, g, r, c) sit at channel stride H*W and
/// targets/per-item follow [B, G, H, W] order.
pub(crate) struct XentLayout {
    pub rows: usize,
    pub k_stride: usize,
    pub per_item_shape: Vec<usize>,
    bases: XentBases,
}

enum XentBases {
    Contiguous { levels: usize },
    Strided { g: usize, hw: usize, gk: usize },
}

impl XentLayout {
    pub fn of(shape: &[usize], levels: usize) -> Result<XentLayout> {
        match shape {
            [rows, k] if *k == levels => Ok(XentLayout {
                rows: *rows,
                k_stride: 1,
                per_item_shape: vec![*rows],
                bases: XentBases::Contiguous { levels },
            }),
            [b, gk, h, w] if gk % levels == 0 => {
                let g = gk / levels;
                Ok(XentLayout {
                    rows: b * g * h * w,
                    k_stride: h * w,
                    per_item_shape: vec![*b, g, *h, *w],
                    bases: XentBases::Strided {
                        g,
                        hw: h * w,
                        gk: *gk,
                    },
                })
            }
            _ => Err(Error::dim(format!(
                "xent: logits shape {shape:?} incompatible with {levels} levels"
            ))),
        }
    }

    /// Flat offset of (row, k=0) in the logits buffer.
    pub fn base(&self, row: usize) -> usize {
        match self.bases {
            XentBases::Contiguous { levels } => row * levels,
            XentBases::Strided { g, hw, gk } => {
                let pos = row % hw;
                let gi = (row / hw) % g;
                let bi = row / (hw * g);
                // levels = gk / g
                (bi * gk + gi * (gk / g)) * hw + pos
            }
        }
    }
}

fn gather_row(data: &[f64], base: usize, stride: usize, levels: usize, buf: &mut [f64]) {
    for (k, v) in buf.iter_mut().enumerate().take(levels) {
        *v = data[base + k * stride];
    }
}

/// Per-prediction negative log-likelihood: lse(row) - row[target].
pub(crate) fn xent_forward(logits: &Tensor, levels: usize, targets: &[u16]) -> Result<Tensor> {
    let layout = XentLayout::of(logits.shape(), levels)?;
    if targets.len() != layout.rows {
        return Err(Error::dim(format!(
            "xent: {} targets for {} prediction rows",
            targets.len(),
            layout.rows
        )));
    }
    let mut out = vec![0.0; layout.rows];
    let mut row = vec![0.0; levels];
    for (r, o) in out.iter_mut().enumerate() {
        let t = targets[r] as usize;
        if t >= levels {
            return Err(Error::Index(format!(
                "xent target {t} out of range [0, {levels}) at row {r}"
            )));
        }
        gather_row(
            logits.data(),
            layout.base(r),
            layout.k_stride,
            levels,
            &mut row,
        );
        *o = log_sum_exp(&row) - row[t];
    }
    Tensor::new(layout.per_item_shape.clone(), out)
}

/// d per_item[r] / d logits[r, k] = softmax_k - onehot(target), scaled by
/// the upstream gradient of per_item[r].
pub(crate) fn xent_backward(
    logits: &Tensor,
    levels: usize,
    targets: &[u16],
    gout: &Tensor,
) -> Tensor {
    let layout = XentLayout::of(logits.shape(), levels).expect("layout checked in forward");
    let mut g = Tensor::zeros(logits.shape().to_vec());
    let mut row = vec![0.0; levels];
    for r in 0..layout.rows {
        gather_row(
            logits.data(),
            layout.base(r),
            layout.k_stride,
            levels,
            &mut row,
        );
        let up = gout.data()[r];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let base = layout.base(r);
        for k in 0..levels {
            let sm = (row[k] - m).exp() / denom;
            g.data_mut()[base + k * layout.k_stride] =
                up * (sm - if k == targets[r] as usize { 1.0 } else { 0.0 });
        }
    }
    g
}

/// [B, C, H, W] -> [B*(H/m)*(W/m), C, m, m], contiguous patches in row-major
/// patch order. Exact inverse exists (pure permutation).
pub(crate) fn patch_split_forward(x: &Tensor, m: usize) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(Error::dim("patch_split wants rank-4 input"));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if h % m != 0 || w % m != 0 {
        return Err(Error::dim(format!(
            "patch_split: {h}x{w} not divisible into {m}x{m} patches"
        )));
    }
    let (ph, pw) = (h / m, w / m);
    let mut out = Tensor::zeros(vec![b * ph * pw, c, m, m]);
    for bi in 0..b {
        for pr in 0..ph {
            for pc in 0..pw {
                let p = (bi * ph + pr) * pw + pc;
                for ci in 0..c {
                    for rr in 0..m {
                        for cc in 0..m {
                            let v = x.at4(bi, ci, pr * m + rr, pc * m + cc);
                            let o = out.idx4(p, ci, rr, cc);
                            out.data_mut()[o] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn patch_split_backward(g: &Tensor, m: usize, in_shape: &[usize]) -> Tensor {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ph, pw) = (h / m, w / m);
    let mut out = Tensor::zeros(in_shape.to_vec());
    for bi in 0..b {
        for pr in 0..ph {
            for pc in 0..pw {
                let p = (bi * ph + pr) * pw + pc;
                for ci in 0..c {
                    for rr in 0..m {
                        for cc in 0..m {
                            let o = out.idx4(bi, ci, pr * m + rr, pc * m + cc);
                            out.data_mut()[o] = g.at4(p, ci, rr, cc);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear resize of a [C, H, W] map (align-corners). Plain data op used to
/// bring conditioning maps to a scale's dims before the per-scale encoder.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 3 {
        return Err(Error::dim("bilinear_resize wants rank-3 [C,H,W]"));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(Error::dim("bilinear_resize: empty dims"));
    }
    let mut out = Tensor::zeros(vec![c, oh, ow]);
    let fy = if oh > 1 {
        (h - 1) as f64 / (oh - 1) as f64
    } else {
        0.0
    };
    let fx = if ow > 1 {
        (w - 1) as f64 / (ow - 1) as f64
    } else {
        0.0
    };
    for ci in 0..c {
        for r in 0..oh {
            let sy = r as f64 * fy;
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let dy = sy - y0 as f64;
            for cc in 0..ow {
                let sx = cc as f64 * fx;
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let dx = sx - x0 as f64;
                let v00 = x.data()[(ci * h + y0) * w + x0];
                let v01 = x.data()[(ci * h + y0) * w + x1];
                let v10 = x.data()[(ci * h + y1) * w + x0];
                let v11 = x.data()[(ci * h + y1) * w + x1];
                let top = v00 + (v01 - v00) * dx;
                let bot = v10 + (v11 - v10) * dx;
                out.data_mut()[(ci * oh + r) * ow + cc] = top + (bot - top) * dy;
            }
        }
    }
    Ok(out)
}
