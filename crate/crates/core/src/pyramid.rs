//! Pixel-group geometry: the sub-sampling pyramid, corner parity classes,
//! and the split/merge marshalling ops. None of this carries parameters;
//! everything is a pure function of coordinates.
//!
//! At each scale the image is tiled with 2x2 blocks. The upper-left
//! corners ARE the previous scale's image (sub-sampling keeps the UL
//! pixel), so only UR, LL, LR are ever generated, in that order.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Corner {
    Ul,
    Ur,
    Ll,
    Lr,
}

impl Corner {
    /// (row, col) offset within a 2x2 block.
    pub fn offset(self) -> (usize, usize) {
        match self {
            Corner::Ul => (0, 0),
            Corner::Ur => (0, 1),
            Corner::Ll => (1, 0),
            Corner::Lr => (1, 1),
        }
    }

    pub fn of_parity(r: usize, c: usize) -> Corner {
        match (r % 2, c % 2) {
            (0, 0) => Corner::Ul,
            (0, 1) => Corner::Ur,
            (1, 0) => Corner::Ll,
            _ => Corner::Lr,
        }
    }

    /// Generation order within a scale (UL is never generated).
    pub const GENERATED: [Corner; 3] = [Corner::Ur, Corner::Ll, Corner::Lr];
}

impl fmt::Display for Corner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Corner::Ul => "UL",
            Corner::Ur => "UR",
            Corner::Ll => "LL",
            Corner::Lr => "LR",
        })
    }
}

/// One step of the generation schedule: the base image, or one corner
/// group at a scale (scale 1 is the first doubling above the base).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupId {
    Base,
    Corner { scale: usize, corner: Corner },
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Base => f.write_str("base"),
            GroupId::Corner { scale, corner } => write!(f, "s{scale}:{corner}"),
        }
    }
}

/// The ordered pixel groups for a (base, target) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSchedule {
    pub base_h: usize,
    pub base_w: usize,
    pub target_h: usize,
    pub target_w: usize,
    /// Number of upscaling steps; target = base * 2^scales.
    pub scales: usize,
}

/// Schedule construction. Both axes must share one power-of-two ratio >= 1.
pub fn build_schedule(base: (usize, usize), target: (usize, usize)) -> Result<GroupSchedule> {
    let (bh, bw) = base;
    let (th, tw) = target;
    if bh == 0 || bw == 0 {
        return Err(Error::geometry("base dims must be positive"));
    }
    let ratio_of = |b: usize, t: usize| -> Option<usize> {
        if !t.is_multiple_of(b) {
            return None;
        }
        let r = t / b;
        r.is_power_of_two().then(|| r.trailing_zeros() as usize)
    };
    let (sh, sw) = (ratio_of(bh, th), ratio_of(bw, tw));
    match (sh, sw) {
        (Some(a), Some(b)) if a == b => Ok(GroupSchedule {
            base_h: bh,
            base_w: bw,
            target_h: th,
            target_w: tw,
            scales: a,
        }),
        _ => Err(Error::geometry(format!(
            "target {th}x{tw} is not base {bh}x{bw} times one power of two in both axes"
        ))),
    }
}

impl GroupSchedule {
    /// Image dims at scale s (s = 0 is the base).
    pub fn dims_at(&self, scale: usize) -> (usize, usize) {
        (self.base_h << scale, self.base_w << scale)
    }

    /// Corner-grid dims at scale s >= 1 (half the scale-s image).
    pub fn corner_dims(&self, scale: usize) -> (usize, usize) {
        let (h, w) = self.dims_at(scale);
        (h / 2, w / 2)
    }

    /// base, then (1,UR),(1,LL),(1,LR), ..., (S,LR). Length 1 + 3*scales.
    pub fn steps(&self) -> Vec<GroupId> {
        let mut steps = vec![GroupId::Base];
        for scale in 1..=self.scales {
            for corner in Corner::GENERATED {
                steps.push(GroupId::Corner { scale, corner });
            }
        }
        steps
    }

    /// Index of a group in the step order.
    pub fn step_index(&self, group: GroupId) -> usize {
        match group {
            GroupId::Base => 0,
            GroupId::Corner { scale, corner } => {
                let c = match corner {
                    Corner::Ur => 0,
                    Corner::Ll => 1,
                    Corner::Lr => 2,
                    Corner::Ul => panic!("UL is never a generated step"),
                };
                1 + (scale - 1) * 3 + c
            }
        }
    }

    /// Map a scale-s pixel to target coordinates (sub-sampling keeps UL, so
    /// scale-s (r, c) is target (r, c) * 2^(S-s)).
    pub fn to_target(&self, scale: usize, r: usize, c: usize) -> (usize, usize) {
        let f = self.scales - scale;
        (r << f, c << f)
    }

    /// The step that introduces target pixel (r, c).
    pub fn introducing_step(&self, r: usize, c: usize) -> GroupId {
        let tz = |v: usize| -> usize {
            if v == 0 {
                usize::MAX
            } else {
                v.trailing_zeros() as usize
            }
        };
        let k = tz(r).min(tz(c));
        if k >= self.scales {
            return GroupId::Base;
        }
        let scale = self.scales - k;
        let (sr, sc) = (r >> k, c >> k);
        GroupId::Corner {
            scale,
            corner: Corner::of_parity(sr, sc),
        }
    }

    /// Target coordinates of a group's pixels, in row-major order of its
    /// own grid. For the base group this is the base image's pixels.
    pub fn group_pixels(&self, group: GroupId) -> Vec<(usize, usize)> {
        match group {
            GroupId::Base => {
                let mut out = Vec::with_capacity(self.base_h * self.base_w);
                for r in 0..self.base_h {
                    for c in 0..self.base_w {
                        out.push(self.to_target(0, r, c));
                    }
                }
                out
            }
            GroupId::Corner { scale, corner } => {
                let (gh, gw) = self.corner_dims(scale);
                let (dr, dc) = corner.offset();
                let mut out = Vec::with_capacity(gh * gw);
                for r in 0..gh {
                    for c in 0..gw {
                        out.push(self.to_target(scale, 2 * r + dr, 2 * c + dc));
                    }
                }
                out
            }
        }
    }

    /// Extract a corner's pixels from a scale-s image into a dense tensor.
    pub fn split(&self, image: &Image, scale: usize, corner: Corner) -> Result<Image> {
        let (h, w) = self.dims_at(scale);
        if (image.height, image.width) != (h, w) {
            return Err(Error::geometry(format!(
                "split: image {}x{} does not match scale {scale} dims {h}x{w}",
                image.height, image.width
            )));
        }
        Ok(split_corner(image, corner))
    }

    /// The pyramid of sub-sampled images, coarse to fine; element s has the
    /// dims of scale s, and the last element is the input itself.
    pub fn pyramid(&self, target: &Image) -> Result<Vec<Image>> {
        if (target.height, target.width) != (self.target_h, self.target_w) {
            return Err(Error::geometry(format!(
                "pyramid: image {}x{} does not match target {}x{}",
                target.height, target.width, self.target_h, self.target_w
            )));
        }
        let mut levels = vec![target.clone()];
        for _ in 0..self.scales {
            let next = subsample(levels.last().expect("nonempty"))?;
            levels.push(next);
        }
        levels.reverse();
        Ok(levels)
    }
}

/// Keep the UL pixel of every 2x2 block, halving both dims. The result IS
/// group 1 of the next scale; no re-quantization ever happens.
pub fn subsample(image: &Image) -> Result<Image> {
    if !image.height.is_multiple_of(2) || !image.width.is_multiple_of(2) {
        return Err(Error::geometry(format!(
            "subsample wants even dims, got {}x{}",
            image.height, image.width
        )));
    }
    let (h, w) = (image.height / 2, image.width / 2);
    let mut out = Image::zeros(image.channels, h, w);
    for c in 0..image.channels {
        for r in 0..h {
            for col in 0..w {
                out.set(c, r, col, image.at(c, 2 * r, 2 * col));
            }
        }
    }
    Ok(out)
}

/// Corner parity class of a full image, as a dense half-size image.
pub fn split_corner(image: &Image, corner: Corner) -> Image {
    let (dr, dc) = corner.offset();
    let (h, w) = (image.height / 2, image.width / 2);
    let mut out = Image::zeros(image.channels, h, w);
    for c in 0..image.channels {
        for r in 0..h {
            for col in 0..w {
                out.set(c, r, col, image.at(c, 2 * r + dr, 2 * col + dc));
            }
        }
    }
    out
}

/// Interleave corner images back into the full layout. Accepts either
/// {UL, UR} (column-wise merge to h x 2w) or all four corners (2h x 2w).
pub fn merge(parts: &[(Corner, &Image)]) -> Result<Image> {
    let find = |corner: Corner| parts.iter().find(|(c, _)| *c == corner).map(|(_, i)| *i);
    let ul = find(Corner::Ul).ok_or_else(|| Error::geometry("merge: missing UL corner"))?;
    let same_dims =
        |img: &Image| (img.channels, img.height, img.width) == (ul.channels, ul.height, ul.width);
    for (c, img) in parts {
        if !same_dims(img) {
            return Err(Error::geometry(format!(
                "merge: corner {c} dims {}x{} mismatch UL {}x{}",
                img.height, img.width, ul.height, ul.width
            )));
        }
    }
    match parts.len() {
        2 => {
            let ur = find(Corner::Ur)
                .ok_or_else(|| Error::geometry("merge of two parts wants UL and UR"))?;
            let mut out = Image::zeros(ul.channels, ul.height, 2 * ul.width);
            for c in 0..ul.channels {
                for r in 0..ul.height {
                    for col in 0..ul.width {
                        out.set(c, r, 2 * col, ul.at(c, r, col));
                        out.set(c, r, 2 * col + 1, ur.at(c, r, col));
                    }
                }
            }
            Ok(out)
        }
        4 => {
            let mut out = Image::zeros(ul.channels, 2 * ul.height, 2 * ul.width);
            for corner in [Corner::Ul, Corner::Ur, Corner::Ll, Corner::Lr] {
                let img = find(corner)
                    .ok_or_else(|| Error::geometry(format!("merge: missing {corner} corner")))?;
                let (dr, dc) = corner.offset();
                for c in 0..img.channels {
                    for r in 0..img.height {
                        for col in 0..img.width {
                            out.set(c, 2 * r + dr, 2 * col + dc, img.at(c, r, col));
                        }
                    }
                }
            }
            Ok(out)
        }
        n => Err(Error::geometry(format!(
            "merge wants 2 (UL,UR) or 4 corners, got {n}"
        ))),
    }
}
