//! Synthetic dataset generators with known entropy, plus minimal image and
//! dataset I/O. The families stand in for full-scale datasets at desk
//! scale: each is a finite latent (pattern) mixture with independent
//! per-subpixel replacement noise, so its entropy has a closed form, and
//! on enumerable spaces the field is computed exactly from the mixture.
//!
//! Cells are anchored at the origin and the random phase is the color
//! flip bit, so every latent stays identifiable from the sub-sampling
//! pyramid's coarse images. Translational phases would be invisible to
//! the coarse scales, putting a large share of the entropy into
//! within-group dependencies that a grouped factorization deliberately
//! does not model.

pub mod netpbm;

pub use netpbm::{read_image, write_image};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::Conditioning;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    CheckerboardNoise,
    GradientRamp,
    TwoClassTextures,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::CheckerboardNoise => "checkerboard_noise",
            Family::GradientRamp => "gradient_ramp",
            Family::TwoClassTextures => "two_class_textures",
        }
    }

    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "checkerboard_noise" => Ok(Family::CheckerboardNoise),
            "gradient_ramp" => Ok(Family::GradientRamp),
            "two_class_textures" => Ok(Family::TwoClassTextures),
            _ => Err(Error::Config(format!("unknown synthetic family {s}"))),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Family::TwoClassTextures => Some(2),
            _ => None,
        }
    }
}

/// A synthetic family instance; `entropy_per_subpixel` is filled in from
/// the family's definition on construction (exactly, by enumeration, when
/// the image space is enumerable; otherwise from the closed form).
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub family: Family,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    /// Per-subpixel replacement probability.
    pub noise: f64,
    pub seed: u64,
    pub entropy_per_subpixel: f64,
}

/// -e*ln(e) - (1-e)*ln(1-e), the binary entropy in nats.
pub fn binary_entropy(e: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(e) + term(1.0 - e)
}

/// Conditional entropy per subpixel of the replacement-noise channel:
/// keep with probability 1-e, otherwise uniform over the other K-1 levels.
pub fn noise_entropy(e: f64, levels: usize) -> f64 {
    binary_entropy(e) + e * ((levels - 1) as f64).ln()
}

/// One latent: its class (for conditional families), its probability
/// within the class, and the clean pattern it paints.
struct Latent {
    class: Option<usize>,
    weight: f64,
    pattern: Image,
}

fn paint<F: Fn(usize, usize) -> u16>(c: usize, h: usize, w: usize, f: F) -> Image {
    let mut img = Image::zeros(c, h, w);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                img.set(ch, r, col, f(r, col));
            }
        }
    }
    img
}

fn checkerboard_latents(
    c: usize,
    h: usize,
    w: usize,
    levels: usize,
    sizes: &[usize],
    class: Option<usize>,
) -> Vec<Latent> {
    let hi = (levels - 1) as u16;
    let mut out = Vec::new();
    for &s in sizes {
        for flip in 0..2usize {
            out.push(Latent {
                class,
                weight: 1.0 / (sizes.len() * 2) as f64,
                pattern: paint(c, h, w, |r, col| {
                    (((r / s + col / s + flip) % 2) as u16) * hi
                }),
            });
        }
    }
    out
}

fn stripe_latents(
    c: usize,
    h: usize,
    w: usize,
    levels: usize,
    sizes: &[usize],
    class: Option<usize>,
) -> Vec<Latent> {
    let hi = (levels - 1) as u16;
    let mut out = Vec::new();
    for &s in sizes {
        for flip in 0..2usize {
            out.push(Latent {
                class,
                weight: 1.0 / (sizes.len() * 2) as f64,
                pattern: paint(c, h, w, |r, _| (((r / s + flip) % 2) as u16) * hi),
            });
        }
    }
    out
}

fn family_latents(spec: &SyntheticSpec) -> Vec<Latent> {
    let (c, h, w, k) = (spec.channels, spec.height, spec.width, spec.levels);
    match spec.family {
        Family::CheckerboardNoise => checkerboard_latents(c, h, w, k, &[1, 2, 4], None),
        Family::GradientRamp => {
            let mut out = Vec::new();
            for orient in 0..2usize {
                for offset in 0..k {
                    out.push(Latent {
                        class: None,
                        weight: 1.0 / (2 * k) as f64,
                        pattern: paint(c, h, w, |r, col| {
                            let coord = if orient == 0 { col } else { r };
                            ((offset + coord) % k) as u16
                        }),
                    });
                }
            }
            out
        }
        Family::TwoClassTextures => {
            let mut out = checkerboard_latents(c, h, w, k, &[1, 2], Some(0));
            out.extend(stripe_latents(c, h, w, k, &[1, 2], Some(1)));
            // Class marginal is uniform; weights stay conditional on class.
            out
        }
    }
}

/// P(observed level | pattern level) under the replacement noise.
fn noise_prob(observed: u16, pattern: u16, e: f64, levels: usize) -> f64 {
    if observed == pattern {
        1.0 - e
    } else {
        e / (levels - 1) as f64
    }
}

fn class_marginals(latents: &[Latent]) -> Vec<(Option<usize>, f64)> {
    let mut classes: Vec<Option<usize>> = latents.iter().map(|l| l.class).collect();
    classes.dedup();
    classes.sort();
    classes.dedup();
    let p = 1.0 / classes.len() as f64;
    classes.into_iter().map(|c| (c, p)).collect()
}

/// Entropy per subpixel of the image distribution (conditional on the
/// class for class-conditional families).
fn entropy_per_subpixel(spec: &SyntheticSpec) -> f64 {
    let latents = family_latents(spec);
    let n = spec.channels * spec.height * spec.width;
    let classes = class_marginals(&latents);
    let enumerable = {
        let mut total = 1usize;
        let mut ok = true;
        for _ in 0..n {
            match total.checked_mul(spec.levels).filter(|&t| t <= 1 << 16) {
                Some(t) => total = t,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        ok
    };
    let mut h_total = 0.0;
    for (class, pc) in &classes {
        let members: Vec<&Latent> = latents.iter().filter(|l| l.class == *class).collect();
        let h_class = if enumerable {
            // Exact: enumerate the image space, mix latents and noise.
            let count = spec.levels.pow(n as u32);
            let mut h = 0.0;
            let enum_spec = crate::oracle::EnumSpec {
                channels: spec.channels,
                height: spec.height,
                width: spec.width,
                levels: spec.levels,
            };
            for idx in 0..count {
                let img = enum_spec.image_at(idx);
                let mut p = 0.0;
                for l in &members {
                    let mut q = l.weight;
                    for (o, pt) in img.data().iter().zip(l.pattern.data()) {
                        q *= noise_prob(*o, *pt, spec.noise, spec.levels);
                    }
                    p += q;
                }
                if p > 0.0 {
                    h -= p * p.ln();
                }
            }
            h
        } else {
            // Closed form: pattern-distribution entropy (latents that paint
            // the same pattern merge) plus the per-subpixel noise term.
            let mut by_pattern: BTreeMap<&[u16], f64> = BTreeMap::new();
            for l in &members {
                *by_pattern.entry(l.pattern.data()).or_insert(0.0) += l.weight;
            }
            let h_pattern: f64 = by_pattern
                .values()
                .map(|&w| if w > 0.0 { -w * w.ln() } else { 0.0 })
                .sum();
            h_pattern + n as f64 * noise_entropy(spec.noise, spec.levels)
        };
        h_total += pc * h_class;
    }
    h_total / n as f64
}

impl SyntheticSpec {
    pub fn new(
        family: Family,
        channels: usize,
        height: usize,
        width: usize,
        levels: usize,
        noise: f64,
        seed: u64,
    ) -> Result<SyntheticSpec> {
        if !(0.0..=0.5).contains(&noise) {
            return Err(Error::Config(format!(
                "noise probability {noise} outside [0, 0.5]"
            )));
        }
        if levels < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 levels".into(),
            ));
        }
        let mut spec = SyntheticSpec {
            family,
            channels,
            height,
            width,
            levels,
            noise,
            seed,
            entropy_per_subpixel: 0.0,
        };
        spec.entropy_per_subpixel = entropy_per_subpixel(&spec);
        Ok(spec)
    }

    /// Deterministically draw item `index`.
    pub fn item(&self, index: usize) -> (Image, Conditioning) {
        let latents = family_latents(self);
        let classes = class_marginals(&latents);
        let i = index as u64;
        let (class, _) = classes[rng::stream_index(self.seed, &[0xDA, i, 0], classes.len())];
        let members: Vec<&Latent> = latents.iter().filter(|l| l.class == class).collect();
        let u = rng::stream_unit(self.seed, &[0xDA, i, 1]);
        let weights: Vec<f64> = members.iter().map(|l| l.weight).collect();
        let latent = members[rng::categorical(&weights, u)];
        let mut img = latent.pattern.clone();
        if self.noise > 0.0 {
            for sp in 0..img.data().len() {
                if rng::stream_unit(self.seed, &[0xDB, i, sp as u64, 0]) < self.noise {
                    let j = rng::stream_index(self.seed, &[0xDB, i, sp as u64, 1], self.levels - 1);
                    let v = img.data()[sp];
                    img.data_mut()[sp] = ((v as usize + 1 + j) % self.levels) as u16;
                }
            }
        }
        let cond = match class {
            Some(id) => Conditioning::class(id),
            None => Conditioning::none(),
        };
        (img, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub path: String,
    pub class_id: Option<usize>,
    pub split: Split,
}

#[derive(Debug, Clone)]
enum DataSource {
    Synthetic {
        spec: SyntheticSpec,
        count: usize,
    },
    Directory {
        root: PathBuf,
        entries: Vec<ManifestEntry>,
        levels: usize,
    },
}

/// A deterministic, split-stable dataset. Iteration regenerates synthetic
/// items (or re-reads files) on demand: memory is constant in dataset size.
#[derive(Debug, Clone)]
pub struct Dataset {
    source: DataSource,
    fractions: (f64, f64, f64),
}

/// Split membership of synthetic item `index`: a seed-keyed hash, so
/// membership is stable across runs and splits are disjoint.
fn split_of(seed: u64, index: usize, fractions: (f64, f64, f64)) -> Split {
    let u = rng::stream_unit(seed, &[0x5117, index as u64]);
    if u < fractions.0 {
        Split::Train
    } else if u < fractions.0 + fractions.1 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Build a synthetic dataset of `count` items.
pub fn generate(spec: SyntheticSpec, count: usize, fractions: (f64, f64, f64)) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let sum = fractions.0 + fractions.1 + fractions.2;
    if !(0.999..=1.001).contains(&sum)
        || fractions.0 < 0.0
        || fractions.1 < 0.0
        || fractions.2 < 0.0
    {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    Ok(Dataset {
        source: DataSource::Synthetic { spec, count },
        fractions,
    })
}

/// Open a dataset directory: images plus a `manifest.txt` with one
/// `path class_id split` record per line (class_id `-` when absent).
pub fn open_directory(root: &Path, levels: usize) -> Result<Dataset> {
    let text = std::fs::read_to_string(root.join("manifest.txt"))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (path, class_s, split_s) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(Error::Parse {
                    offset: lineno + 1,
                    msg: format!("manifest line {} wants `path class_id split`", lineno + 1),
                })
            }
        };
        let class_id = if class_s == "-" {
            None
        } else {
            Some(class_s.parse().map_err(|_| Error::Parse {
                offset: lineno + 1,
                msg: format!("bad class id {class_s}"),
            })?)
        };
        entries.push(ManifestEntry {
            path: path.to_string(),
            class_id,
            split: Split::parse(split_s)?,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset {
        source: DataSource::Directory {
            root: root.to_path_buf(),
            entries,
            levels,
        },
        fractions: (0.0, 0.0, 0.0),
    })
}

impl Dataset {
    pub fn synthetic_spec(&self) -> Option<&SyntheticSpec> {
        match &self.source {
            DataSource::Synthetic { spec, .. } => Some(spec),
            DataSource::Directory { .. } => None,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        match &self.source {
            DataSource::Synthetic { spec, count } => (0..*count)
                .filter(|&i| split_of(spec.seed, i, self.fractions) == split)
                .collect(),
            DataSource::Directory { entries, .. } => entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.split == split)
                .map(|(i, _)| i)
                .collect(),
        }
    }

    pub fn len(&self, split: Split) -> usize {
        self.indices(split).len()
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    pub fn get(&self, index: usize) -> Result<(Image, Conditioning)> {
        match &self.source {
            DataSource::Synthetic { spec, count } => {
                if index >= *count {
                    return Err(Error::Index(format!("item {index} out of {count}")));
                }
                Ok(spec.item(index))
            }
            DataSource::Directory {
                root,
                entries,
                levels,
            } => {
                let e = entries
                    .get(index)
                    .ok_or_else(|| Error::Index(format!("item {index}")))?;
                let img = netpbm::read_image(&root.join(&e.path), Some(*levels))?;
                let cond = match e.class_id {
                    Some(id) => Conditioning::class(id),
                    None => Conditioning::none(),
                };
                Ok((img, cond))
            }
        }
    }

    pub fn iter(&self, split: Split) -> impl Iterator<Item = Result<(Image, Conditioning)>> + '_ {
        self.indices(split).into_iter().map(move |i| self.get(i))
    }
}
