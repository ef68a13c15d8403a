//! Run configuration: flat INI-style sections with key=value lines.
//!
//! Parsing is strict (unknown sections or keys are rejected) and
//! serialization is canonical (fixed key order, shortest-round-trip float
//! formatting), so parse -> serialize -> parse is a fixed point.

use pyrpix_core::data::{Family, SyntheticSpec};
use pyrpix_core::network::{CondConfig, ModelConfig, PixelCnnConfig, UpscalerConfig, UpscalerKind};
use pyrpix_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Multiscale,
    Flat,
    Independent,
}

impl Arch {
    fn name(&self) -> &'static str {
        match self {
            Arch::Multiscale => "multiscale",
            Arch::Flat => "flat",
            Arch::Independent => "independent",
        }
    }

    fn parse(s: &str) -> Result<Arch> {
        match s {
            "multiscale" => Ok(Arch::Multiscale),
            "flat" => Ok(Arch::Flat),
            "independent" => Ok(Arch::Independent),
            _ => Err(Error::Config(format!("unknown arch {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub arch: Arch,
    pub base_h: usize,
    pub base_w: usize,
    pub target_h: usize,
    pub target_w: usize,
    pub upscaler: UpscalerKind,
    pub resnet_layers: usize,
    pub pixelcnn_layers: usize,
    pub hidden: usize,
    pub shallow_hidden: usize,
    pub patch: usize,
    pub kernel: usize,
    pub first_kernel: usize,
    pub levels: usize,
    pub channels: usize,
    /// 0 disables class conditioning.
    pub num_classes: usize,
    /// 0 disables spatial conditioning.
    pub cond_channels: usize,
    pub cond_encoder_layers: usize,
    pub cond_encoder_hidden: usize,
    pub separate_corner_weights: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Arch::Multiscale,
            base_h: 4,
            base_w: 4,
            target_h: 32,
            target_w: 32,
            upscaler: UpscalerKind::TypeA,
            resnet_layers: 4,
            pixelcnn_layers: 3,
            hidden: 32,
            shallow_hidden: 32,
            patch: 4,
            kernel: 3,
            first_kernel: 7,
            levels: 4,
            channels: 1,
            num_classes: 0,
            cond_channels: 0,
            cond_encoder_layers: 1,
            cond_encoder_hidden: 8,
            separate_corner_weights: false,
        }
    }
}

/// Desk-scale defaults: batch 16, thousands of steps, lr 1e-3 decaying to
/// 1e-4. (The full-scale regime — batch 128, 200k steps, lr 1e-4 to 1e-5 —
/// is documented in configs/paper.ini as a preset.)
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_steps: Vec<usize>,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    /// Random aligned crop of larger data images down to the model's
    /// target dims (off by default).
    pub random_crop: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch: 16,
            steps: 5000,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_decay_steps: vec![4000],
            rmsprop_decay: 0.95,
            rmsprop_eps: 1e-8,
            eval_interval: 250,
            checkpoint_interval: 1000,
            random_crop: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    /// Synthetic family, or a dataset directory with a manifest.
    pub family: Option<Family>,
    pub dir: Option<String>,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub count: usize,
    pub seed: u64,
    pub split: (f64, f64, f64),
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            family: Some(Family::CheckerboardNoise),
            dir: None,
            height: 0,
            width: 0,
            noise: 0.1,
            count: 4096,
            seed: 7,
            split: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSection {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub run: RunSection,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean for {key}: {v}"))),
    }
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            match name {
                "model" | "train" | "data" | "run" => section = name.to_string(),
                _ => return Err(Error::Config(format!("unknown section [{name}]"))),
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected key=value, got `{line}`",
                lineno + 1
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match section.as_str() {
            "model" => {
                let m = &mut cfg.model;
                match key {
                    "arch" => m.arch = Arch::parse(value)?,
                    "base_h" => m.base_h = parse_num(key, value)?,
                    "base_w" => m.base_w = parse_num(key, value)?,
                    "target_h" => m.target_h = parse_num(key, value)?,
                    "target_w" => m.target_w = parse_num(key, value)?,
                    "upscaler" => {
                        m.upscaler = match value {
                            "type_a" => UpscalerKind::TypeA,
                            "type_b" => UpscalerKind::TypeB,
                            _ => return Err(Error::Config(format!("unknown upscaler {value}"))),
                        }
                    }
                    "resnet_layers" => m.resnet_layers = parse_num(key, value)?,
                    "pixelcnn_layers" => m.pixelcnn_layers = parse_num(key, value)?,
                    "hidden" => m.hidden = parse_num(key, value)?,
                    "shallow_hidden" => m.shallow_hidden = parse_num(key, value)?,
                    "patch" => m.patch = parse_num(key, value)?,
                    "kernel" => m.kernel = parse_num(key, value)?,
                    "first_kernel" => m.first_kernel = parse_num(key, value)?,
                    "levels" => m.levels = parse_num(key, value)?,
                    "channels" => m.channels = parse_num(key, value)?,
                    "num_classes" => m.num_classes = parse_num(key, value)?,
                    "cond_channels" => m.cond_channels = parse_num(key, value)?,
                    "cond_encoder_layers" => m.cond_encoder_layers = parse_num(key, value)?,
                    "cond_encoder_hidden" => m.cond_encoder_hidden = parse_num(key, value)?,
                    "separate_corner_weights" => {
                        m.separate_corner_weights = parse_bool(key, value)?
                    }
                    _ => return Err(Error::Config(format!("unknown key model.{key}"))),
                }
            }
            "train" => {
                let t = &mut cfg.train;
                match key {
                    "batch" => t.batch = parse_num(key, value)?,
                    "steps" => t.steps = parse_num(key, value)?,
                    "lr" => t.lr = parse_num(key, value)?,
                    "lr_decay" => t.lr_decay = parse_num(key, value)?,
                    "lr_decay_steps" => {
                        t.lr_decay_steps = if value.is_empty() {
                            vec![]
                        } else {
                            value
                                .split(',')
                                .map(|v| parse_num(key, v.trim()))
                                .collect::<Result<_>>()?
                        }
                    }
                    "rmsprop_decay" => t.rmsprop_decay = parse_num(key, value)?,
                    "rmsprop_eps" => t.rmsprop_eps = parse_num(key, value)?,
                    "eval_interval" => t.eval_interval = parse_num(key, value)?,
                    "checkpoint_interval" => t.checkpoint_interval = parse_num(key, value)?,
                    "random_crop" => t.random_crop = parse_bool(key, value)?,
                    _ => return Err(Error::Config(format!("unknown key train.{key}"))),
                }
            }
            "data" => {
                let d = &mut cfg.data;
                match key {
                    "family" => {
                        d.family = if value.is_empty() {
                            None
                        } else {
                            Some(Family::parse(value)?)
                        }
                    }
                    "dir" => d.dir = (!value.is_empty()).then(|| value.to_string()),
                    "height" => d.height = parse_num(key, value)?,
                    "width" => d.width = parse_num(key, value)?,
                    "noise" => d.noise = parse_num(key, value)?,
                    "count" => d.count = parse_num(key, value)?,
                    "seed" => d.seed = parse_num(key, value)?,
                    "split" => {
                        let parts: Vec<f64> = value
                            .split(',')
                            .map(|v| parse_num(key, v.trim()))
                            .collect::<Result<_>>()?;
                        if parts.len() != 3 {
                            return Err(Error::Config("split wants three fractions".into()));
                        }
                        d.split = (parts[0], parts[1], parts[2]);
                    }
                    _ => return Err(Error::Config(format!("unknown key data.{key}"))),
                }
            }
            "run" => match key {
                "seed" => cfg.run.seed = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("unknown key run.{key}"))),
            },
            _ => {
                return Err(Error::Config(format!(
                    "key {key} before any [section] header"
                )))
            }
        }
    }
    Ok(cfg)
}

pub fn serialize(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let d = &cfg.data;
    let mut out = String::new();
    out.push_str("[model]\n");
    out.push_str(&format!("arch={}\n", m.arch.name()));
    out.push_str(&format!("base_h={}\n", m.base_h));
    out.push_str(&format!("base_w={}\n", m.base_w));
    out.push_str(&format!("target_h={}\n", m.target_h));
    out.push_str(&format!("target_w={}\n", m.target_w));
    out.push_str(&format!(
        "upscaler={}\n",
        match m.upscaler {
            UpscalerKind::TypeA => "type_a",
            UpscalerKind::TypeB => "type_b",
        }
    ));
    out.push_str(&format!("resnet_layers={}\n", m.resnet_layers));
    out.push_str(&format!("pixelcnn_layers={}\n", m.pixelcnn_layers));
    out.push_str(&format!("hidden={}\n", m.hidden));
    out.push_str(&format!("shallow_hidden={}\n", m.shallow_hidden));
    out.push_str(&format!("patch={}\n", m.patch));
    out.push_str(&format!("kernel={}\n", m.kernel));
    out.push_str(&format!("first_kernel={}\n", m.first_kernel));
    out.push_str(&format!("levels={}\n", m.levels));
    out.push_str(&format!("channels={}\n", m.channels));
    out.push_str(&format!("num_classes={}\n", m.num_classes));
    out.push_str(&format!("cond_channels={}\n", m.cond_channels));
    out.push_str(&format!("cond_encoder_layers={}\n", m.cond_encoder_layers));
    out.push_str(&format!("cond_encoder_hidden={}\n", m.cond_encoder_hidden));
    out.push_str(&format!(
        "separate_corner_weights={}\n",
        m.separate_corner_weights
    ));
    out.push_str("\n[train]\n");
    out.push_str(&format!("batch={}\n", t.batch));
    out.push_str(&format!("steps={}\n", t.steps));
    out.push_str(&format!("lr={}\n", t.lr));
    out.push_str(&format!("lr_decay={}\n", t.lr_decay));
    out.push_str(&format!(
        "lr_decay_steps={}\n",
        t.lr_decay_steps
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    ));
    out.push_str(&format!("rmsprop_decay={}\n", t.rmsprop_decay));
    out.push_str(&format!("rmsprop_eps={}\n", t.rmsprop_eps));
    out.push_str(&format!("eval_interval={}\n", t.eval_interval));
    out.push_str(&format!("checkpoint_interval={}\n", t.checkpoint_interval));
    out.push_str(&format!("random_crop={}\n", t.random_crop));
    out.push_str("\n[data]\n");
    out.push_str(&format!(
        "family={}\n",
        d.family.map(|f| f.name()).unwrap_or("")
    ));
    out.push_str(&format!("dir={}\n", d.dir.as_deref().unwrap_or("")));
    out.push_str(&format!("height={}\n", d.height));
    out.push_str(&format!("width={}\n", d.width));
    out.push_str(&format!("noise={}\n", d.noise));
    out.push_str(&format!("count={}\n", d.count));
    out.push_str(&format!("seed={}\n", d.seed));
    out.push_str(&format!(
        "split={},{},{}\n",
        d.split.0, d.split.1, d.split.2
    ));
    out.push_str("\n[run]\n");
    out.push_str(&format!("seed={}\n", cfg.run.seed));
    out
}

impl RunConfig {
    /// Core model config derived from the model section.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let (base_h, base_w) = match m.arch {
            // Flat and independent baselines have no pyramid; the schedule
            // degenerates to the target itself.
            Arch::Flat | Arch::Independent => (m.target_h, m.target_w),
            Arch::Multiscale => (m.base_h, m.base_w),
        };
        ModelConfig {
            base_h,
            base_w,
            target_h: m.target_h,
            target_w: m.target_w,
            pixelcnn: PixelCnnConfig {
                layers: m.pixelcnn_layers,
                hidden: m.hidden,
                kernel: m.kernel,
                first_kernel: m.first_kernel,
                levels: m.levels,
                channels: m.channels,
            },
            upscaler: UpscalerConfig {
                kind: m.upscaler,
                resnet_layers: m.resnet_layers,
                hidden: m.hidden,
                patch: m.patch,
                shallow_layers: m.pixelcnn_layers.max(1),
                shallow_hidden: m.shallow_hidden,
                levels: m.levels,
                channels: m.channels,
                separate_corner_weights: m.separate_corner_weights,
            },
            cond: CondConfig {
                num_classes: (m.num_classes > 0).then_some(m.num_classes),
                spatial_channels: (m.cond_channels > 0).then_some(m.cond_channels),
                encoder_layers: m.cond_encoder_layers,
                encoder_hidden: m.cond_encoder_hidden,
            },
        }
    }

    /// Data image dims (default: model target dims).
    pub fn data_dims(&self) -> (usize, usize) {
        let h = if self.data.height > 0 {
            self.data.height
        } else {
            self.model.target_h
        };
        let w = if self.data.width > 0 {
            self.data.width
        } else {
            self.model.target_w
        };
        (h, w)
    }

    pub fn synthetic_spec(&self) -> Result<Option<SyntheticSpec>> {
        match (self.data.family, &self.data.dir) {
            (_, Some(_)) => Ok(None),
            (Some(family), None) => {
                let (h, w) = self.data_dims();
                Ok(Some(SyntheticSpec::new(
                    family,
                    self.model.channels,
                    h,
                    w,
                    self.model.levels,
                    self.data.noise,
                    self.data.seed,
                )?))
            }
            (None, None) => Err(Error::Config(
                "data section needs either a family or a dir".into(),
            )),
        }
    }

    pub fn dataset(&self) -> Result<pyrpix_core::data::Dataset> {
        match &self.data.dir {
            Some(dir) => {
                pyrpix_core::data::open_directory(std::path::Path::new(dir), self.model.levels)
            }
            None => {
                let spec = self
                    .synthetic_spec()?
                    .expect("family present when dir absent");
                pyrpix_core::data::generate(spec, self.data.count, self.data.split)
            }
        }
    }

    pub fn build_model(&self, seed: u64) -> Result<pyrpix_core::network::Model> {
        let core = self.model_config();
        Ok(match self.model.arch {
            Arch::Multiscale => pyrpix_core::network::Model::Multiscale(
                pyrpix_core::network::init_params(&core, seed)?,
            ),
            Arch::Flat => {
                pyrpix_core::network::Model::Flat(pyrpix_core::network::init_flat(&core, seed)?)
            }
            Arch::Independent => pyrpix_core::network::Model::Independent(
                pyrpix_core::network::init_independent(&core)?,
            ),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_parse_is_a_fixed_point() {
        let mut cfg = RunConfig::default();
        cfg.model.levels = 16;
        cfg.train.lr = 3.5e-4;
        cfg.train.lr_decay_steps = vec![100, 250];
        cfg.data.noise = 0.125;
        let s1 = serialize(&cfg);
        let c1 = parse(&s1).unwrap();
        assert_eq!(c1, cfg);
        let s2 = serialize(&c1);
        assert_eq!(s1, s2, "serialization must be canonical");
        let c2 = parse(&s2).unwrap();
        assert_eq!(c2, c1);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(parse("[model]\nwat=1\n").is_err());
        assert!(parse("[nope]\n").is_err());
        assert!(parse("orphan=1\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_fine() {
        let cfg = parse("# hello\n[model]\n\nlevels=8\n# bye\n").unwrap();
        assert_eq!(cfg.model.levels, 8);
    }

    #[test]
    fn model_config_builds_and_validates() {
        let mut cfg = RunConfig::default();
        cfg.model.target_h = 16;
        cfg.model.target_w = 16;
        let core = cfg.model_config();
        assert!(core.validate().is_ok());
        assert!(cfg.build_model(1).is_ok());
    }

    #[test]
    fn flat_arch_uses_target_as_base() {
        let mut cfg = RunConfig::default();
        cfg.model.arch = Arch::Flat;
        cfg.model.target_h = 8;
        cfg.model.target_w = 8;
        let core = cfg.model_config();
        assert_eq!((core.base_h, core.base_w), (8, 8));
    }
}
