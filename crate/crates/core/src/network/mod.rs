//! The learnable pieces: masked base PixelCNN, type-A / type-B upscaling
//! networks, and conditioning encoders, composed into a MultiscaleModel.
//!
//! Parameter layout is a pure function of the config: every forward pass
//! binds weights by name from one registry, and checkpoints are just that
//! registry serialized. Masks are structural — rebuilt from the config,
//! never stored or trained.

pub mod forward;
mod masks;

pub use forward::{base_logits, upscaler_logits, KnownCorners};
pub use masks::{build_mask, InputRole, MaskType};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pyramid::{build_schedule, Corner, GroupSchedule};
use crate::rng;
use crate::tensor::Tensor;

/// Base-resolution (and flat-baseline) PixelCNN shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelCnnConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Spatial extent of layers after the first.
    pub kernel: usize,
    pub first_kernel: usize,
    /// Output intensity levels K.
    pub levels: usize,
    /// Image channels (1 or 3).
    pub channels: usize,
}

impl Default for PixelCnnConfig {
    fn default() -> Self {
        PixelCnnConfig {
            layers: 4,
            hidden: 32,
            kernel: 3,
            first_kernel: 7,
            levels: 4,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpscalerKind {
    TypeA,
    TypeB,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpscalerConfig {
    pub kind: UpscalerKind,
    pub resnet_layers: usize,
    pub hidden: usize,
    /// Patch side M for type-B.
    pub patch: usize,
    pub shallow_layers: usize,
    pub shallow_hidden: usize,
    pub levels: usize,
    pub channels: usize,
    /// One network per corner instead of a shared one with corner biases.
    pub separate_corner_weights: bool,
}

impl Default for UpscalerConfig {
    fn default() -> Self {
        UpscalerConfig {
            kind: UpscalerKind::TypeA,
            resnet_layers: 4,
            hidden: 32,
            patch: 4,
            shallow_layers: 4,
            shallow_hidden: 32,
            levels: 4,
            channels: 1,
            separate_corner_weights: false,
        }
    }
}

/// Declared conditioning kinds. Absent conditioning at call time reproduces
/// the unconditional outputs exactly (class bias skipped, feature slots
/// zero-filled).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CondConfig {
    pub num_classes: Option<usize>,
    pub spatial_channels: Option<usize>,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_h: usize,
    pub base_w: usize,
    pub target_h: usize,
    pub target_w: usize,
    pub pixelcnn: PixelCnnConfig,
    pub upscaler: UpscalerConfig,
    pub cond: CondConfig,
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.pixelcnn.levels
    }

    pub fn channels(&self) -> usize {
        self.pixelcnn.channels
    }

    pub fn validate(&self) -> Result<GroupSchedule> {
        let schedule = build_schedule((self.base_h, self.base_w), (self.target_h, self.target_w))?;
        let p = &self.pixelcnn;
        let u = &self.upscaler;
        if p.levels != u.levels || p.channels != u.channels {
            return Err(Error::Config(
                "pixelcnn and upscaler disagree on levels/channels".into(),
            ));
        }
        if p.layers < 1 {
            return Err(Error::Config("pixelcnn needs at least one layer".into()));
        }
        if p.levels < 2 || p.levels > u16::MAX as usize + 1 {
            return Err(Error::Config(format!(
                "unsupported level count {}",
                p.levels
            )));
        }
        if p.channels != 1 && p.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                p.channels
            )));
        }
        if p.kernel.is_multiple_of(2) || p.first_kernel.is_multiple_of(2) {
            return Err(Error::Config("pixelcnn kernels must be odd".into()));
        }
        if !p.hidden.is_multiple_of(p.channels) {
            return Err(Error::Config(format!(
                "hidden {} must divide evenly into {} channel groups",
                p.hidden, p.channels
            )));
        }
        if u.kind == UpscalerKind::TypeB {
            if !u.shallow_hidden.is_multiple_of(p.channels) {
                return Err(Error::Config(format!(
                    "shallow hidden {} must divide evenly into {} channel groups",
                    u.shallow_hidden, p.channels
                )));
            }
            for scale in 1..=schedule.scales {
                let (gh, gw) = schedule.corner_dims(scale);
                if gh % u.patch != 0 || gw % u.patch != 0 {
                    return Err(Error::Config(format!(
                        "type-B patch {} does not divide corner dims {gh}x{gw} at scale {scale}",
                        u.patch
                    )));
                }
            }
        }
        if let Some(n) = self.cond.num_classes {
            if n == 0 {
                return Err(Error::Config(
                    "num_classes must be positive when set".into(),
                ));
            }
        }
        if let Some(cc) = self.cond.spatial_channels {
            if cc == 0 || self.cond.encoder_hidden == 0 {
                return Err(Error::Config(
                    "spatial conditioning needs positive channel counts".into(),
                ));
            }
        }
        Ok(schedule)
    }
}

/// One convolution's shape, mask, and init scaling; parameter names are
/// `<prefix>.<rel>.kernel` / `.bias`.
#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    pub rel: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub mask: Option<Arc<Tensor>>,
    pub init_scale: f64,
    /// Gets a per-class bias table when class conditioning is declared.
    pub class_bias: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct PixelCnnPlan {
    /// l0 (mask A), l1.. (mask B), then the 1x1 head.
    pub convs: Vec<ConvPlan>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderPlan {
    pub conv_in: ConvPlan,
    pub blocks: Vec<(ConvPlan, ConvPlan)>,
}

#[derive(Debug, Clone)]
pub(crate) struct UpscalerPlan {
    pub encoder: EncoderPlan,
    /// TypeA: 1x1 hidden -> K logits head.
    pub head: Option<ConvPlan>,
    /// TypeB: shared-weight shallow PixelCNN over MxM feature patches.
    pub shallow: Option<PixelCnnPlan>,
}

fn pixelcnn_plan(cfg: &PixelCnnConfig, context_channels: usize) -> PixelCnnPlan {
    let c = cfg.channels;
    let hidden_groups = masks::block_groups(cfg.hidden, c);
    let mut in_roles: Vec<InputRole> = (0..c).map(InputRole::Causal).collect();
    in_roles.extend(std::iter::repeat_n(InputRole::Context, context_channels));
    let hidden_roles: Vec<InputRole> = hidden_groups
        .iter()
        .map(|&g| InputRole::Causal(g))
        .collect();
    let head_groups: Vec<usize> = (0..c * cfg.levels).map(|i| i / cfg.levels).collect();

    let mut convs = Vec::new();
    convs.push(ConvPlan {
        rel: "l0".into(),
        cin: c + context_channels,
        cout: cfg.hidden,
        k: cfg.first_kernel,
        mask: Some(Arc::new(build_mask(
            MaskType::A,
            &hidden_groups,
            &in_roles,
            cfg.first_kernel,
        ))),
        init_scale: 1.0,
        class_bias: true,
    });
    for i in 1..cfg.layers {
        convs.push(ConvPlan {
            rel: format!("l{i}"),
            cin: cfg.hidden,
            cout: cfg.hidden,
            k: cfg.kernel,
            mask: Some(Arc::new(build_mask(
                MaskType::B,
                &hidden_groups,
                &hidden_roles,
                cfg.kernel,
            ))),
            init_scale: 1.0,
            class_bias: true,
        });
    }
    convs.push(ConvPlan {
        rel: "head".into(),
        cin: cfg.hidden,
        cout: c * cfg.levels,
        k: 1,
        mask: Some(Arc::new(build_mask(
            MaskType::B,
            &head_groups,
            &hidden_roles,
            1,
        ))),
        init_scale: 1.0,
        class_bias: false,
    });
    PixelCnnPlan { convs }
}

fn encoder_plan(cin: usize, hidden: usize, blocks: usize) -> EncoderPlan {
    let block_scale = 1.0 / (2.0 * blocks.max(1) as f64).sqrt();
    let conv_in = ConvPlan {
        rel: "in".into(),
        cin,
        cout: hidden,
        k: 3,
        mask: None,
        init_scale: 1.0,
        class_bias: true,
    };
    let blocks = (0..blocks)
        .map(|j| {
            (
                ConvPlan {
                    rel: format!("b{j}.c1"),
                    cin: hidden,
                    cout: hidden,
                    k: 3,
                    mask: None,
                    init_scale: 1.0,
                    class_bias: true,
                },
                ConvPlan {
                    rel: format!("b{j}.c2"),
                    cin: hidden,
                    cout: hidden,
                    k: 3,
                    mask: None,
                    init_scale: block_scale,
                    class_bias: true,
                },
            )
        })
        .collect();
    EncoderPlan { conv_in, blocks }
}

fn upscaler_plan(cfg: &ModelConfig) -> UpscalerPlan {
    let u = &cfg.upscaler;
    let c = u.channels;
    let cond_f = cfg
        .cond
        .spatial_channels
        .map(|_| cfg.cond.encoder_hidden)
        .unwrap_or(0);
    match u.kind {
        UpscalerKind::TypeA => {
            // Context slots: UL, UR, LL, plus the target corner's sampled
            // channel prefix.
            let cin = 4 * c + cond_f;
            UpscalerPlan {
                encoder: encoder_plan(cin, u.hidden, u.resnet_layers),
                head: Some(ConvPlan {
                    rel: "head".into(),
                    cin: u.hidden,
                    cout: u.levels,
                    k: 1,
                    mask: None,
                    init_scale: 1.0,
                    class_bias: false,
                }),
                shallow: None,
            }
        }
        UpscalerKind::TypeB => {
            let cin = 3 * c + cond_f;
            // Patches are tiny; the shallow net keeps 3x3 taps throughout.
            let shallow_cfg = PixelCnnConfig {
                layers: u.shallow_layers,
                hidden: u.shallow_hidden,
                kernel: 3,
                first_kernel: 3,
                levels: u.levels,
                channels: c,
            };
            UpscalerPlan {
                encoder: encoder_plan(cin, u.hidden, u.resnet_layers),
                head: None,
                shallow: Some(pixelcnn_plan(&shallow_cfg, u.hidden)),
            }
        }
    }
}

/// Class label and/or spatial feature-map context for one example.
#[derive(Debug, Clone, Default)]
pub struct Conditioning {
    pub class_id: Option<usize>,
    /// Raw [Cc, h, w] map; bilinearly resized to each scale's dims before
    /// its per-scale encoder.
    pub spatial: Option<Tensor>,
}

impl Conditioning {
    pub fn none() -> Self {
        Conditioning::default()
    }

    pub fn class(id: usize) -> Self {
        Conditioning {
            class_id: Some(id),
            spatial: None,
        }
    }
}

/// Base PixelCNN plus one upscaler per scale and optional conditioning
/// encoders. Every learnable tensor is registered exactly once by name.
#[derive(Debug, Clone)]
pub struct MultiscaleModel {
    pub cfg: ModelConfig,
    pub schedule: GroupSchedule,
    pub params: BTreeMap<String, Tensor>,
    pub(crate) base_plan: PixelCnnPlan,
    pub(crate) up_plan: UpscalerPlan,
    pub(crate) cond_plan: Option<EncoderPlan>,
}

/// Flat O(N) PixelCNN at the target resolution; the speed/likelihood
/// comparison arm.
#[derive(Debug, Clone)]
pub struct FlatModel {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub(crate) plan: PixelCnnPlan,
}

/// Per-position categorical logits with no dependencies at all; the
/// factorized-independent baseline.
#[derive(Debug, Clone)]
pub struct IndependentModel {
    pub cfg: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

impl IndependentModel {
    pub const TABLE: &'static str = "table";
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Multiscale(MultiscaleModel),
    Flat(FlatModel),
    Independent(IndependentModel),
}

impl Model {
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        match self {
            Model::Multiscale(m) => &m.params,
            Model::Flat(m) => &m.params,
            Model::Independent(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        match self {
            Model::Multiscale(m) => &mut m.params,
            Model::Flat(m) => &mut m.params,
            Model::Independent(m) => &mut m.params,
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        match self {
            Model::Multiscale(m) => &m.cfg,
            Model::Flat(m) => &m.cfg,
            Model::Independent(m) => &m.cfg,
        }
    }
}

fn fnv1a(name: &str) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Fan-in scaled uniform init per output channel: unmasked tap count is
/// the fan-in, bound = sqrt(3/fan), so pre-activation variance is ~1 on
/// unit-variance input. Biases and embedding tables start at zero.
fn init_conv(params: &mut BTreeMap<String, Tensor>, name: &str, plan: &ConvPlan, seed: u64) {
    let kshape = vec![plan.cout, plan.cin, plan.k, plan.k];
    let row = plan.cin * plan.k * plan.k;
    let mut data = vec![0.0; plan.cout * row];
    let kname = format!("{name}.kernel");
    let key = fnv1a(&kname);
    for o in 0..plan.cout {
        let fan: f64 = match &plan.mask {
            Some(m) => m.data()[o * row..(o + 1) * row].iter().sum(),
            None => row as f64,
        };
        if fan == 0.0 {
            continue;
        }
        let bound = (3.0 / fan).sqrt() * plan.init_scale;
        for i in 0..row {
            data[o * row + i] = rng::stream_uniform(seed, &[key, (o * row + i) as u64], bound);
        }
    }
    params.insert(kname, Tensor::new(kshape, data).expect("shape matches"));
    params.insert(format!("{name}.bias"), Tensor::zeros(vec![plan.cout]));
}

struct ParamWalk<'a> {
    cfg: &'a ModelConfig,
    schedule: &'a GroupSchedule,
}

impl<'a> ParamWalk<'a> {
    /// Prefixes of the upscaler network(s) serving one scale.
    fn corner_prefixes(cfg: &ModelConfig, scale: usize) -> Vec<String> {
        if cfg.upscaler.separate_corner_weights {
            Corner::GENERATED
                .iter()
                .map(|c| format!("up{scale}.{}", c.to_string().to_lowercase()))
                .collect()
        } else {
            vec![format!("up{scale}")]
        }
    }

    fn visit_convs(&self, mut f: impl FnMut(String, &ConvPlan)) {
        let base_plan = pixelcnn_plan(
            &self.cfg.pixelcnn,
            self.cfg
                .cond
                .spatial_channels
                .map(|_| self.cfg.cond.encoder_hidden)
                .unwrap_or(0),
        );
        for conv in &base_plan.convs {
            f(format!("base.{}", conv.rel), conv);
        }
        let up = upscaler_plan(self.cfg);
        for scale in 1..=self.schedule.scales {
            for prefix in Self::corner_prefixes(self.cfg, scale) {
                f(
                    format!("{prefix}.{}", up.encoder.conv_in.rel),
                    &up.encoder.conv_in,
                );
                for (c1, c2) in &up.encoder.blocks {
                    f(format!("{prefix}.{}", c1.rel), c1);
                    f(format!("{prefix}.{}", c2.rel), c2);
                }
                if let Some(head) = &up.head {
                    f(format!("{prefix}.{}", head.rel), head);
                }
                if let Some(sh) = &up.shallow {
                    for conv in &sh.convs {
                        f(format!("{prefix}.sh.{}", conv.rel), conv);
                    }
                }
            }
        }
        if let Some(cc) = self.cfg.cond.spatial_channels {
            let enc = encoder_plan(
                cc,
                self.cfg.cond.encoder_hidden,
                self.cfg.cond.encoder_layers,
            );
            for scale in 0..=self.schedule.scales {
                f(format!("cond{scale}.{}", enc.conv_in.rel), &enc.conv_in);
                for (c1, c2) in &enc.blocks {
                    f(format!("cond{scale}.{}", c1.rel), c1);
                    f(format!("cond{scale}.{}", c2.rel), c2);
                }
            }
        }
    }
}

/// Deterministic parameter init for a multiscale model.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<MultiscaleModel> {
    let schedule = cfg.validate()?;
    let mut params = BTreeMap::new();
    let walk = ParamWalk {
        cfg,
        schedule: &schedule,
    };
    walk.visit_convs(|name, plan| {
        init_conv(&mut params, &name, plan, seed);
        if plan.class_bias {
            if let Some(n) = cfg.cond.num_classes {
                params.insert(format!("{name}.class"), Tensor::zeros(vec![n, plan.cout]));
            }
        }
    });
    // Corner identity (and, for TypeA, predicted-channel identity) enter as
    // learned input embeddings when corners share one network.
    if !cfg.upscaler.separate_corner_weights {
        for scale in 1..=schedule.scales {
            params.insert(
                format!("up{scale}.in.corner"),
                Tensor::zeros(vec![3, cfg.upscaler.hidden]),
            );
            if cfg.upscaler.kind == UpscalerKind::TypeA {
                params.insert(
                    format!("up{scale}.in.chan"),
                    Tensor::zeros(vec![cfg.channels(), cfg.upscaler.hidden]),
                );
            }
        }
    }
    if cfg.upscaler.kind == UpscalerKind::TypeB && !cfg.upscaler.separate_corner_weights {
        for scale in 1..=schedule.scales {
            params.insert(
                format!("up{scale}.sh.l0.corner"),
                Tensor::zeros(vec![3, cfg.upscaler.shallow_hidden]),
            );
        }
    }

    let cond_f = cfg
        .cond
        .spatial_channels
        .map(|_| cfg.cond.encoder_hidden)
        .unwrap_or(0);
    Ok(MultiscaleModel {
        base_plan: pixelcnn_plan(&cfg.pixelcnn, cond_f),
        up_plan: upscaler_plan(cfg),
        cond_plan: cfg
            .cond
            .spatial_channels
            .map(|cc| encoder_plan(cc, cfg.cond.encoder_hidden, cfg.cond.encoder_layers)),
        cfg: cfg.clone(),
        schedule,
        params,
    })
}

/// Flat PixelCNN at the target resolution (no pyramid, no upscalers).
pub fn init_flat(cfg: &ModelConfig, seed: u64) -> Result<FlatModel> {
    cfg.validate()?;
    let cond_f = cfg
        .cond
        .spatial_channels
        .map(|_| cfg.cond.encoder_hidden)
        .unwrap_or(0);
    if cond_f != 0 || cfg.cond.num_classes.is_some() {
        return Err(Error::Config("flat baseline is unconditional".into()));
    }
    let plan = pixelcnn_plan(&cfg.pixelcnn, 0);
    let mut params = BTreeMap::new();
    for conv in &plan.convs {
        init_conv(&mut params, &format!("flat.{}", conv.rel), conv, seed);
    }
    Ok(FlatModel {
        cfg: cfg.clone(),
        params,
        plan,
    })
}

/// Per-position logits table, all predictions independent.
pub fn init_independent(cfg: &ModelConfig) -> Result<IndependentModel> {
    cfg.validate()?;
    let (c, k) = (cfg.channels(), cfg.levels());
    let mut params = BTreeMap::new();
    params.insert(
        IndependentModel::TABLE.to_string(),
        Tensor::zeros(vec![1, c * k, cfg.target_h, cfg.target_w]),
    );
    Ok(IndependentModel {
        cfg: cfg.clone(),
        params,
    })
}

impl MultiscaleModel {
    /// Test fixture: expose one forbidden tap in the base PixelCNN's first
    /// layer (the column right of center), and give it a solid weight so
    /// probes have something to see. Returns a description of the fault.
    pub fn inject_mask_fault(&mut self) -> String {
        let conv = &mut self.base_plan.convs[0];
        let k = conv.k;
        let (kr, kc) = ((k - 1) / 2, (k - 1) / 2 + 1);
        let idx = (kr * k) + kc; // out channel 0, in channel 0
        let mask = Arc::make_mut(conv.mask.as_mut().expect("first layer is masked"));
        mask.data_mut()[idx] = 1.0;
        let kernel = self
            .params
            .get_mut("base.l0.kernel")
            .expect("base first-layer kernel");
        kernel.data_mut()[idx] = 0.5;
        format!("base.l0 mask opened at out=0 in=0 tap=({kr},{kc})")
    }
}

#[cfg(test)]
mod tests;
