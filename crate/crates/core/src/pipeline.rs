//! Three-stage assembly: coarse extraction, frequency fusion, refinement.
//!
//! Every stage predicts a residual that is added back to the rainy input, so
//! a model with zeroed heads is the identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{ChannelAttention, HaUnet, HaUnetConfig, UnetKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Routing};
use crate::hdmamba::{HdMambaBlock, HdMambaConfig};
use crate::layers::{Conv, ResConvBlock};
use crate::params::{Init, ParamBuilder, ParamStore, ParamValues};
use crate::real::Real;
use crate::ssm::SsmConfig;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Output heads start small so the untrained model is close to the identity.
pub const HEAD_INIT: Init = Init::FanIn(0.1);

/// Which stages exist, and which block types fill them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    CenetOnly,
    SfnetOnly,
    RnetOnly,
    /// The HDMamba stack in SFNet is replaced by plain residual conv blocks.
    NoHdMamba,
    /// Both HA-UNets are replaced by convolutional UNets of the same shape.
    NoHaUnet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::CenetOnly,
        Variant::SfnetOnly,
        Variant::RnetOnly,
        Variant::Full,
        Variant::NoHdMamba,
        Variant::NoHaUnet,
    ];

    pub fn stages(self) -> [bool; 3] {
        match self {
            Variant::CenetOnly => [true, false, false],
            Variant::SfnetOnly => [false, true, false],
            Variant::RnetOnly => [false, false, true],
            _ => [true, true, true],
        }
    }

    pub fn uses_hdmamba(self) -> bool {
        self != Variant::NoHdMamba
    }

    pub fn uses_ha_unet(self) -> bool {
        self != Variant::NoHaUnet
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::CenetOnly => "cenet-only",
            Variant::SfnetOnly => "sfnet-only",
            Variant::RnetOnly => "rnet-only",
            Variant::NoHdMamba => "no-hdmamba",
            Variant::NoHaUnet => "no-ha-unet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    pub channels: usize,
    pub cenet: HaUnetConfig,
    pub sfnet: HaUnetConfig,
    /// Conv + ReLU layers between the CENet UNet and its head.
    pub cenet_convs: usize,
    pub hdmamba_blocks: usize,
    pub ssm_state: usize,
    pub prompts: usize,
    pub route_classes: usize,
    pub rnet_blocks: usize,
    pub rnet_reduction: usize,
    pub variant: Variant,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let unet = HaUnetConfig::default();
        Self {
            channels: unet.channels,
            cenet: unet,
            sfnet: unet,
            cenet_convs: 2,
            hdmamba_blocks: 4,
            ssm_state: 8,
            prompts: 8,
            route_classes: 4,
            rnet_blocks: 4,
            rnet_reduction: unet.reduction,
            variant: Variant::Full,
        }
    }
}

impl PipelineConfig {
    pub fn tiny() -> Self {
        let unet = HaUnetConfig {
            channels: 8,
            levels: 2,
            blocks: 2,
            window: 4,
            heads: 2,
            reduction: 4,
            ffn_expansion: 2,
        };
        Self {
            channels: 8,
            cenet: unet,
            sfnet: unet,
            cenet_convs: 2,
            hdmamba_blocks: 2,
            ssm_state: 4,
            prompts: 4,
            route_classes: 4,
            rnet_blocks: 2,
            rnet_reduction: 4,
            variant: Variant::Full,
        }
    }

    pub fn small() -> Self {
        Self::default()
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Smallest accepted image side.
    pub fn min_size(&self) -> usize {
        let [c, s, _] = self.variant.stages();
        let mut m = 1;
        if c {
            m = m.max(self.cenet.multiple());
        }
        if s {
            m = m.max(self.sfnet.multiple());
        }
        m
    }

    fn validate(&self) -> Result<()> {
        if self.cenet.channels != self.channels || self.sfnet.channels != self.channels {
            return Err(Error::Invalid(format!(
                "UNet widths {}/{} differ from feature width {}",
                self.cenet.channels, self.sfnet.channels, self.channels
            )));
        }
        if self.channels == 0 {
            return Err(Error::Invalid("feature width must be positive".into()));
        }
        Ok(())
    }
}

/// Restored images per stage; absent stages are `None`.
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    pub stages: [Option<Var>; 3],
}

impl StageOutputs {
    /// Output of the last stage that ran.
    pub fn last(&self) -> Var {
        self.stages
            .iter()
            .rev()
            .flatten()
            .copied()
            .next()
            .expect("a pipeline has at least one stage")
    }
}

fn head<T: Real>(g: &mut Graph<'_, T>, conv: &Conv, rainy: Var, feat: Var) -> Result<Var> {
    let r = conv.forward(g, feat)?;
    g.add(rainy, r)
}

fn unet<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: HaUnetConfig, ha: bool) -> Result<HaUnet> {
    let kind = if ha { UnetKind::Hybrid } else { UnetKind::Conv };
    HaUnet::build(pb, &format!("{prefix}.haunet"), cfg, kind)
}

/// Coarse extraction: shallow conv, HA-UNet, conv layers, residual head.
#[derive(Clone, Debug)]
pub struct CeNet {
    shallow: Conv,
    pub unet: HaUnet,
    convs: Vec<Conv>,
    pub head: Conv,
}

impl CeNet {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: &PipelineConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            shallow: Conv::build(pb, &format!("{prefix}.shallow"), 3, c, 3, true)?,
            unet: unet(pb, prefix, cfg.cenet, cfg.variant.uses_ha_unet())?,
            convs: (0..cfg.cenet_convs)
                .map(|i| Conv::build(pb, &format!("{prefix}.conv{i}"), c, c, 3, true))
                .collect::<Result<_>>()?,
            head: Conv::build_with(pb, &format!("{prefix}.head"), c, 3, 3, true, HEAD_INIT)?,
        })
    }

    /// Returns `(X1, features1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, rainy: Var) -> Result<(Var, Var)> {
        let f = self.shallow.forward(g, rainy)?;
        let u = self.unet.forward(g, f)?;
        let mut f = g.add(f, u)?;
        for conv in &self.convs {
            let y = conv.forward(g, f)?;
            f = g.relu(y);
        }
        Ok((head(g, &self.head, rainy, f)?, f))
    }
}

#[derive(Clone, Debug)]
enum Mixer {
    HdMamba(HdMambaBlock),
    Conv(ResConvBlock),
}

/// Frequency fusion: shallow conv fused with CENet features, HA-UNet,
/// HDMamba stack, residual head.
#[derive(Clone, Debug)]
pub struct SfNet {
    shallow: Conv,
    fuse: Option<Conv>,
    pub unet: HaUnet,
    mixers: Vec<Mixer>,
    pub head: Conv,
}

impl SfNet {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: &PipelineConfig, guided: bool) -> Result<Self> {
        let c = cfg.channels;
        let shallow = Conv::build(pb, &format!("{prefix}.shallow"), 3, c, 3, true)?;
        let fuse = if guided {
            Some(Conv::build(pb, &format!("{prefix}.fuse"), 2 * c, c, 1, true)?)
        } else {
            None
        };
        let unet = unet(pb, prefix, cfg.sfnet, cfg.variant.uses_ha_unet())?;
        let hd = HdMambaConfig {
            ssm: SsmConfig {
                channels: c,
                state: cfg.ssm_state,
                prompts: cfg.prompts,
            },
            classes: cfg.route_classes,
        };
        let mixers = (0..cfg.hdmamba_blocks)
            .map(|i| {
                if cfg.variant.uses_hdmamba() {
                    HdMambaBlock::build(pb, &format!("{prefix}.hdmamba{i}"), hd).map(Mixer::HdMamba)
                } else {
                    ResConvBlock::build(pb, &format!("{prefix}.convblock{i}"), c).map(Mixer::Conv)
                }
            })
            .collect::<Result<_>>()?;
        let head = Conv::build_with(pb, &format!("{prefix}.head"), c, 3, 3, true, HEAD_INIT)?;
        Ok(Self {
            shallow,
            fuse,
            unet,
            mixers,
            head,
        })
    }

    /// Returns `(X2, features2)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, rainy: Var, guide: Option<Var>) -> Result<(Var, Var)> {
        let f = self.shallow.forward(g, rainy)?;
        let f = fuse_guide(g, self.fuse.as_ref(), f, guide)?;
        let u = self.unet.forward(g, f)?;
        let mut f = g.add(f, u)?;
        for m in &self.mixers {
            f = match m {
                Mixer::HdMamba(b) => b.forward(g, f)?,
                Mixer::Conv(b) => b.forward(g, f)?,
            };
        }
        Ok((head(g, &self.head, rainy, f)?, f))
    }
}

fn fuse_guide<T: Real>(g: &mut Graph<'_, T>, fuse: Option<&Conv>, f: Var, guide: Option<Var>) -> Result<Var> {
    match (fuse, guide) {
        (Some(conv), Some(guide)) => {
            if g.shape(guide) != g.shape(f) {
                return Err(Error::shape(
                    "stage_fuse",
                    format!("guide {:?} does not match features {:?}", g.shape(guide), g.shape(f)),
                ));
            }
            let cat = g.concat(&[f, guide], 1)?;
            conv.forward(g, cat)
        }
        (None, None) => Ok(f),
        (Some(_), None) => Err(Error::Invalid("guided stage called without guide features".into())),
        (None, Some(_)) => Err(Error::Invalid("unguided stage given guide features".into())),
    }
}

/// Refinement at full resolution: shallow conv fused with SFNet features,
/// channel-attention blocks and a conv with a skip, residual head.
#[derive(Clone, Debug)]
pub struct RNet {
    shallow: Conv,
    fuse: Option<Conv>,
    blocks: Vec<ChannelAttention>,
    tail: Conv,
    pub head: Conv,
}

impl RNet {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: &PipelineConfig, guided: bool) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            shallow: Conv::build(pb, &format!("{prefix}.shallow"), 3, c, 3, true)?,
            fuse: if guided {
                Some(Conv::build(pb, &format!("{prefix}.fuse"), 2 * c, c, 1, true)?)
            } else {
                None
            },
            blocks: (0..cfg.rnet_blocks)
                .map(|i| ChannelAttention::build(pb, &format!("{prefix}.ors.ca{i}"), c, cfg.rnet_reduction))
                .collect::<Result<_>>()?,
            tail: Conv::build(pb, &format!("{prefix}.ors.conv"), c, c, 3, true)?,
            head: Conv::build_with(pb, &format!("{prefix}.head"), c, 3, 3, true, HEAD_INIT)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, rainy: Var, guide: Option<Var>) -> Result<Var> {
        let f = self.shallow.forward(g, rainy)?;
        let f = fuse_guide(g, self.fuse.as_ref(), f, guide)?;
        let mut y = f;
        for b in &self.blocks {
            y = b.forward(g, y)?;
        }
        let y = self.tail.forward(g, y)?;
        let y = g.add(y, f)?;
        head(g, &self.head, rainy, y)
    }
}

#[derive(Clone, Debug)]
pub struct Prism {
    pub cfg: PipelineConfig,
    pub cenet: Option<CeNet>,
    pub sfnet: Option<SfNet>,
    pub rnet: Option<RNet>,
}

impl Prism {
    /// Builds the model and its freshly initialized parameters.
    pub fn build(cfg: PipelineConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::register(cfg, &mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((model, store))
    }

    pub fn register<R: Rng>(cfg: PipelineConfig, pb: &mut ParamBuilder<'_, R>) -> Result<Self> {
        cfg.validate()?;
        let [c, s, r] = cfg.variant.stages();
        let cenet = if c { Some(CeNet::build(pb, "stage1", &cfg)?) } else { None };
        let sfnet = if s { Some(SfNet::build(pb, "stage2", &cfg, c)?) } else { None };
        let rnet = if r { Some(RNet::build(pb, "stage3", &cfg, s)?) } else { None };
        Ok(Self { cfg, cenet, sfnet, rnet })
    }

    /// Prefixes of the output heads, for zeroing.
    pub fn head_prefixes(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.cenet.is_some() {
            v.push("stage1.head.");
        }
        if self.sfnet.is_some() {
            v.push("stage2.head.");
        }
        if self.rnet.is_some() {
            v.push("stage3.head.");
        }
        v
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, rainy: Var) -> Result<StageOutputs> {
        let (b, ch, h, w) = g.value(rainy).dims4()?;
        if ch != 3 || b == 0 {
            return Err(Error::shape("prism", format!("expected [B,3,H,W], got {:?}", g.shape(rainy))));
        }
        let m = self.cfg.min_size();
        if h < m || w < m {
            return Err(Error::shape("prism", format!("image {h}x{w} smaller than {m}x{m}")));
        }
        let mut out = StageOutputs { stages: [None; 3] };
        let mut feat = None;
        if let Some(net) = &self.cenet {
            let (x1, f1) = net.forward(g, rainy)?;
            out.stages[0] = Some(x1);
            feat = Some(f1);
        }
        if let Some(net) = &self.sfnet {
            let (x2, f2) = net.forward(g, rainy, feat)?;
            out.stages[1] = Some(x2);
            feat = Some(f2);
        } else {
            feat = None;
        }
        if let Some(net) = &self.rnet {
            out.stages[2] = Some(net.forward(g, rainy, feat)?);
        }
        Ok(out)
    }
}

impl Prism {
    /// Noise-free forward pass on one `[3,H,W]` or `[B,3,H,W]` input; returns
    /// the stage outputs that exist, in the input's layout.
    pub fn infer(&self, values: &ParamValues<f32>, rainy: &Tensor) -> Result<[Option<Tensor>; 3]> {
        let single = rainy.rank() == 3;
        let x = if single {
            let mut s = vec![1];
            s.extend_from_slice(rainy.shape());
            rainy.clone().reshape(&s)?
        } else {
            rainy.clone()
        };
        let mut g = Graph::inference(values, Routing::eval());
        let xv = g.constant(x);
        let outs = self.forward(&mut g, xv)?;
        let mut res: [Option<Tensor>; 3] = [None, None, None];
        for (slot, v) in res.iter_mut().zip(outs.stages) {
            if let Some(v) = v {
                let t = g.value(v).clone();
                *slot = Some(if single { t.reshape(rainy.shape())? } else { t });
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_minimum_size() {
        assert_eq!(PipelineConfig::tiny().min_size(), 8);
    }

    #[test]
    fn variants_register_distinct_stages() {
        for v in Variant::ALL {
            let (model, _) = Prism::build(PipelineConfig::tiny().with_variant(v), 0).unwrap();
            let present = [model.cenet.is_some(), model.sfnet.is_some(), model.rnet.is_some()];
            assert_eq!(present, v.stages(), "{}", v.name());
            assert_eq!(model.head_prefixes().len(), present.iter().filter(|&&p| p).count());
        }
    }

    #[test]
    fn zero_heads_give_identity() {
        let (model, mut store) = Prism::build(PipelineConfig::tiny(), 3).unwrap();
        for p in model.head_prefixes() {
            store.zero_prefix(p);
        }
        let x = Tensor::full(&[1, 3, 12, 12], 0.25);
        for out in model.infer(&store.values(), &x).unwrap().iter().flatten() {
            assert_eq!(out, &x);
        }
    }
}
