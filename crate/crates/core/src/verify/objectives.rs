//! Scalar objectives over composite blocks for gradient checks. The block
//! input is registered as the parameter `input` so its gradient is checked
//! alongside the weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{ChannelAttention, ConvFfn, HaBlock, HaUnet, WindowAttention};
use crate::error::Result;
use crate::gradcheck::{project, Objective};
use crate::graph::Graph;
use crate::hdmamba::{gated_fuse, HdMambaBlock};
use crate::losses::{global_loss, LossConfig};
use crate::params::ParamStore;
use crate::pipeline::{Prism, StageOutputs};
use crate::real::Real;
use crate::ssm::{SelectiveSsm, SpatialBranch};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::wavelet::WaveletBranch;

pub(crate) const INPUT: &str = "input";

pub(crate) enum Subject {
    ChannelAttention(ChannelAttention),
    WindowAttention(WindowAttention, bool),
    ConvFfn(ConvFfn),
    HaBlock(HaBlock),
    HaUnet(HaUnet),
    /// Token input `[B,L,C]`.
    Ssm(SelectiveSsm),
    Spatial(SpatialBranch),
    Wavelet(WaveletBranch),
    HdMamba(HdMambaBlock),
    /// Parameters `xs`, `xw`, `gate.w`, `gate.b`.
    GatedFuse,
    /// Output of one stage (0-based) of the pipeline on `input`.
    Stage(Prism, usize),
    /// Global objective of the pipeline on `input` against `target`.
    Pipeline(Prism, LossConfig, Tensor<f64>),
    /// Global objective with parameters `x1`, `x2`, `x3` as the stage outputs.
    StageLoss(LossConfig, Tensor<f64>),
}

pub(crate) struct BlockObjective {
    pub subject: Subject,
    pub seed: u64,
}

impl BlockObjective {
    pub fn new(subject: Subject) -> Self {
        Self { subject, seed: 0x5151 }
    }
}

impl Objective for BlockObjective {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let out = match &self.subject {
            Subject::GatedFuse => {
                let xs = g.p("xs")?;
                let xw = g.p("xw")?;
                let w = g.p("gate.w")?;
                let b = g.p("gate.b")?;
                gated_fuse(g, xs, xw, w, b)?
            }
            Subject::StageLoss(cfg, target) => {
                let mut outs = StageOutputs { stages: [None; 3] };
                for (s, slot) in outs.stages.iter_mut().enumerate() {
                    *slot = Some(g.p(&format!("x{}", s + 1))?);
                }
                let y = g.constant(target.cast());
                return Ok(global_loss(g, &outs, y, cfg)?.0);
            }
            Subject::Pipeline(model, cfg, target) => {
                let x = g.p(INPUT)?;
                let outs = model.forward(g, x)?;
                let y = g.constant(target.cast());
                return Ok(global_loss(g, &outs, y, cfg)?.0);
            }
            other => {
                let x = g.p(INPUT)?;
                match other {
                    Subject::ChannelAttention(b) => b.forward(g, x)?,
                    Subject::WindowAttention(b, shifted) => b.forward(g, x, *shifted)?,
                    Subject::ConvFfn(b) => b.forward(g, x)?,
                    Subject::HaBlock(b) => b.forward(g, x)?,
                    Subject::HaUnet(b) => b.forward(g, x)?,
                    Subject::Ssm(b) => b.forward(g, x)?,
                    Subject::Spatial(b) => b.forward(g, x)?,
                    Subject::Wavelet(b) => b.forward(g, x)?,
                    Subject::HdMamba(b) => b.forward(g, x)?,
                    Subject::Stage(model, s) => {
                        model.forward(g, x)?.stages[*s].ok_or_else(|| crate::error::Error::Invalid(format!("stage {} is absent", s + 1)))?
                    }
                    _ => unreachable!("handled above"),
                }
            }
        };
        project(g, out, self.seed)
    }
}

/// Adds a uniform `[-1, 1)` input tensor under [`INPUT`].
pub(crate) fn add_input(store: &mut ParamStore, shape: &[usize], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.insert(INPUT, Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng))
}

/// Redraws every router projection with a larger spread, so that class
/// margins stay far wider than the finite-difference step and no argmax
/// flips between the two sides of a central difference.
pub(crate) fn widen_routers(store: &mut ParamStore, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().filter(|n| n.ends_with("router.w")).map(str::to_string).collect();
    for n in names {
        let shape = store.get(&n)?.shape().to_vec();
        store.set(&n, Tensor::randn(&shape, 0.5, &mut rng))?;
    }
    Ok(())
}
