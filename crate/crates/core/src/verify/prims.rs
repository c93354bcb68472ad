//! Gradient-check objectives for each primitive op.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{project, Objective};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::real::Real;
use crate::ssm::{discretize, linear_recurrence, permute_tokens, straight_through, TokenPermutation};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Where an input is sampled.
#[derive(Clone, Copy, Debug)]
enum Domain {
    /// Uniform in `[-1, 1]`.
    Any,
    /// Uniform in `[0.2, 1.5]`.
    Positive,
    /// Magnitude in `[0.1, 1]` with a random sign, away from kinks at zero.
    AwayFromZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prim {
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Neg,
    OneMinus,
    Square,
    Exp,
    Sqrt,
    Abs,
    Sigmoid,
    Relu,
    Gelu,
    Softplus,
    Prelu,
    Matmul,
    BatchedMatmul,
    Linear,
    Softmax,
    LayerNorm,
    GlobalAvgPool,
    Reshape,
    Permute,
    Transpose,
    Expand,
    Sum,
    Mean,
    SumAxis,
    Concat,
    Slice,
    PadReflect,
    Crop,
    Conv2d,
    DepthwiseConv2d,
    ChannelBias,
    ScaleChannels,
    AvgPool2,
    Upsample2,
    Dwt2,
    Idwt2,
    PackQuad,
    UnpackQuad,
    Discretize,
    LinearRecurrence,
    StraightThrough,
    PermuteTokens,
}

impl Prim {
    pub const ALL: [Prim; 47] = [
        Prim::Add,
        Prim::Sub,
        Prim::Mul,
        Prim::Scale,
        Prim::AddScalar,
        Prim::Neg,
        Prim::OneMinus,
        Prim::Square,
        Prim::Exp,
        Prim::Sqrt,
        Prim::Abs,
        Prim::Sigmoid,
        Prim::Relu,
        Prim::Gelu,
        Prim::Softplus,
        Prim::Prelu,
        Prim::Matmul,
        Prim::BatchedMatmul,
        Prim::Linear,
        Prim::Softmax,
        Prim::LayerNorm,
        Prim::GlobalAvgPool,
        Prim::Reshape,
        Prim::Permute,
        Prim::Transpose,
        Prim::Expand,
        Prim::Sum,
        Prim::Mean,
        Prim::SumAxis,
        Prim::Concat,
        Prim::Slice,
        Prim::PadReflect,
        Prim::Crop,
        Prim::Conv2d,
        Prim::DepthwiseConv2d,
        Prim::ChannelBias,
        Prim::ScaleChannels,
        Prim::AvgPool2,
        Prim::Upsample2,
        Prim::Dwt2,
        Prim::Idwt2,
        Prim::PackQuad,
        Prim::UnpackQuad,
        Prim::Discretize,
        Prim::LinearRecurrence,
        Prim::StraightThrough,
        Prim::PermuteTokens,
    ];

    pub fn name(self) -> String {
        let dbg = format!("{self:?}");
        let mut out = String::new();
        for (i, ch) in dbg.chars().enumerate() {
            if ch.is_uppercase() && i > 0 {
                out.push('_');
            }
            out.push(ch.to_ascii_lowercase());
        }
        out
    }

    fn inputs(self) -> Vec<(&'static str, Vec<usize>, Domain)> {
        use Domain::*;
        use Prim::*;
        let img = vec![1, 2, 4, 4];
        match self {
            Add | Sub | Mul => vec![("a", vec![3, 4], Any), ("b", vec![3, 4], Any)],
            Scale | AddScalar | Neg | OneMinus | Square | Exp | Sigmoid | Gelu | Softplus => vec![("a", vec![3, 4], Any)],
            Sqrt => vec![("a", vec![3, 4], Positive)],
            Abs | Relu => vec![("a", vec![3, 4], AwayFromZero)],
            Prelu => vec![("a", img, AwayFromZero), ("alpha", vec![2], Any)],
            Matmul => vec![("a", vec![3, 4], Any), ("b", vec![4, 5], Any)],
            BatchedMatmul => vec![("a", vec![2, 3, 4], Any), ("b", vec![2, 4, 2], Any)],
            Linear => vec![("a", vec![3, 4], Any), ("w", vec![4, 5], Any), ("bias", vec![5], Any)],
            Softmax => vec![("a", vec![2, 3, 4], Any)],
            LayerNorm => vec![("a", img, Any), ("gamma", vec![2], Any), ("beta", vec![2], Any)],
            GlobalAvgPool | Reshape | Permute | Sum | Mean | SumAxis | PadReflect | Crop | AvgPool2 | Upsample2 | Dwt2 => {
                vec![("a", img, Any)]
            }
            Transpose => vec![("a", vec![2, 3, 4], Any)],
            Expand => vec![("a", vec![1, 3, 1], Any)],
            Concat => vec![("a", vec![1, 2, 3, 3], Any), ("b", vec![1, 1, 3, 3], Any)],
            Slice => vec![("a", vec![2, 5, 3], Any)],
            Conv2d => vec![("a", img, Any), ("k", vec![3, 2, 3, 3], Any)],
            DepthwiseConv2d => vec![("a", img, Any), ("k", vec![2, 1, 3, 3], Any)],
            ChannelBias => vec![("a", img, Any), ("bias", vec![2], Any)],
            ScaleChannels => vec![("a", img, Any), ("s", vec![1, 2], Any)],
            Idwt2 | PackQuad => vec![("a", vec![4, 1, 2, 2, 2], Any)],
            UnpackQuad => vec![("a", img, Any)],
            Discretize => vec![
                ("a", vec![2, 3], Any),
                ("b", vec![1, 4, 3], Any),
                ("delta", vec![1, 4, 2], Positive),
            ],
            LinearRecurrence => vec![("a", vec![1, 5, 2, 2], Any), ("u", vec![1, 5, 2, 2], Any)],
            StraightThrough => vec![("a", vec![3, 4], Any)],
            PermuteTokens => vec![("a", vec![2, 4, 3], Any)],
        }
    }

    /// A store holding this op's inputs as parameters.
    pub fn store(self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, dom) in self.inputs() {
            let t = match dom {
                Domain::Any => Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng),
                Domain::Positive => Tensor::rand_uniform(&shape, 0.2, 1.5, &mut rng),
                Domain::AwayFromZero => {
                    let mag: Tensor = Tensor::rand_uniform(&shape, 0.1, 1.0, &mut rng);
                    let sign: Tensor = Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng);
                    mag.zip_map(&sign, |m, s| if s < 0.0 { -m } else { m }).expect("same shape")
                }
            };
            store.insert(name, t).expect("distinct names");
        }
        store
    }

    pub fn apply<T: Real>(self, g: &mut Graph<'_, T>) -> Result<Var> {
        use Prim::*;
        let a = g.p("a")?;
        Ok(match self {
            Add => {
                let b = g.p("b")?;
                g.add(a, b)?
            }
            Sub => {
                let b = g.p("b")?;
                g.sub(a, b)?
            }
            Mul => {
                let b = g.p("b")?;
                g.mul(a, b)?
            }
            Scale => g.scale(a, -1.7),
            AddScalar => g.add_scalar(a, 0.3),
            Neg => g.neg(a),
            OneMinus => g.one_minus(a),
            Square => g.square(a),
            Exp => g.exp(a),
            Sqrt => g.sqrt(a),
            Abs => g.abs(a),
            Sigmoid => g.sigmoid(a),
            Relu => g.relu(a),
            Gelu => g.gelu(a),
            Softplus => g.softplus(a),
            Prelu => {
                let al = g.p("alpha")?;
                g.prelu(a, al)?
            }
            Matmul | BatchedMatmul => {
                let b = g.p("b")?;
                g.matmul(a, b)?
            }
            Linear => {
                let w = g.p("w")?;
                let b = g.p("bias")?;
                g.linear(a, w, Some(b))?
            }
            Softmax => g.softmax(a, 2)?,
            LayerNorm => {
                let gm = g.p("gamma")?;
                let bt = g.p("beta")?;
                g.layer_norm(a, gm, bt, 1)?
            }
            GlobalAvgPool => g.global_avg_pool(a)?,
            Reshape => g.reshape(a, &[4, 8])?,
            Permute => g.permute(a, &[0, 2, 3, 1])?,
            Transpose => g.transpose(a)?,
            Expand => g.expand(a, &[2, 3, 4])?,
            Sum => g.sum(a),
            Mean => g.mean(a),
            SumAxis => g.sum_axis(a, 2)?,
            Concat => {
                let b = g.p("b")?;
                g.concat(&[a, b], 1)?
            }
            Slice => g.slice(a, 1, 1, 3)?,
            PadReflect => g.pad_reflect(a, 1, 2, 3, 0)?,
            Crop => g.crop(a, 1, 0, 2, 3)?,
            Conv2d => {
                let k = g.p("k")?;
                g.conv2d(a, k, 1, 1)?
            }
            DepthwiseConv2d => {
                let k = g.p("k")?;
                g.conv2d(a, k, 1, 2)?
            }
            ChannelBias => {
                let b = g.p("bias")?;
                g.add_channel_bias(a, b)?
            }
            ScaleChannels => {
                let s = g.p("s")?;
                g.scale_channels(a, s)?
            }
            AvgPool2 => g.avg_pool2(a)?,
            Upsample2 => g.upsample2(a)?,
            Dwt2 => g.dwt2(a)?,
            Idwt2 => g.idwt2(a)?,
            PackQuad => g.pack_quad(a)?,
            UnpackQuad => g.unpack_quad(a)?,
            Discretize => {
                let b = g.p("b")?;
                let d = g.p("delta")?;
                let (abar, bbar) = discretize(g, a, b, d)?;
                let pa = project(g, abar, 11)?;
                let pb = project(g, bbar, 12)?;
                g.add(pa, pb)?
            }
            LinearRecurrence => {
                let u = g.p("u")?;
                // Keep |a| < 1 so the recurrence stays well conditioned.
                let s = g.scale(a, 0.9);
                linear_recurrence(g, s, u)?
            }
            StraightThrough => {
                // With the hard value tracking the soft one the op is the
                // identity, so finite differences see the pass-through rule.
                let hard = g.value(a).clone();
                let st = straight_through(g, a, hard)?;
                g.mul(st, st)?
            }
            PermuteTokens => {
                let perms = vec![
                    TokenPermutation::sort_by_class(&[2, 0, 1, 0]),
                    TokenPermutation::sort_by_class(&[1, 1, 0, 2]),
                ];
                let fwd = permute_tokens(g, a, &perms, false)?;
                let w = g.scale(a, 0.5);
                let mixed = g.mul(fwd, w)?;
                permute_tokens(g, mixed, &perms, true)?
            }
        })
    }
}

/// Projects a primitive's output to a scalar.
pub struct PrimObjective {
    pub prim: Prim,
    pub seed: u64,
}

impl Objective for PrimObjective {
    fn eval<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let out = self.prim.apply(g)?;
        project(g, out, self.seed)
    }
}
