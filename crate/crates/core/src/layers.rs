//! Small parameterized layers shared by the blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Init, ParamBuilder};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Conv kernels are drawn with std `1/sqrt(fan_in)`.
pub const CONV_INIT: Init = Init::FanIn(1.0);
/// Linear projections use a truncated normal with std 0.02.
pub const PROJ_INIT: Init = Init::TruncNormal(0.02);

/// Square-kernel convolution with "same" padding and an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    kernel: String,
    bias: Option<String>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Result<Self> {
        Self::build_with(pb, prefix, cin, cout, k, bias, CONV_INIT)
    }

    pub fn build_with<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::Invalid(format!("{prefix}: kernel size {k} must be odd")));
        }
        let kernel = pb.add(&format!("{prefix}.w"), &[cout, cin, k, k], init)?;
        let bias = if bias {
            Some(pb.add(&format!("{prefix}.b"), &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv {
            kernel,
            bias,
            cin,
            cout,
            k,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let k = g.p(&self.kernel)?;
        let y = g.conv2d(x, k, self.k / 2, 1)?;
        match &self.bias {
            Some(b) => {
                let b = g.p(b)?;
                g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn kernel_name(&self) -> &str {
        &self.kernel
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.bias.as_deref()
    }
}

/// Layer normalization over the channel axis of `[B,C,H,W]`.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    gamma: String,
    beta: String,
}

impl ChannelNorm {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(ChannelNorm {
            gamma: pb.add(&format!("{prefix}.g"), &[channels], Init::Const(1.0))?,
            beta: pb.add(&format!("{prefix}.b"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gm = g.p(&self.gamma)?;
        let bt = g.p(&self.beta)?;
        g.layer_norm(x, gm, bt, 1)
    }
}

/// Per-position linear map over channels: `[B,C,H,W] x [C,D] -> [B,D,H,W]`.
pub fn channel_linear<T: Real>(t: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (bs, c, h, wd) = t.value(x).dims4()?;
    let d = match t.shape(w) {
        &[ci, d] if ci == c => d,
        s => return Err(Error::shape("channel_linear", format!("weight {s:?} for {c} channels"))),
    };
    let p = t.permute(x, &[0, 2, 3, 1])?;
    let flat = t.reshape(p, &[bs * h * wd, c])?;
    let y = t.linear(flat, w, b)?;
    let y = t.reshape(y, &[bs, h, wd, d])?;
    t.permute(y, &[0, 3, 1, 2])
}

/// `x + conv(relu(conv(x)))`, the plain convolutional unit used by ablations.
#[derive(Clone, Debug)]
pub struct ResConvBlock {
    conv1: Conv,
    conv2: Conv,
}

impl ResConvBlock {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(ResConvBlock {
            conv1: Conv::build(pb, &format!("{prefix}.conv1"), channels, channels, 3, true)?,
            conv2: Conv::build(pb, &format!("{prefix}.conv2"), channels, channels, 3, true)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(g, x)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, y)?;
        g.add(x, y)
    }
}
