//! Channel attention, (shifted-)window self-attention, ConvFFN, the hybrid
//! attention unit and the UNet built from it.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{channel_linear, ChannelNorm, Conv, ResConvBlock, CONV_INIT, PROJ_INIT};
use crate::params::{Init, ParamBuilder};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Additive logit for query/key pairs that come from different regions of a
/// cyclically shifted window.
pub const MASK_LOGIT: f64 = -1e9;

/// Squeeze-and-excite channel attention with a residual:
/// `x + y * sigmoid(w2 relu(w1 gap(y)))`, `y = conv(prelu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    prefix: String,
    conv1: Conv,
    conv2: Conv,
    pub channels: usize,
    pub reduction: usize,
}

/// Intermediate values of one channel-attention evaluation.
pub struct ChannelAttentionTrace {
    pub y: Var,
    pub gate: Var,
    pub out: Var,
}

impl ChannelAttention {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Invalid(format!(
                "{prefix}: reduction ratio {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        let conv1 = Conv::build(pb, &format!("{prefix}.conv1"), channels, channels, 3, false)?;
        pb.add(&format!("{prefix}.prelu"), &[channels], Init::Const(0.25))?;
        let conv2 = Conv::build(pb, &format!("{prefix}.conv2"), channels, channels, 3, false)?;
        pb.add(&format!("{prefix}.w1"), &[hidden, channels], PROJ_INIT)?;
        pb.add(&format!("{prefix}.w2"), &[channels, hidden], PROJ_INIT)?;
        Ok(Self {
            prefix: prefix.to_string(),
            conv1,
            conv2,
            channels,
            reduction,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, x)?.out)
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<ChannelAttentionTrace> {
        let y = self.conv1.forward(g, x)?;
        let alpha = g.p(&format!("{}.prelu", self.prefix))?;
        let y = g.prelu(y, alpha)?;
        let y = self.conv2.forward(g, y)?;
        let z = g.global_avg_pool(y)?;
        let w1 = g.p(&format!("{}.w1", self.prefix))?;
        let w1t = g.transpose(w1)?;
        let hdn = g.matmul(z, w1t)?;
        let hdn = g.relu(hdn);
        let w2 = g.p(&format!("{}.w2", self.prefix))?;
        let w2t = g.transpose(w2)?;
        let s = g.matmul(hdn, w2t)?;
        let gate = g.sigmoid(s);
        let ys = g.scale_channels(y, gate)?;
        let out = g.add(x, ys)?;
        Ok(ChannelAttentionTrace { y, gate, out })
    }
}

/// Multi-head self-attention inside non-overlapping `window x window` tiles
/// with a learned relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    prefix: String,
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
}

/// Output plus the post-softmax weights `[B, nW, heads, T, T]`.
pub struct WindowAttentionTrace {
    pub out: Var,
    pub weights: Var,
    pub shift: usize,
}

impl WindowAttention {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, channels: usize, window: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Invalid(format!(
                "{prefix}: {channels} channels not divisible by {heads} heads"
            )));
        }
        if window == 0 {
            return Err(Error::Invalid(format!("{prefix}: window size must be positive")));
        }
        for p in ["q", "k", "v", "proj"] {
            pb.add(&format!("{prefix}.w{p}"), &[channels, channels], PROJ_INIT)?;
            pb.add(&format!("{prefix}.b{p}"), &[channels], Init::Zeros)?;
        }
        let span = 2 * window - 1;
        pb.add(&format!("{prefix}.rel_bias"), &[span * span, heads], PROJ_INIT)?;
        Ok(Self {
            prefix: prefix.to_string(),
            channels,
            window,
            heads,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, shifted: bool) -> Result<Var> {
        Ok(self.trace(g, x, shifted)?.out)
    }

    fn proj<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, which: &str) -> Result<Var> {
        let w = g.p(&format!("{}.w{which}", self.prefix))?;
        let b = g.p(&format!("{}.b{which}", self.prefix))?;
        g.linear(x, w, Some(b))
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, shifted: bool) -> Result<WindowAttentionTrace> {
        let (b, c, h, w) = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(
                "window_attention",
                format!("expected {} channels, got {c}", self.channels),
            ));
        }
        let win = self.window;
        let (ph, pw) = ((win - h % win) % win, (win - w % win) % win);
        if ph >= h || pw >= w {
            return Err(Error::shape("window_attention", format!("window {win} does not fit image {h}x{w}")));
        }
        let xp = g.pad_reflect(x, 0, ph, 0, pw)?;
        let (hp, wp) = (h + ph, w + pw);
        let shift = if shifted && hp.min(wp) > win { win / 2 } else { 0 };
        let (nwy, nwx) = (hp / win, wp / win);
        let nw = nwy * nwx;
        let t = win * win;
        let heads = self.heads;
        let d = c / heads;

        // Shifted image position of token `tk` in window `wi`.
        let pos = |wi: usize, tk: usize| -> (usize, usize) {
            let (wy, wx) = (wi / nwx, wi % nwx);
            ((wy * win + tk / win + shift) % hp, (wx * win + tk % win + shift) % wp)
        };

        let mut part = Vec::with_capacity(b * nw * t * c);
        for bi in 0..b {
            for wi in 0..nw {
                for tk in 0..t {
                    let (yy, xx) = pos(wi, tk);
                    for ch in 0..c {
                        part.push(((bi * c + ch) * hp + yy) * wp + xx);
                    }
                }
            }
        }
        let tokens = g.gather(xp, &[b * nw * t, c], Rc::new(part))?;

        let split = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b * nw, t, heads, d])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * nw * heads, t, d])
        };
        let q = self.proj(g, tokens, "q")?;
        let q = split(g, q)?;
        let q = g.scale(q, 1.0 / (d as f64).sqrt());
        let k = self.proj(g, tokens, "k")?;
        let k = split(g, k)?;
        let v = self.proj(g, tokens, "v")?;
        let v = split(g, v)?;

        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.reshape(logits, &[b, nw, heads, t, t])?;

        let table = g.p(&format!("{}.rel_bias", self.prefix))?;
        let span = 2 * win - 1;
        let mut rel = Vec::with_capacity(heads * t * t);
        for hd in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    let dy = i / win + win - 1 - j / win;
                    let dx = i % win + win - 1 - j % win;
                    rel.push((dy * span + dx) * heads + hd);
                }
            }
        }
        let bias = g.gather(table, &[1, 1, heads, t, t], Rc::new(rel))?;
        let bias = g.expand(bias, &[b, nw, heads, t, t])?;
        let mut logits = g.add(logits, bias)?;

        if shift > 0 {
            let region = |p: usize, n: usize| -> usize {
                if p < n - win {
                    0
                } else if p < n - shift {
                    1
                } else {
                    2
                }
            };
            let mask = Tensor::from_fn(&[1, nw, 1, t, t], |idx| {
                let (wi, i, j) = (idx / (t * t), (idx / t) % t, idx % t);
                let (yi, xi) = pos(wi, i);
                let (yj, xj) = pos(wi, j);
                let same = region(yi, hp) == region(yj, hp) && region(xi, wp) == region(xj, wp);
                if same {
                    T::zero()
                } else {
                    T::of(MASK_LOGIT)
                }
            });
            let mask = g.constant(mask);
            let mask = g.expand(mask, &[b, nw, heads, t, t])?;
            logits = g.add(logits, mask)?;
        }

        let weights = g.softmax(logits, 4)?;
        let attn = g.reshape(weights, &[b * nw * heads, t, t])?;
        let o = g.matmul(attn, v)?;
        let o = g.reshape(o, &[b * nw, heads, t, d])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[b * nw * t, c])?;
        let o = self.proj(g, o, "proj")?;

        // Back to image layout, undoing the partition and the cyclic shift.
        let mut merge = Vec::with_capacity(b * c * hp * wp);
        for bi in 0..b {
            for ch in 0..c {
                for y in 0..hp {
                    let yy = (y + hp - shift) % hp;
                    for xx0 in 0..wp {
                        let xx = (xx0 + wp - shift) % wp;
                        let wi = (yy / win) * nwx + xx / win;
                        let tk = (yy % win) * win + xx % win;
                        merge.push(((bi * nw + wi) * t + tk) * c + ch);
                    }
                }
            }
        }
        let img = g.gather(o, &[b, c, hp, wp], Rc::new(merge))?;
        let out = g.crop(img, 0, 0, h, w)?;
        Ok(WindowAttentionTrace { out, weights, shift })
    }
}

/// `U = gelu(LN(x) w1 + b1)`, depthwise 3x3 on `U`, then `U' w2 + b2`.
#[derive(Clone, Debug)]
pub struct ConvFfn {
    prefix: String,
    norm: ChannelNorm,
    pub channels: usize,
    pub hidden: usize,
}

impl ConvFfn {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, channels: usize, expansion: usize) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::Invalid(format!("{prefix}: expansion must be at least 1")));
        }
        let hidden = channels * expansion;
        let norm = ChannelNorm::build(pb, &format!("{prefix}.ln"), channels)?;
        pb.add(&format!("{prefix}.w1"), &[channels, hidden], PROJ_INIT)?;
        pb.add(&format!("{prefix}.b1"), &[hidden], Init::Zeros)?;
        pb.add(&format!("{prefix}.dw"), &[hidden, 1, 3, 3], CONV_INIT)?;
        pb.add(&format!("{prefix}.w2"), &[hidden, channels], PROJ_INIT)?;
        pb.add(&format!("{prefix}.b2"), &[channels], Init::Zeros)?;
        Ok(Self {
            prefix: prefix.to_string(),
            norm,
            channels,
            hidden,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, x)?;
        let w1 = g.p(&format!("{}.w1", self.prefix))?;
        let b1 = g.p(&format!("{}.b1", self.prefix))?;
        let u = channel_linear(g, n, w1, Some(b1))?;
        let u = g.gelu(u);
        let dw = g.p(&format!("{}.dw", self.prefix))?;
        let u = g.conv2d(u, dw, 1, self.hidden)?;
        let w2 = g.p(&format!("{}.w2", self.prefix))?;
        let b2 = g.p(&format!("{}.b2", self.prefix))?;
        channel_linear(g, u, w2, Some(b2))
    }
}

/// One hybrid attention unit:
/// `x_ca = CA(LN(x))`, `x_attn = WAttn(LN(x_ca))`, `y = x_attn + FFN(LN(x_attn))`.
#[derive(Clone, Debug)]
pub struct HaBlock {
    norm1: ChannelNorm,
    pub ca: ChannelAttention,
    norm2: ChannelNorm,
    pub wattn: WindowAttention,
    norm3: ChannelNorm,
    pub ffn: ConvFfn,
    pub shifted: bool,
}

impl HaBlock {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: &HaUnetConfig, channels: usize, index: usize) -> Result<Self> {
        Ok(Self {
            norm1: ChannelNorm::build(pb, &format!("{prefix}.norm1"), channels)?,
            ca: ChannelAttention::build(pb, &format!("{prefix}.ca"), channels, cfg.reduction)?,
            norm2: ChannelNorm::build(pb, &format!("{prefix}.norm2"), channels)?,
            wattn: WindowAttention::build(pb, &format!("{prefix}.wattn"), channels, cfg.window, cfg.heads)?,
            norm3: ChannelNorm::build(pb, &format!("{prefix}.norm3"), channels)?,
            ffn: ConvFfn::build(pb, &format!("{prefix}.ffn"), channels, cfg.ffn_expansion)?,
            shifted: index % 2 == 1,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = self.norm1.forward(g, x)?;
        let x_ca = self.ca.forward(g, n)?;
        let n = self.norm2.forward(g, x_ca)?;
        let x_attn = self.wattn.forward(g, n, self.shifted)?;
        let n = self.norm3.forward(g, x_attn)?;
        let x_out = self.ffn.forward(g, n)?;
        g.add(x_attn, x_out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaUnetConfig {
    pub channels: usize,
    pub levels: usize,
    pub blocks: usize,
    pub window: usize,
    pub heads: usize,
    pub reduction: usize,
    pub ffn_expansion: usize,
}

impl Default for HaUnetConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            levels: 3,
            blocks: 2,
            window: 4,
            heads: 2,
            reduction: 4,
            ffn_expansion: 2,
        }
    }
}

impl HaUnetConfig {
    /// Spatial sizes must be multiples of this (after padding).
    pub fn multiple(&self) -> usize {
        (1 << (self.levels - 1)) * self.window
    }
}

/// Block used at every UNet level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnetKind {
    /// Hybrid attention units.
    Hybrid,
    /// Plain residual convolution blocks of the same depth and width.
    Conv,
}

#[derive(Clone, Debug)]
enum Unit {
    Ha(HaBlock),
    Conv(ResConvBlock),
}

impl Unit {
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match self {
            Unit::Ha(b) => b.forward(g, x),
            Unit::Conv(b) => b.forward(g, x),
        }
    }
}

/// Encoder-decoder with skip connections. Level `l` runs at `1/2^l`
/// resolution with `C * 2^l` channels; the deepest level is the bottleneck.
#[derive(Clone, Debug)]
pub struct HaUnet {
    pub cfg: HaUnetConfig,
    encoders: Vec<Vec<Unit>>,
    downs: Vec<Conv>,
    bottleneck: Vec<Unit>,
    ups: Vec<Conv>,
    fuses: Vec<Conv>,
    decoders: Vec<Vec<Unit>>,
}

impl HaUnet {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, cfg: HaUnetConfig, kind: UnetKind) -> Result<Self> {
        if cfg.levels == 0 || cfg.blocks == 0 {
            return Err(Error::Invalid(format!("{prefix}: levels and blocks must be positive")));
        }
        let stack = |pb: &mut ParamBuilder<'_, R>, level: usize, first: usize| -> Result<Vec<Unit>> {
            let ch = cfg.channels << level;
            (0..cfg.blocks)
                .map(|i| {
                    let name = format!("{prefix}.level{level}.block{}", first + i);
                    Ok(match kind {
                        UnetKind::Hybrid => Unit::Ha(HaBlock::build(pb, &name, &cfg, ch, i)?),
                        UnetKind::Conv => Unit::Conv(ResConvBlock::build(pb, &name, ch)?),
                    })
                })
                .collect()
        };
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for l in 0..cfg.levels - 1 {
            let ch = cfg.channels << l;
            encoders.push(stack(pb, l, 0)?);
            downs.push(Conv::build(pb, &format!("{prefix}.down{l}"), ch, 2 * ch, 1, false)?);
        }
        let bottleneck = stack(pb, cfg.levels - 1, 0)?;
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoders = Vec::new();
        for l in (0..cfg.levels - 1).rev() {
            let ch = cfg.channels << l;
            ups.push(Conv::build(pb, &format!("{prefix}.up{l}"), 2 * ch, ch, 1, false)?);
            fuses.push(Conv::build(pb, &format!("{prefix}.fuse{l}"), 2 * ch, ch, 1, true)?);
            decoders.push(stack(pb, l, cfg.blocks)?);
        }
        Ok(Self {
            cfg,
            encoders,
            downs,
            bottleneck,
            ups,
            fuses,
            decoders,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.cfg.channels {
            return Err(Error::shape("ha_unet", format!("expected {} channels, got {c}", self.cfg.channels)));
        }
        let m = self.cfg.multiple();
        if h < m || w < m {
            return Err(Error::shape("ha_unet", format!("image {h}x{w} smaller than {m}x{m}")));
        }
        let xp = g.pad_reflect(x, 0, (m - h % m) % m, 0, (m - w % m) % m)?;

        let mut cur = xp;
        let mut skips = Vec::new();
        for (units, down) in self.encoders.iter().zip(&self.downs) {
            for u in units {
                cur = u.forward(g, cur)?;
            }
            skips.push(cur);
            let pooled = g.avg_pool2(cur)?;
            cur = down.forward(g, pooled)?;
        }
        for u in &self.bottleneck {
            cur = u.forward(g, cur)?;
        }
        for ((up, fuse), units) in self.ups.iter().zip(&self.fuses).zip(&self.decoders) {
            let skip = skips.pop().expect("one skip per decoder level");
            let upsampled = g.upsample2(cur)?;
            let halved = up.forward(g, upsampled)?;
            let cat = g.concat(&[halved, skip], 1)?;
            cur = fuse.forward(g, cat)?;
            for u in units {
                cur = u.forward(g, cur)?;
            }
        }
        g.crop(cur, 0, 0, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Routing};
    use crate::params::ParamStore;
    use rand::SeedableRng;

    fn store_with<F, M>(f: F) -> crate::Result<(M, ParamStore)>
    where
        F: FnOnce(&mut ParamBuilder<'_, rand_chacha::ChaCha8Rng>) -> crate::Result<M>,
    {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
        Ok((m, store))
    }

    #[test]
    fn reduction_must_divide_channels() {
        assert!(store_with(|pb| ChannelAttention::build(pb, "ca", 6, 4)).is_err());
        assert!(store_with(|pb| ChannelAttention::build(pb, "ca", 8, 4)).is_ok());
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(store_with(|pb| WindowAttention::build(pb, "wa", 6, 4, 4)).is_err());
    }

    #[test]
    fn bias_table_covers_all_offsets() {
        let (_, store) = store_with(|pb| WindowAttention::build(pb, "wa", 8, 4, 2)).unwrap();
        assert_eq!(store.get("wa.rel_bias").unwrap().shape(), &[49, 2]);
    }

    #[test]
    fn unet_multiple_and_padding() {
        let cfg = HaUnetConfig {
            channels: 4,
            levels: 2,
            blocks: 1,
            window: 4,
            heads: 2,
            reduction: 2,
            ffn_expansion: 2,
        };
        assert_eq!(cfg.multiple(), 8);
        let (net, store) = store_with(|pb| HaUnet::build(pb, "u", cfg, UnetKind::Hybrid)).unwrap();
        let values = store.values::<f64>();
        let mut g = Graph::inference(&values, Routing::eval());
        let x = g.constant(Tensor::full(&[1, 4, 9, 13], 0.3));
        let y = net.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 9, 13]);
        let small = g.constant(Tensor::zeros(&[1, 4, 7, 9]));
        assert!(net.forward(&mut g, small).is_err());
    }
}
